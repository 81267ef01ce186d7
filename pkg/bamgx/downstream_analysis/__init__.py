from .rate_tables import rate_table, write_rate_table
from .coarsening_regions import region_statistics, write_region_statistics

__all__ = ["rate_table", "write_rate_table", "region_statistics", "write_region_statistics"]
