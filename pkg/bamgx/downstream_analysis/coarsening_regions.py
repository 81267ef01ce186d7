"""
Region-wise statistics of a coarse-grid selection.

For problems whose GridMeta carries region labels, the coarse points chosen
by compatible relaxation are summarized per region: the coarse fraction and
how the coarse points line up. A coarse point whose left or right grid
neighbour is also coarse counts toward x-adjacency, one whose lower or upper
neighbour is coarse toward y-adjacency. Semicoarsening in x (every other
point along x, all points along y) produces coarse lines parallel to y, so
y-adjacency is high and x-adjacency is low. Regions whose coarse points
form no lines are labelled full, regions with hardly any coarse points none.
"""

import logging
from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd

from bamgx.pipeline.problem_gen import GridMeta

logger = logging.getLogger(__name__)

LINE_ADJACENCY = 0.5  # adjacency fraction above which coarse points are said to form lines
MIN_COARSE_FRACTION = 0.05  # sparser regions count as not coarsened


def _neighbour_coarse(c_grid: np.ndarray, axis: int) -> np.ndarray:
    """True where a point has a coarse neighbour along axis (0: y, 1: x)."""
    out = np.zeros_like(c_grid)
    if axis == 1:
        out[:, 1:] |= c_grid[:, :-1]
        out[:, :-1] |= c_grid[:, 1:]
    else:
        out[1:, :] |= c_grid[:-1, :]
        out[:-1, :] |= c_grid[1:, :]
    return out


def _orientation(x_adj: float, y_adj: float, fraction: float) -> str:
    if not fraction >= MIN_COARSE_FRACTION:
        return 'none'
    if y_adj >= LINE_ADJACENCY and y_adj > 2.0 * x_adj:
        return 'x_semicoarsening'
    if x_adj >= LINE_ADJACENCY and x_adj > 2.0 * y_adj:
        return 'y_semicoarsening'
    return 'full'


def region_statistics(c_flags: np.ndarray, meta: GridMeta) -> pd.DataFrame:
    """
    Coarse fraction and line orientation per region.

    Args:
        c_flags: Boolean coarse-point mask in linear-index order.
        meta: Grid metadata with region_index and region_names.

    Returns:
        One row per region: region, n_points, n_coarse, coarse_fraction,
        x_adjacency, y_adjacency, orientation.

    Raises:
        ValueError: If meta has no region labels or sizes disagree.
    """
    if meta.region_index is None:
        raise ValueError("region statistics need a GridMeta with region_index")
    c_flags = np.asarray(c_flags, dtype=bool)
    if c_flags.size != meta.n:
        raise ValueError(f"c_flags has {c_flags.size} entries, grid has {meta.n}")
    c_grid = c_flags.reshape(meta.ny, meta.nx)
    x_adj = (_neighbour_coarse(c_grid, 1) & c_grid).ravel()
    y_adj = (_neighbour_coarse(c_grid, 0) & c_grid).ravel() if meta.dim == 2 else np.zeros(meta.n, bool)

    rows: List[Dict] = []
    for r, name in enumerate(meta.region_names):
        in_region = meta.region_index == r
        n_pts = int(in_region.sum())
        n_c = int((c_flags & in_region).sum())
        xa = float(x_adj[in_region].sum() / n_c) if n_c else 0.0
        ya = float(y_adj[in_region].sum() / n_c) if n_c else 0.0
        fraction = n_c / n_pts if n_pts else float('nan')
        rows.append({'region': name, 'n_points': n_pts, 'n_coarse': n_c, 'coarse_fraction': fraction,
                     'x_adjacency': xa, 'y_adjacency': ya, 'orientation': _orientation(xa, ya, fraction)})
    return pd.DataFrame(rows)


def write_region_statistics(out_dir: str, c_flags: np.ndarray, meta: GridMeta,
                            filename: str = 'fig1_regions.csv') -> Path:
    stats = region_statistics(c_flags, meta)
    path = Path(out_dir) / filename
    path.parent.mkdir(parents=True, exist_ok=True)
    stats.to_csv(path, index=False)
    for row in stats.itertuples():
        logger.info(f"region {row.region}: coarse fraction {row.coarse_fraction:.3f}, "
                    f"orientation {row.orientation}")
    return path
