"""
Rate table assembly for bamgx results.

Turns the long results.csv (one row per problem, h, setup variant and
interpolation method) into the wide layout the benchmark tables use: one
row per problem and mesh size, one column per (variant, method), cells
holding the median rate or "*" where the grid does not resolve the problem.
"""

import logging
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

UNRESOLVED = '*'
RATE_DIGITS = 3  # tables print rates as .xyz


def _h_order(h: pd.Series) -> pd.Series:
    return h.map(lambda s: int(str(s).split('/')[-1]))


def _format_rate(rho: float, status: str) -> str:
    if status == UNRESOLVED:
        return UNRESOLVED
    if rho is None or np.isnan(rho):
        return 'nan'
    return f"{rho:.{RATE_DIGITS}f}".lstrip('0') if rho < 1.0 else f"{rho:.{RATE_DIGITS}f}"


def rate_table(results: pd.DataFrame, value: str = 'rho_median') -> pd.DataFrame:
    """
    Pivot result rows into a (problem, h) x (variant, method) table of
    formatted rates.

    Args:
        results: Frame with the results.csv columns.
        value: Column to tabulate ('rho_median', 'rho_min', 'rho_max', ...).

    Returns:
        Wide frame ordered by problem and increasing 1/h; method names are
        upper-cased ('LS', 'LSR').
    """
    if results.empty:
        return pd.DataFrame()
    df = results.copy()
    df['method'] = df['method'].str.upper()
    df['cell'] = [_format_rate(v, s) for v, s in zip(df[value], df['status'])]
    df['h_order'] = _h_order(df['h'])
    df = df.sort_values(['problem', 'h_order'], kind='stable')
    table = df.pivot_table(index=['problem', 'h'], columns=['variant', 'method'], values='cell',
                           aggfunc='first', sort=False)
    return table.reindex(list(dict.fromkeys(zip(df['problem'], df['h']))))


def write_rate_table(results_csv: str, out_path: Optional[str] = None, value: str = 'rho_median') -> Path:
    """Read results.csv and write its pivoted rate table next to it (rate_table.csv by default)."""
    results_csv = Path(results_csv)
    results = pd.read_csv(results_csv, keep_default_na=False, na_values=['', 'nan', 'NaN'])
    table = rate_table(results, value=value)
    out_path = Path(out_path) if out_path else results_csv.with_name('rate_table.csv')
    table.to_csv(out_path)
    logger.info(f"Rate table with {len(table)} rows saved to {out_path}")
    return out_path
