"""
I/O Utilities for bamgx Pipeline

Matrix Market import/export for operators, interpolation and coarse sets,
JSON writers for reports and config echoes, and CSV writers for result
tables, fitness values and score grids. It centralizes file operations so
the pipeline stages stay free of format details.
"""

import json
import logging
import os
import re
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
import pandas as pd
import scipy.io
import scipy.sparse as sp

from bamgx.pipeline.errors import MatrixMarketParseError
from bamgx.pipeline.experiment_config import RESULT_COLUMNS
from bamgx.pipeline.problem_gen import GridMeta
from bamgx.pipeline.sparse_core import SparseMatrix, as_csr, is_symmetric

logger = logging.getLogger(__name__)

MM_BANNER = re.compile(r'^%%MatrixMarket\s+matrix\s+coordinate\s+(real|integer)\s+(general|symmetric)\s*$',
                       re.IGNORECASE)
MM_PRECISION = 17  # digits written per value; enough for an exact float64 round trip
PARTIAL_RESULTS = 'partial_results.csv'  # per-seed rows, appended as cells finish


def _validate_matrix_market(path: Path) -> None:
    """
    Line-by-line check of a coordinate Matrix Market file.

    Raises:
        MatrixMarketParseError: At the first malformed line (1-based line number).
    """
    with open(path, 'r') as f:
        lines = f.readlines()
    if not lines:
        raise MatrixMarketParseError("empty file", 1)
    banner = MM_BANNER.match(lines[0].strip())
    if banner is None:
        raise MatrixMarketParseError("expected '%%MatrixMarket matrix coordinate real general|symmetric'", 1)
    symmetric = banner.group(2).lower() == 'symmetric'

    lineno, size = 1, None
    for lineno, raw in enumerate(lines[1:], start=2):
        text = raw.strip()
        if not text or text.startswith('%'):
            continue
        size = text.split()
        break
    if size is None:
        raise MatrixMarketParseError("missing size line", lineno)
    try:
        n_rows, n_cols, nnz = (int(tok) for tok in size)
    except ValueError:
        raise MatrixMarketParseError(f"size line must hold three integers, got '{' '.join(size)}'", lineno)

    seen = 0
    for entry_line, raw in enumerate(lines[lineno:], start=lineno + 1):
        text = raw.strip()
        if not text or text.startswith('%'):
            continue
        tokens = text.split()
        if len(tokens) != 3:
            raise MatrixMarketParseError(f"expected 'row col value', got '{text}'", entry_line)
        try:
            i, j, _ = int(tokens[0]), int(tokens[1]), float(tokens[2])
        except ValueError:
            raise MatrixMarketParseError(f"cannot parse entry '{text}'", entry_line)
        if not (1 <= i <= n_rows and 1 <= j <= n_cols):
            raise MatrixMarketParseError(
                f"index ({i}, {j}) outside 1..{n_rows} x 1..{n_cols} (indices are 1-based)", entry_line)
        if symmetric and j > i:
            raise MatrixMarketParseError(f"symmetric file stores upper-triangle entry ({i}, {j})", entry_line)
        seen += 1
    if seen != nnz:
        raise MatrixMarketParseError(f"size line announces {nnz} entries, found {seen}", len(lines))


def import_matrix(path: str) -> SparseMatrix:
    """
    Read a Matrix Market coordinate file into canonical CSR.

    Symmetric files are expanded to the full pattern.

    Raises:
        MatrixMarketParseError: With the line number of the first bad line.
        FileNotFoundError: If path does not exist.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Matrix file not found: {path}")
    _validate_matrix_market(path)
    A = scipy.io.mmread(str(path))
    return as_csr(sp.csr_matrix(A))


def export_matrix(path: str, A: SparseMatrix, comment: str = '') -> Path:
    """
    Write A in Matrix Market coordinate format; square symmetric matrices are
    stored as 'symmetric' (lower triangle).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    symmetric = A.shape[0] == A.shape[1] and is_symmetric(A, rtol=0.0)
    scipy.io.mmwrite(str(path), sp.coo_matrix(A), comment=comment, field='real',
                     precision=MM_PRECISION, symmetry='symmetric' if symmetric else 'general')
    logger.debug(f"wrote {A.shape} matrix with nnz={A.nnz} to {path}")
    return path


def _json_default(obj: Any):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def write_json(path: str, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_json_default)
    return path


def read_json(path: str) -> Any:
    with open(path, 'r') as f:
        return json.load(f)


def export_coarse_set(path: str, c_flags: np.ndarray, meta: Optional[GridMeta] = None) -> Path:
    """Coarse points as CSV of 0-based indices, with 1-based grid coordinates (i, j) when meta is given."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    coarse = np.flatnonzero(c_flags)
    df = pd.DataFrame({'coarse_index': coarse})
    if meta is not None:
        gi, gj = meta.grid_coords()
        df['i'], df['j'] = gi[coarse], gj[coarse]
    df.to_csv(path, index=False)
    return path


def export_fitness(path: str, fitness: np.ndarray, bad_fit: Optional[np.ndarray] = None) -> Path:
    """Per-row LS fitness (and bad-fit flag) as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame({'row': np.arange(fitness.size), 'fitness': fitness})
    if bad_fit is not None:
        df['bad_fit'] = bad_fit.astype(bool)
    df.to_csv(path, index=False)
    return path


def score_grid(values: np.ndarray, meta: GridMeta) -> pd.DataFrame:
    """Reshape a per-point field to an (ny, nx) frame indexed by 1-based grid coordinates."""
    grid = np.asarray(values).reshape(meta.ny, meta.nx)
    return pd.DataFrame(grid, index=pd.RangeIndex(1, meta.ny + 1, name='j'),
                        columns=pd.RangeIndex(1, meta.nx + 1, name='i'))


def export_score_grid(path: str, values: np.ndarray, meta: GridMeta) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    score_grid(values, meta).to_csv(path, float_format='%.6g')
    return path


# ---------------------------------------------------------------- result tables

def append_partial_row(out_dir: str, row: Dict[str, Any], filename: str = PARTIAL_RESULTS) -> None:
    """Append one finished cell to the partial-results CSV (the parent process is the only writer)."""
    path = Path(out_dir) / filename
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([row]).to_csv(path, mode='a', header=not path.exists(), index=False, na_rep='nan')


def load_partial_rows(out_dir: str, filename: str = PARTIAL_RESULTS) -> pd.DataFrame:
    path = Path(out_dir) / filename
    if not path.exists():
        return pd.DataFrame()
    df = pd.read_csv(path, keep_default_na=False, na_values=['nan', 'NaN'])
    logger.info(f"Resuming: {len(df)} finished cells found in {path}")
    return df


def write_results(out_dir: str, rows: Iterable[Dict[str, Any]], config_echo: Dict[str, Any]) -> Dict[str, Path]:
    """
    Write results.csv and results.json (with schema version and config echo)
    and remove partial files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(list(rows), columns=RESULT_COLUMNS)
    csv_path, json_path = out / 'results.csv', out / 'results.json'
    df.to_csv(csv_path, index=False)
    write_json(json_path, {'schema_version': config_echo.get('schema_version'),
                           'preset': config_echo.get('preset'),
                           'rows': json.loads(df.to_json(orient='records'))})
    if (out / PARTIAL_RESULTS).exists():
        os.remove(out / PARTIAL_RESULTS)
    logger.info(f"Results saved to {csv_path} and {json_path}")
    return {'csv': csv_path, 'json': json_path}


def read_results(path: str) -> List[Dict[str, Any]]:
    """Rows of a results.json file."""
    return read_json(path)['rows']
