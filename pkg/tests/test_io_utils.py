import numpy as np
import pandas as pd
import pytest

from bamgx.pipeline.errors import MatrixMarketParseError
from bamgx.pipeline.experiment_config import RESULT_COLUMNS, ResultRow
from bamgx.pipeline.io_utils import (PARTIAL_RESULTS, append_partial_row, export_coarse_set, export_fitness,
                                     export_matrix, export_score_grid, import_matrix, load_partial_rows,
                                     read_json, read_results, score_grid, write_json, write_results)
from bamgx.pipeline.problem_gen import GridMeta, fd_poisson, four_region
from bamgx.pipeline.sparse_core import as_csr


def _write(path, text):
    path.write_text(text)
    return path


def test_matrix_market_round_trip(tmp_path):
    A, _ = fd_poisson(15)
    path = export_matrix(tmp_path / 'poisson.mtx', A, comment='poisson h=1/16')
    assert path.read_text().splitlines()[0].lower().endswith('symmetric')
    B = import_matrix(path)
    assert B.shape == A.shape
    assert (B != A).nnz == 0


def test_round_trip_keeps_full_precision(tmp_path):
    A, _ = four_region(7)
    B = import_matrix(export_matrix(tmp_path / 'four_region.mtx', A))
    np.testing.assert_array_equal(B.toarray(), A.toarray())


def test_general_matrix_round_trip(tmp_path):
    P = as_csr(np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]]))
    path = export_matrix(tmp_path / 'P.mtx', P)
    assert 'general' in path.read_text().splitlines()[0]
    np.testing.assert_array_equal(import_matrix(path).toarray(), P.toarray())


def test_symmetric_file_expands(tmp_path):
    path = _write(tmp_path / 'sym.mtx', "%%MatrixMarket matrix coordinate real symmetric\n"
                                        "2 2 3\n1 1 2.0\n2 1 -1.0\n2 2 2.0\n")
    np.testing.assert_array_equal(import_matrix(path).toarray(), [[2.0, -1.0], [-1.0, 2.0]])


@pytest.mark.parametrize('text, line', [
    ("%%MatrixMarket matrix array real general\n2 2\n1.0\n", 1),
    ("%%MatrixMarket matrix coordinate real general\n% comment\n2 2\n", 3),
    ("%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1.0\n0 2 1.0\n", 4),
    ("%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1.0\n2 3 1.0\n", 4),
    ("%%MatrixMarket matrix coordinate real general\n2 2 1\n1 1 x\n", 3),
    ("%%MatrixMarket matrix coordinate real symmetric\n2 2 2\n1 1 1.0\n1 2 1.0\n", 4),
    ("%%MatrixMarket matrix coordinate real general\n2 2 3\n1 1 1.0\n2 2 1.0\n", 4),
])
def test_malformed_matrix_market_reports_line(tmp_path, text, line):
    path = _write(tmp_path / 'bad.mtx', text)
    with pytest.raises(MatrixMarketParseError) as exc:
        import_matrix(path)
    assert exc.value.line == line


def test_import_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        import_matrix(tmp_path / 'missing.mtx')


def test_coarse_set_and_fitness_csv(tmp_path):
    meta = GridMeta(nx=3, ny=3, h=0.25)
    c_flags = np.zeros(9, dtype=bool)
    c_flags[4] = True
    df = pd.read_csv(export_coarse_set(tmp_path / 'c.csv', c_flags, meta))
    assert df.to_dict('records') == [{'coarse_index': 4, 'i': 2, 'j': 2}]
    fit = pd.read_csv(export_fitness(tmp_path / 'f.csv', np.array([0.0, 1.5]), np.array([False, True])))
    assert list(fit.columns) == ['row', 'fitness', 'bad_fit']
    assert fit['bad_fit'].tolist() == [False, True]


def test_score_grid_orientation(tmp_path):
    meta = GridMeta(nx=3, ny=2, h=0.25)
    grid = score_grid(np.arange(6.0), meta)
    assert grid.shape == (2, 3)
    assert grid.loc[2, 1] == 3.0  # (i, j) = (1, 2) is linear index 3
    path = export_score_grid(tmp_path / 's.csv', np.arange(6.0), meta)
    assert pd.read_csv(path, index_col=0).shape == (2, 3)


def test_json_handles_numpy(tmp_path):
    path = write_json(tmp_path / 'r.json', {'rho': np.float64(0.25), 'n': np.int64(3), 'v': np.arange(2)})
    assert read_json(path) == {'n': 3, 'rho': 0.25, 'v': [0, 1]}


def test_partial_rows_round_trip(tmp_path):
    append_partial_row(tmp_path, {'problem': 'poisson', 'h': '1/32', 'seed': 0, 'rho': 0.1, 'status': 'ok'})
    append_partial_row(tmp_path, {'problem': 'jump', 'h': '1/32', 'seed': 0, 'rho': float('nan'), 'status': '*'})
    df = load_partial_rows(tmp_path)
    assert len(df) == 2
    assert df['status'].tolist() == ['ok', '*']
    assert df['h'].tolist() == ['1/32', '1/32']
    assert np.isnan(df['rho'].iloc[1])
    assert load_partial_rows(tmp_path / 'nowhere').empty


def test_write_results_replaces_partial_file(tmp_path):
    append_partial_row(tmp_path, {'problem': 'poisson', 'seed': 0})
    row = ResultRow(problem='poisson', h='1/32', n_per_side=31, method='ls', setup='two-grid',
                    variant='default', rho_median=0.12, n_seeds=1)
    paths = write_results(tmp_path, [vars(row)], {'schema_version': '1.0', 'preset': 'table3'})
    assert not (tmp_path / PARTIAL_RESULTS).exists()
    assert list(pd.read_csv(paths['csv']).columns) == RESULT_COLUMNS
    rows = read_results(paths['json'])
    assert rows[0]['rho_median'] == 0.12
    assert read_json(paths['json'])['preset'] == 'table3'
