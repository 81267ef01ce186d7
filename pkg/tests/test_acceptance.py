"""Reproduction runs of the benchmark tables; run with `pytest -m slow`."""

import numpy as np
import pandas as pd
import pytest

from bamgx.pipeline.experiment_config import ENV_OUTPUT_DIR, ENV_SEEDS, load_config
from bamgx.pipeline.main import run_coarsening_analysis, run_experiment
from bamgx.pipeline.mg_hierarchy import estimate_asymptotic_rate
from bamgx.pipeline.bootstrap_setup import bootstrap_setup
from bamgx.pipeline.problem_gen import fd_poisson, four_region
from bamgx.utils.dense_error_operator import cycle_error_operator, power_spectral_radius

pytestmark = pytest.mark.slow


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    monkeypatch.delenv(ENV_SEEDS, raising=False)
    monkeypatch.delenv(ENV_OUTPUT_DIR, raising=False)


def _run(preset, tmp_path, **overrides):
    config = load_config(preset, overrides={'output_dir': str(tmp_path), **overrides})
    rows = run_experiment(config, show_progress=False)
    return pd.DataFrame([vars(r) for r in rows])


def _rho(df, **match):
    sel = df
    for key, value in match.items():
        sel = sel[sel[key] == value]
    assert len(sel) == 1, match
    return float(sel['rho_median'].iloc[0])


def test_table3_two_grid_rates(tmp_path):
    df = _run('table3', tmp_path)
    for h in ('1/32', '1/64', '1/128', '1/256'):
        assert _rho(df, h=h, method='ls') <= 0.20
        assert _rho(df, h=h, method='lsr') <= 0.10


def test_table2_fixed_relaxation_degrades(tmp_path):
    df = _run('table2', tmp_path, grids=[32, 128], methods=['ls'])
    assert _rho(df, h='1/128') - _rho(df, h='1/32') >= 0.3


def test_table1_more_relaxation_helps(tmp_path):
    variants = [{'k_r': k, 'eta': eta} for k in (6, 8, 12) for eta in (2, 4, 8)]
    df = _run('table1', tmp_path, variants=variants, methods=['ls'])
    for k in (6, 8, 12):
        rates = [_rho(df, variant=f'eta={eta},k_r={k}') for eta in (2, 4, 8)]
        assert rates[0] - rates[1] >= 0.1 and rates[1] - rates[2] >= 0.1, (k, rates)


def test_table4_v2_setup(tmp_path):
    df = _run('table4', tmp_path, methods=['lsr'])
    assert (df['rho_median'] <= 0.10).all()


def test_table5_w_setup(tmp_path):
    df = _run('table5', tmp_path, methods=['lsr'])
    assert (df['rho_median'] <= 0.10).all()


def test_table6_adaptive_jump_problems(tmp_path):
    df = _run('table6', tmp_path, grids=[32, 64, 128, 256])
    unresolved = df[df['status'] == '*']
    assert set(unresolved['h']) == {'1/32'}
    assert all('tiling=16' in p for p in unresolved['problem'])
    resolved = df[df['status'] != '*']
    adaptive = resolved[resolved['variant'] == 'adaptive_step=True']
    assert len(adaptive) == 8 * 4 - 2
    assert (adaptive['rho_median'] <= 0.35).all()


def test_dense_oracle_matches_measured_rate():
    A, meta = fd_poisson(15)
    config = load_config('table3', overrides={'setup': {'coarsest_nx': 7}})
    hier, _, _ = bootstrap_setup(A, meta, config.setup_spec('ls', seed=0))
    assert len(hier) == 2
    cyc = config.cycle_spec()
    oracle = power_spectral_radius(cycle_error_operator(hier, cyc), steps=1000)
    est = estimate_asymptotic_rate(hier, cyc, seeds=config.seeds)
    assert abs(est.rho - oracle) <= 0.02


def test_four_region_coarsening_pattern(tmp_path):
    A, meta = four_region(63)
    config = load_config('fig1', overrides={'output_dir': str(tmp_path)})
    summary = run_coarsening_analysis(A, meta, config, str(tmp_path), seed=config.seeds[0])
    assert 2 <= summary['n_stages'] <= 4
    assert summary['final_rho_cr'] <= 0.65
    stats = pd.read_csv(tmp_path / 'fig1_regions.csv').set_index('region')
    assert stats.loc['bottom_left', 'coarse_fraction'] <= 0.05
    assert 0.15 <= stats.loc['bottom_right', 'coarse_fraction'] <= 0.35
    for region, orientation in (('top_left', 'x_semicoarsening'), ('top_right', 'y_semicoarsening')):
        assert 0.35 <= stats.loc[region, 'coarse_fraction'] <= 0.65
        assert stats.loc[region, 'orientation'] == orientation
    assert np.isfinite(summary['stages'][-1]['rho_cr'])
