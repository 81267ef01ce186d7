import json

import pytest

from bamgx.pipeline.errors import ConfigError
from bamgx.pipeline.experiment_config import (DEFAULT_SEEDS, ENV_OUTPUT_DIR, ENV_SEEDS, PRESETS, PRESETS_ALL,
                                              h_label, load_config)


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    monkeypatch.delenv(ENV_SEEDS, raising=False)
    monkeypatch.delenv(ENV_OUTPUT_DIR, raising=False)


@pytest.mark.parametrize('preset', PRESETS_ALL)
def test_every_preset_resolves(preset):
    config = load_config(preset)
    assert config.preset == preset
    assert config.seeds == DEFAULT_SEEDS
    for method in config.methods:
        for variant in config.variants:
            spec = config.setup_spec(method, variant, seed=3)
            assert spec.rng_seed == 3
            assert spec.interp.mode == method


def test_table3_preset():
    config = load_config('table3')
    assert config.grids == [32, 64, 128, 256]
    spec = config.setup_spec('ls')
    assert spec.k_r == 7 and spec.include_constant and spec.eta == 4
    assert spec.stop.max_levels == 2
    assert config.setup_label() == 'two-grid'
    assert config.cycle_spec().label == 'V(2,2)'


def test_table1_variants_cover_k_eta_grid():
    config = load_config('table1')
    pairs = {(v['k_r'], v['eta']) for v in config.variants}
    assert {(6, 2), (6, 4), (6, 8), (8, 4), (12, 8)} <= pairs
    assert config.setup_spec('ls', {'k_r': 12, 'eta': 8}).k_r == 12


def test_table5_and_table6_presets():
    table5 = load_config('table5')
    spec = table5.setup_spec('lsr')
    assert spec.cycle_shape == 'W' and spec.repeats == 2 and spec.k_e == 8
    assert spec.stop.max_levels is None
    assert table5.setup_label() == 'W^2'
    table6 = load_config('table6')
    assert len(table6.problems) == 8
    assert table6.cycle_spec().label == 'V(1,1)'
    assert table6.setup_spec('lsr', {'adaptive_step': True}).adaptive_step


def test_fig1_preset_uses_cr():
    config = load_config('fig1')
    assert config.setup['coarsening']['method'] == 'cr'
    assert config.problems == [{'kind': 'four_region', 'params': {}}]


def test_layering_order(tmp_path, monkeypatch):
    path = tmp_path / 'cfg.json'
    path.write_text(json.dumps({'grids': [16], 'seeds': [9], 'setup': {'eta': 6}}))
    monkeypatch.setenv(ENV_SEEDS, '1,2')
    config = load_config('table3', str(path), overrides={'grids': [32], 'output_dir': None})
    assert config.grids == [32]
    assert config.seeds == [1, 2]
    assert config.setup['eta'] == 6
    assert config.setup['k_r'] == 7
    assert config.output_dir == 'Results'


def test_env_output_dir(monkeypatch):
    monkeypatch.setenv(ENV_OUTPUT_DIR, '/tmp/bamgx-out')
    assert load_config('custom').output_dir == '/tmp/bamgx-out'


def test_bad_env_seeds(monkeypatch):
    monkeypatch.setenv(ENV_SEEDS, '1,two')
    with pytest.raises(ConfigError):
        load_config('custom')


@pytest.mark.parametrize('payload', [
    {'setup': {'eta': -1}},
    {'setup': {'smoother': {'kind': 'sor'}}},
    {'methods': []},
    {'problems': [{'kind': 'jump', 'params': {'tiling': 4}}]},
    {'unexpected': 1},
    {'variants': [{'k_r': 0}]},
])
def test_schema_rejections(tmp_path, payload):
    path = tmp_path / 'cfg.json'
    path.write_text(json.dumps(payload))
    with pytest.raises(ConfigError):
        load_config('custom', str(path))


def test_unknown_preset_and_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config('table9')
    bad = tmp_path / 'cfg.json'
    bad.write_text('{not json')
    with pytest.raises(ConfigError):
        load_config(None, str(bad))


def test_echo_round_trip():
    config = load_config('table4')
    echo = json.loads(json.dumps(config.to_dict()))
    assert echo['setup']['repeats'] == 2
    assert set(echo) >= {'schema_version', 'preset', 'problems', 'grids', 'methods', 'variants', 'setup',
                         'cycle', 'seeds', 'max_iters', 'norm', 'output_dir', 'fig1'}
    assert set(PRESETS) == set(PRESETS_ALL)


def test_h_label():
    assert h_label(64) == '1/64'
