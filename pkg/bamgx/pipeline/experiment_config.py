"""
Experiment Configuration for bamgx Pipeline

Experiments are described by nested JSON objects. A resolved configuration
is built by layering, in order: the module defaults, a named preset, a
user-supplied JSON file, the environment (BAMGX_SEEDS, BAMGX_OUTPUT_DIR) and
command-line overrides. The result is validated against CONFIG_SCHEMA and
turned into an ExperimentConfig whose echo lists every parameter a run
consumes.
"""

from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional

import copy
import json
import logging
import math
import os

import jsonschema

from bamgx.pipeline.bootstrap_setup import SetupSpec
from bamgx.pipeline.cr_coarsening import CoarseningConfig
from bamgx.pipeline.errors import ConfigError
from bamgx.pipeline.ls_interp import InterpConfig
from bamgx.pipeline.mg_hierarchy import CycleSpec, StopCriteria
from bamgx.pipeline.smoothing import SmootherSpec

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
PRESETS_ALL = ('table1', 'table2', 'table3', 'table4', 'table5', 'table6', 'fig1', 'custom')
DEFAULT_SEEDS = [0, 1, 2, 3, 4]
ENV_SEEDS = 'BAMGX_SEEDS'
ENV_OUTPUT_DIR = 'BAMGX_OUTPUT_DIR'

DEFAULT_CONFIG: Dict[str, Any] = {
    'schema_version': SCHEMA_VERSION,
    'preset': 'custom',
    'problems': [{'kind': 'poisson', 'params': {}}],
    'grids': [64],
    'methods': ['ls', 'lsr'],
    'variants': [{}],
    'setup': {
        'cycle_shape': 'V', 'repeats': 1, 'eta': 4, 'k_r': 8, 'k_e': 0,
        'include_constant': False, 'adaptive_step': False, 'adaptive_cycles': 5,
        'adaptive_cycle': {'pre_sweeps': 2, 'post_sweeps': 2, 'cycle_index': 1},
        'mg_solve_tvs': False, 'refine_sweeps': 2, 'tau_threshold': 0.1,
        'test_iters': 20, 'max_levels': 2, 'coarsest_nx': 15,
        'caliber': 4, 'weight_mode': 'a_norm', 'lsr_fraction': 0.2,
        'smoother': {'kind': 'gauss_seidel_lex', 'sweeps': 1, 'weight': 2.0 / 3.0},
        'coarsening': {'method': 'geometric', 'cr_sweeps': 5, 'delta': 0.7, 'score_threshold': 0.5,
                       'max_stages': 10, 'strength_threshold': 0.25, 'cr_mode': 'f_relax',
                       'candidate_rule': 'rate'},
    },
    'cycle': {'pre_sweeps': 2, 'post_sweeps': 2, 'cycle_index': 1},
    'seeds': DEFAULT_SEEDS,
    'max_iters': 100,
    'norm': 'l2',
    'output_dir': 'Results',
    'fig1': {'tv_count': 8, 'tv_sweeps': 10, 'score_grids': True},
}

_K_ETA_GRID = [{'k_r': k, 'eta': eta} for eta in (2, 4, 6, 8) for k in (6, 7, 8, 10, 12)]
_JUMP_PROBLEMS = [{'kind': 'jump', 'params': {'tiling': tau, 'exponent': nu}}
                  for nu in (-2, -8) for tau in (1, 4, 8, 16)]

PRESETS: Dict[str, Dict[str, Any]] = {
    'table1': {'grids': [64], 'variants': _K_ETA_GRID},
    'table2': {'grids': [32, 64, 128, 256]},
    'table3': {'grids': [32, 64, 128, 256], 'setup': {'k_r': 7, 'include_constant': True}},
    'table4': {'grids': [32, 64, 128, 256],
               'setup': {'repeats': 2, 'k_e': 8, 'max_levels': None}},
    'table5': {'grids': [32, 64, 128, 256],
               'setup': {'cycle_shape': 'W', 'repeats': 2, 'k_e': 8, 'max_levels': None}},
    'table6': {'problems': _JUMP_PROBLEMS, 'grids': [32, 64, 128, 256], 'methods': ['lsr'],
               'variants': [{'adaptive_step': False}, {'adaptive_step': True}],
               'setup': {'cycle_shape': 'W', 'repeats': 2, 'k_e': 8, 'max_levels': None},
               'cycle': {'pre_sweeps': 1, 'post_sweeps': 1}},
    'fig1': {'problems': [{'kind': 'four_region', 'params': {}}], 'grids': [64], 'methods': ['ls'],
             'setup': {'coarsening': {'method': 'cr'}}},
    'custom': {},
}

_CYCLE_SCHEMA = {
    'type': 'object',
    'properties': {
        'pre_sweeps': {'type': 'integer', 'minimum': 0},
        'post_sweeps': {'type': 'integer', 'minimum': 0},
        'cycle_index': {'enum': [1, 2]},
    },
    'additionalProperties': False,
}

CONFIG_SCHEMA = {
    '$schema': 'http://json-schema.org/draft-07/schema#',
    'title': 'bamgx experiment configuration',
    'type': 'object',
    'required': ['schema_version', 'preset', 'problems', 'grids', 'methods', 'setup', 'cycle', 'seeds'],
    'properties': {
        'schema_version': {'const': SCHEMA_VERSION},
        'preset': {'enum': list(PRESETS_ALL)},
        'problems': {
            'type': 'array',
            'items': {
                'type': 'object',
                'required': ['kind'],
                'properties': {
                    'kind': {'enum': ['poisson', 'four_region', 'jump']},
                    'params': {
                        'type': 'object',
                        'properties': {'tiling': {'type': 'integer', 'minimum': 1},
                                       'exponent': {'type': 'integer'}},
                    },
                },
                'if': {'properties': {'kind': {'const': 'jump'}}},
                'then': {'properties': {'params': {'required': ['tiling', 'exponent']}},
                         'required': ['params']},
            },
        },
        'grids': {'type': 'array', 'items': {'type': 'integer', 'minimum': 2}},
        'methods': {'type': 'array', 'minItems': 1, 'items': {'enum': ['ls', 'lsr']}},
        'variants': {'type': 'array', 'items': {'type': 'object'}},
        'setup': {
            'type': 'object',
            'properties': {
                'cycle_shape': {'enum': ['V', 'W']},
                'repeats': {'type': 'integer', 'minimum': 1},
                'eta': {'type': 'integer', 'minimum': 0},
                'k_r': {'type': 'integer', 'minimum': 1},
                'k_e': {'type': 'integer', 'minimum': 0},
                'include_constant': {'type': 'boolean'},
                'adaptive_step': {'type': 'boolean'},
                'adaptive_cycles': {'type': 'integer', 'minimum': 0},
                'adaptive_cycle': _CYCLE_SCHEMA,
                'mg_solve_tvs': {'type': 'boolean'},
                'refine_sweeps': {'type': 'integer', 'minimum': 0},
                'tau_threshold': {'type': 'number', 'exclusiveMinimum': 0},
                'test_iters': {'type': 'integer', 'minimum': 0},
                'max_levels': {'type': ['integer', 'null'], 'minimum': 1},
                'coarsest_nx': {'type': 'integer', 'minimum': 1},
                'caliber': {'type': 'integer', 'minimum': 1},
                'weight_mode': {'enum': ['a_norm', 'azm', 'uniform']},
                'lsr_fraction': {'type': 'number', 'exclusiveMinimum': 0, 'maximum': 1},
                'smoother': {
                    'type': 'object',
                    'properties': {
                        'kind': {'enum': ['gauss_seidel_lex', 'weighted_jacobi', 'kaczmarz']},
                        'sweeps': {'type': 'integer', 'minimum': 1},
                        'weight': {'type': 'number', 'exclusiveMinimum': 0, 'maximum': 1},
                    },
                    'additionalProperties': False,
                },
                'coarsening': {
                    'type': 'object',
                    'properties': {
                        'method': {'enum': ['geometric', 'cr']},
                        'cr_sweeps': {'type': 'integer', 'minimum': 2},
                        'delta': {'type': 'number', 'exclusiveMinimum': 0, 'exclusiveMaximum': 1},
                        'score_threshold': {'type': 'number', 'minimum': 0, 'maximum': 1},
                        'max_stages': {'type': 'integer', 'minimum': 1},
                        'strength_threshold': {'type': 'number', 'minimum': 0, 'maximum': 1},
                        'cr_mode': {'enum': ['f_relax', 'hcr']},
                        'candidate_rule': {'enum': ['rate', 'fixed']},
                    },
                    'additionalProperties': False,
                },
            },
            'additionalProperties': False,
        },
        'cycle': _CYCLE_SCHEMA,
        'seeds': {'type': 'array', 'minItems': 1, 'items': {'type': 'integer', 'minimum': 0}},
        'max_iters': {'type': 'integer', 'minimum': 1},
        'norm': {'enum': ['l2', 'a']},
        'output_dir': {'type': 'string', 'minLength': 1},
        'fig1': {
            'type': 'object',
            'properties': {
                'tv_count': {'type': 'integer', 'minimum': 1},
                'tv_sweeps': {'type': 'integer', 'minimum': 0},
                'score_grids': {'type': 'boolean'},
            },
            'additionalProperties': False,
        },
    },
    'additionalProperties': False,
}


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge override into a copy of base; lists and scalars are replaced."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _env_overrides() -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    seeds = os.environ.get(ENV_SEEDS)
    if seeds:
        try:
            overrides['seeds'] = [int(s) for s in seeds.split(',') if s.strip()]
        except ValueError as exc:
            raise ConfigError(f"{ENV_SEEDS} must be a comma-separated list of integers: {seeds!r}") from exc
    out_dir = os.environ.get(ENV_OUTPUT_DIR)
    if out_dir:
        overrides['output_dir'] = out_dir
    return overrides


def h_label(n_inv: int) -> str:
    return f"1/{n_inv}"


@dataclass
class ExperimentConfig:
    """
    Fully resolved experiment.

    Attributes:
        preset: Preset tag the configuration started from.
        problems: Problem descriptions ({'kind', 'params'}).
        grids: Inverse mesh sizes 1/h; a grid uses 1/h - 1 interior points per side.
        methods: Interpolation modes to compare ('ls', 'lsr').
        variants: Per-cell overrides of the setup section.
        setup: Bootstrap setup parameters.
        cycle: Solve cycle used for the rate estimate.
        seeds: One setup and one rate estimate per seed.
        max_iters: Cycle budget of the rate estimate.
        norm: Error norm for the rate ('l2' or 'a').
        output_dir: Where results are written.
        fig1: Settings of the coarsening analysis (strength test vectors, score grids).
    """
    preset: str
    problems: List[Dict[str, Any]]
    grids: List[int]
    methods: List[str]
    variants: List[Dict[str, Any]]
    setup: Dict[str, Any]
    cycle: Dict[str, Any]
    seeds: List[int]
    max_iters: int
    norm: str
    output_dir: str
    fig1: Dict[str, Any] = field(default_factory=dict)
    schema_version: str = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        validate_config(data)
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def setup_params(self, variant: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        return _deep_merge(self.setup, variant or {})

    def setup_spec(self, method: str, variant: Optional[Dict[str, Any]] = None, seed: int = 0) -> SetupSpec:
        """SetupSpec for one cell; every value comes from the resolved config."""
        p = self.setup_params(variant)
        try:
            return SetupSpec(
                cycle_shape=p['cycle_shape'], repeats=p['repeats'], eta=p['eta'], k_r=p['k_r'],
                k_e=p['k_e'], include_constant=p['include_constant'],
                smoother=SmootherSpec(**p['smoother']), rng_seed=seed,
                adaptive_step=p['adaptive_step'], adaptive_cycles=p['adaptive_cycles'],
                adaptive_cycle=CycleSpec(smoother=SmootherSpec(**p['smoother']), **p['adaptive_cycle']),
                mg_solve_tvs=p['mg_solve_tvs'],
                interp=InterpConfig(mode=method, caliber=p['caliber'], weight_mode=p['weight_mode'],
                                    lsr_fraction=p['lsr_fraction']),
                coarsening=CoarseningConfig(**p['coarsening']),
                stop=StopCriteria(max_levels=p['max_levels'], coarsest_nx=p['coarsest_nx'],
                                  coarsest_size=p['coarsest_nx'] ** 2),
                refine_sweeps=p['refine_sweeps'], tau_threshold=p['tau_threshold'],
                test_cycle=self.cycle_spec(), test_iters=p['test_iters'])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid setup parameters {variant or {}}: {exc}") from exc

    def cycle_spec(self) -> CycleSpec:
        return CycleSpec(smoother=SmootherSpec(**self.setup['smoother']), **self.cycle)

    def setup_label(self, variant: Optional[Dict[str, Any]] = None) -> str:
        p = self.setup_params(variant)
        if p['max_levels'] == 2 and p['repeats'] == 1 and p['k_e'] == 0:
            return 'two-grid'
        return f"{p['cycle_shape']}^{p['repeats']}" if p['repeats'] > 1 else p['cycle_shape']


def validate_config(data: Dict[str, Any]) -> None:
    """
    Raises:
        ConfigError: With the offending JSON path if the schema rejects data.
    """
    try:
        jsonschema.validate(instance=data, schema=CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = '/'.join(str(p) for p in exc.absolute_path) or '<root>'
        raise ConfigError(f"config invalid at {path}: {exc.message}") from exc
    for variant in data.get('variants', []):
        try:
            jsonschema.validate(instance=_deep_merge(data['setup'], variant),
                                schema=CONFIG_SCHEMA['properties']['setup'])
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"variant {variant} invalid: {exc.message}") from exc


def load_config(preset: Optional[str] = None, path: Optional[str] = None,
                overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Resolve a configuration: defaults < preset < JSON file < environment < overrides.

    Args:
        preset: One of PRESETS_ALL (defaults to the file's preset or 'custom').
        path: Optional JSON configuration file.
        overrides: Command-line overrides (e.g. {'grids': [...]}).

    Raises:
        ConfigError: On unreadable files, unknown presets or schema violations.
    """
    file_cfg: Dict[str, Any] = {}
    if path:
        try:
            with open(path, 'r') as f:
                file_cfg = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    name = preset or file_cfg.get('preset', 'custom')
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}', expected one of {PRESETS_ALL}")

    data = _deep_merge(DEFAULT_CONFIG, PRESETS[name])
    data = _deep_merge(data, file_cfg)
    data = _deep_merge(data, _env_overrides())
    data = _deep_merge(data, {k: v for k, v in (overrides or {}).items() if v is not None})
    data['preset'] = name
    logger.debug(f"resolved config for preset '{name}': {json.dumps(data, sort_keys=True)}")
    return ExperimentConfig.from_dict(data)


@dataclass
class ResultRow:
    """
    One table cell: a (problem, h, setup variant, method) combination
    aggregated over seeds. status is 'ok', 'diverged', 'failed' (numerical error in
    some seed) or '*' (unresolvable grid).
    """
    problem: str
    h: str
    n_per_side: int
    method: str
    setup: str
    variant: str
    rho_median: float = math.nan
    rho_min: float = math.nan
    rho_max: float = math.nan
    iterations: float = math.nan
    operator_complexity: float = math.nan
    n_seeds: int = 0
    status: str = 'ok'
    wall_time: float = 0.0


RESULT_COLUMNS = list(ResultRow.__dataclass_fields__)
REPRODUCIBLE_COLUMNS = [c for c in RESULT_COLUMNS if c != 'wall_time']
