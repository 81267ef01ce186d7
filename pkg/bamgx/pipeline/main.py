"""
bamgx Pipeline Main Entry Point

This script orchestrates the bootstrap AMG experiments, from problem
generation and coarse-grid selection through the bootstrap setup to the
asymptotic rate estimates that fill the benchmark tables. It serves as the
high-level control script, calling functions from the specialized pipeline
modules, and exposes them as command-line verbs:

    generate  problem -> Matrix Market file
    coarsen   compatible-relaxation coarsening analysis -> JSON/CSV
    setup     bootstrap setup -> hierarchy summary
    solve     setup plus rate estimation (optionally checked against the
              dense error-propagation operator)
    table     run a preset (table1..table6, custom) -> results.csv/json
    fig1      coarsening analysis of the preset's problems
"""

import argparse
import logging
import math
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from bamgx.downstream_analysis.coarsening_regions import write_region_statistics
from bamgx.downstream_analysis.rate_tables import write_rate_table
from bamgx.pipeline import bootstrap_setup as bs
from bamgx.pipeline import cr_coarsening as crc
from bamgx.pipeline import ls_interp as lsi
from bamgx.pipeline import mg_hierarchy as mgh
from bamgx.pipeline.cr_coarsening import Partition, cr_coarsen, strength_graph
from bamgx.pipeline.errors import (ConfigError, MatrixMarketParseError, NumericalError, ResolutionError,
                                   SpecificationError)
from bamgx.pipeline.experiment_config import (ExperimentConfig, PRESETS_ALL, ResultRow, h_label, load_config)
from bamgx.pipeline.io_utils import (append_partial_row, export_coarse_set, export_fitness, export_matrix,
                                     export_score_grid, import_matrix, load_partial_rows, write_json,
                                     write_results)
from bamgx.pipeline.problem_gen import GridMeta, make_problem
from bamgx.pipeline.smoothing import SmootherSpec
from bamgx.utils.dense_error_operator import cycle_error_operator, power_spectral_radius

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_UNRESOLVABLE = 4
ORACLE_MAX = 4096  # largest problem the dense oracle is assembled for


def _banner(text: str) -> None:
    print(f"--- {text} at {datetime.now(tz=timezone.utc)} ---")


def problem_id(problem: Dict[str, Any]) -> str:
    params = problem.get('params') or {}
    if not params:
        return problem['kind']
    inner = ','.join(f"{k}={params[k]}" for k in sorted(params))
    return f"{problem['kind']}({inner})"


def variant_label(variant: Dict[str, Any]) -> str:
    if not variant:
        return 'default'
    return ','.join(f"{k}={variant[k]}" for k in sorted(variant))


def constants_echo() -> Dict[str, Any]:
    """Module constants a run consumes without them being config keys."""
    return {
        'cr_seed': crc.CR_SEED,
        'weight_cap': lsi.WEIGHT_CAP,
        'tikhonov_gamma': lsi.TIKHONOV_GAMMA,
        'gram_rcond': lsi.GRAM_RCOND,
        'fit_factor': lsi.FIT_FACTOR,
        'dense_coarse_max': mgh.DENSE_COARSE_MAX,
        'rate_tol': mgh.RATE_TOL,
        'rate_window': mgh.RATE_WINDOW,
        'divergence_run': mgh.DIVERGENCE_RUN,
        'dense_eigen_max': bs.DENSE_EIGEN_MAX,
        'mm_grid_convention': 'n_per_side = 1/h - 1',
    }


def _cell_key(problem: str, h: str, method: str, variant: str, seed: int) -> Tuple:
    return problem, h, method, variant, int(seed)


def _cells(config: ExperimentConfig):
    for problem in config.problems:
        for n_inv in config.grids:
            for variant in config.variants:
                for method in config.methods:
                    for seed in config.seeds:
                        yield problem, n_inv, variant, method, seed


def run_cell(config: ExperimentConfig, problem: Dict[str, Any], n_inv: int, variant: Dict[str, Any],
             method: str, seed: int) -> Dict[str, Any]:
    """
    One (problem, h, variant, method, seed) cell: bootstrap setup then rate
    estimate of the solve cycle from the same seed.

    Returns:
        Per-seed row; status '*' when the grid does not resolve the problem.
    """
    row = {'problem': problem_id(problem), 'h': h_label(n_inv), 'n_per_side': n_inv - 1,
           'method': method, 'setup': config.setup_label(variant), 'variant': variant_label(variant),
           'seed': int(seed), 'rho': math.nan, 'iterations': math.nan, 'operator_complexity': math.nan,
           'n_levels': 0, 'status': 'ok', 'wall_time': 0.0}
    start = time.perf_counter()
    try:
        A, meta = make_problem(problem['kind'], n_inv - 1, problem.get('params'))
    except ResolutionError as e:
        logger.info(f"{row['problem']} at h={row['h']}: {e}")
        row['status'] = '*'
        return row
    spec = config.setup_spec(method, variant, seed)
    hier, _, report = bs.bootstrap_setup(A, meta, spec)
    est = mgh.estimate_asymptotic_rate(hier, config.cycle_spec(), seeds=[seed], max_iters=config.max_iters,
                                       norm=config.norm)
    row.update(rho=est.rho, iterations=est.iterations[0], operator_complexity=hier.operator_complexity(),
               n_levels=len(hier), status='diverged' if est.diverged else 'ok',
               wall_time=time.perf_counter() - start)
    return row


def _aggregate(seed_rows: List[Dict[str, Any]], template: Dict[str, Any]) -> ResultRow:
    statuses = [r['status'] for r in seed_rows]
    out = ResultRow(problem=template['problem'], h=template['h'], n_per_side=template['n_per_side'],
                    method=template['method'], setup=template['setup'], variant=template['variant'],
                    n_seeds=len(seed_rows), wall_time=float(sum(r['wall_time'] for r in seed_rows)))
    if '*' in statuses:
        out.status = '*'
        return out
    good = [r for r in seed_rows if r['status'] != 'failed']
    if good:
        rhos = np.array([r['rho'] for r in good], dtype=float)
        out.rho_median, out.rho_min, out.rho_max = float(np.median(rhos)), float(rhos.min()), float(rhos.max())
        out.iterations = float(np.median([r['iterations'] for r in good]))
        out.operator_complexity = float(np.median([r['operator_complexity'] for r in good]))
    if 'failed' in statuses or not seed_rows:
        out.status = 'failed'
    elif 'diverged' in statuses:
        out.status = 'diverged'
    return out


def run_experiment(config: ExperimentConfig, workers: int = 1, fresh_start: bool = False,
                   show_progress: bool = True) -> List[ResultRow]:
    """
    Run every cell of a resolved configuration and write the results.

    Per-seed rows are appended to partial_results.csv as cells finish; a
    rerun without fresh_start skips cells already in that file. When all
    cells are done, rows are aggregated over seeds (median, min, max) into
    results.csv and results.json, and the resolved configuration is echoed to
    config_echo.json.

    Args:
        config: Resolved experiment configuration.
        workers: Worker processes (1 runs cells in this process).
        fresh_start: Clear the output directory first.
        show_progress: Display a tqdm bar over cells.

    Returns:
        One ResultRow per (problem, h, variant, method), in config order.
    """
    out_dir = config.output_dir
    if fresh_start and os.path.exists(out_dir):
        shutil.rmtree(out_dir)
        print("Output directory cleared for fresh start.")
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    echo = {**config.to_dict(), 'constants': constants_echo()}
    write_json(Path(out_dir) / 'config_echo.json', echo)

    done: Dict[Tuple, Dict[str, Any]] = {}
    partial = load_partial_rows(out_dir)
    for rec in partial.to_dict('records'):
        done[_cell_key(rec['problem'], rec['h'], rec['method'], rec['variant'], rec['seed'])] = rec

    todo = []
    for problem, n_inv, variant, method, seed in _cells(config):
        key = _cell_key(problem_id(problem), h_label(n_inv), method, variant_label(variant), seed)
        if key not in done:
            todo.append((key, problem, n_inv, variant, method, seed))
    logger.info(f"{len(todo)} cells to run, {len(done)} resumed from partial results")

    failed: Dict[Tuple, Dict[str, Any]] = {}

    def _collect(key, fn):
        try:
            row = fn()
        except NumericalError as e:
            logger.error(f"Cell {key} failed with numerical error: {e}")
            failed[key] = {'status': 'failed', 'wall_time': 0.0}
            return
        done[key] = row
        append_partial_row(out_dir, row)

    if workers <= 1:
        for key, *args in tqdm(todo, desc='Running cells', disable=not show_progress):
            _collect(key, lambda: run_cell(config, *args))
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = {executor.submit(run_cell, config, *args): key for key, *args in todo}
            for future in tqdm(as_completed(futures), total=len(futures), desc='Running cells',
                               disable=not show_progress):
                _collect(futures[future], future.result)

    rows: List[ResultRow] = []
    for problem in config.problems:
        for n_inv in config.grids:
            for variant in config.variants:
                for method in config.methods:
                    template = {'problem': problem_id(problem), 'h': h_label(n_inv), 'n_per_side': n_inv - 1,
                                'method': method, 'setup': config.setup_label(variant),
                                'variant': variant_label(variant)}
                    seed_rows = []
                    for seed in config.seeds:
                        key = _cell_key(template['problem'], template['h'], method, template['variant'], seed)
                        if key in done:
                            seed_rows.append(done[key])
                        elif key in failed:
                            seed_rows.append(failed[key])
                    rows.append(_aggregate(seed_rows, template))

    if not failed:
        paths = write_results(out_dir, [vars(r) for r in rows], echo)
        write_rate_table(paths['csv'])
    else:
        logger.warning(f"{len(failed)} cells failed; partial results kept in {out_dir} for a rerun")
    return rows


def _exit_code(rows: List[ResultRow]) -> int:
    if any(r.status == 'failed' for r in rows):
        return EXIT_NUMERICAL
    if rows and all(r.status == '*' for r in rows):
        return EXIT_UNRESOLVABLE
    return EXIT_OK


def run_coarsening_analysis(A, meta: Optional[GridMeta], config: ExperimentConfig, out_dir: str,
                            seed: int = 0, prefix: str = 'fig1') -> Dict[str, Any]:
    """
    CR coarsening of one operator from an empty coarse set.

    The strength graph comes from fig1.tv_count random vectors relaxed
    fig1.tv_sweeps times. Writes <prefix>_coarsen_report.json, the final
    coarse points, per-stage candidate-score grids (if enabled and the
    problem lives on a grid) and region statistics (if the grid has regions).
    """
    p = config.setup_params()
    smoother = SmootherSpec(**p['smoother'])
    cfg = p['coarsening']
    fig1 = config.fig1
    n = A.shape[0]
    out = Path(out_dir)

    V = bs.relax_tvs(A, bs.init_test_vectors(n, fig1['tv_count'], seed), smoother, fig1['tv_sweeps'])
    graph = strength_graph(V, A, cfg['strength_threshold'])
    part, reports = cr_coarsen(A, Partition.empty(n), smoother, nu=cfg['cr_sweeps'], delta=cfg['delta'],
                               graph=graph, max_stages=cfg['max_stages'],
                               score_threshold=cfg['score_threshold'], mode=cfg['cr_mode'],
                               candidate_rule=cfg['candidate_rule'])
    summary = {'n': n, 'n_c': part.n_c, 'coarse_fraction': part.n_c / n if n else 0.0,
               'n_stages': len(reports) - 1, 'final_rho_cr': reports[-1].rho_cr,
               'stages': [r.to_dict() for r in reports]}
    export_coarse_set(out / f'{prefix}_coarse_points.csv', part.c_flags, meta)
    if meta is not None and fig1['score_grids']:
        for r in reports:
            if r.scores is not None:
                export_score_grid(out / f'{prefix}_scores_stage{r.stage}.csv', r.scores, meta)
    if meta is not None and meta.region_index is not None:
        write_region_statistics(out, part.c_flags, meta, filename=f'{prefix}_regions.csv')
    write_json(out / f'{prefix}_coarsen_report.json', summary)
    logger.info(f"CR coarsening: {len(reports) - 1} stages, |C|={part.n_c}/{n}, "
                f"rho_cr={reports[-1].rho_cr:.3f}")
    return summary


def _load_problem(args, config: ExperimentConfig):
    """Operator and grid meta from --matrix or from --problem/--grid (defaults: first of the config)."""
    if getattr(args, 'matrix', None):
        return import_matrix(args.matrix), None, Path(args.matrix).stem
    problem = dict(config.problems[0])
    if args.problem:
        problem = {'kind': args.problem, 'params': {}}
    if args.tiling is not None or args.exponent is not None:
        problem['params'] = {**(problem.get('params') or {}),
                             **{k: v for k, v in (('tiling', args.tiling), ('exponent', args.exponent))
                                if v is not None}}
    n_inv = args.grid or config.grids[0]
    A, meta = make_problem(problem['kind'], n_inv - 1, problem.get('params'))
    return A, meta, f"{problem_id(problem)}_h{n_inv}"


def _config_from_args(args, preset: Optional[str] = None) -> ExperimentConfig:
    overrides = {'grids': getattr(args, 'grids', None), 'output_dir': args.output_dir}
    return load_config(preset or getattr(args, 'preset', None), getattr(args, 'config', None), overrides)


def cmd_generate(args) -> int:
    config = _config_from_args(args)
    A, meta, name = _load_problem(args, config)
    path = Path(args.out) if args.out else Path(config.output_dir) / f'{name}.mtx'
    export_matrix(path, A, comment=f'bamgx {name}')
    if meta is not None:
        write_json(path.with_suffix('.meta.json'), {'nx': meta.nx, 'ny': meta.ny, 'h': meta.h,
                                                    'region_names': list(meta.region_names)})
    print(f"Matrix with n={A.shape[0]}, nnz={A.nnz} written to {path}")
    return EXIT_OK


def cmd_coarsen(args) -> int:
    config = _config_from_args(args)
    A, meta, name = _load_problem(args, config)
    run_coarsening_analysis(A, meta, config, config.output_dir, seed=config.seeds[0], prefix=name)
    return EXIT_OK


def _run_setup(args, config: ExperimentConfig):
    A, meta, name = _load_problem(args, config)
    spec = config.setup_spec(args.method, seed=config.seeds[0])
    hier, V, report = bs.bootstrap_setup(A, meta, spec, show_progress=True)
    out = Path(config.output_dir)
    write_json(out / f'{name}_{args.method}_setup.json', {'setup': spec.label, **report.to_dict()})
    P_op = hier[0].P_down
    if P_op is not None:
        export_fitness(out / f'{name}_{args.method}_fitness.csv', P_op.fitness, P_op.bad_fit)
    return A, hier, name


def cmd_setup(args) -> int:
    config = _config_from_args(args)
    _, hier, _ = _run_setup(args, config)
    summary = hier.summary()
    print(f"Hierarchy: levels={summary['n_levels']}, sizes={summary['sizes']}, "
          f"operator complexity={summary['operator_complexity']:.3f}")
    return EXIT_OK


def cmd_solve(args) -> int:
    config = _config_from_args(args)
    A, hier, name = _run_setup(args, config)
    cyc = config.cycle_spec()
    est = mgh.estimate_asymptotic_rate(hier, cyc, seeds=config.seeds, max_iters=config.max_iters,
                                       norm=config.norm)
    result = {'cycle': cyc.label, **est.to_dict(), **hier.summary()}
    if args.oracle:
        if A.shape[0] > ORACLE_MAX:
            raise SpecificationError(f"--oracle limited to n <= {ORACLE_MAX}, got n={A.shape[0]}")
        result['oracle_rho'] = power_spectral_radius(cycle_error_operator(hier, cyc))
        result['oracle_gap'] = abs(result['oracle_rho'] - est.rho)
    write_json(Path(config.output_dir) / f'{name}_{args.method}_solve.json', result)
    msg = f"{cyc.label} rate: median {est.rho:.3f} (min {est.rho_min:.3f}, max {est.rho_max:.3f})"
    if args.oracle:
        msg += f", dense oracle {result['oracle_rho']:.3f}"
    print(msg)
    return EXIT_NUMERICAL if est.diverged else EXIT_OK


def cmd_table(args) -> int:
    if args.preset == 'fig1':
        return cmd_fig1(args)
    config = _config_from_args(args, preset=args.preset)
    _banner(f"Stage 1: Running preset {config.preset} Started")
    rows = run_experiment(config, workers=args.workers, fresh_start=args.fresh_start)
    _banner("Stage 1 Finished")
    return _exit_code(rows)


def cmd_fig1(args) -> int:
    config = _config_from_args(args, preset='fig1')
    if args.fresh_start and os.path.exists(config.output_dir):
        shutil.rmtree(config.output_dir)
    write_json(Path(config.output_dir) / 'config_echo.json', {**config.to_dict(), 'constants': constants_echo()})
    _banner("Stage 1: Coarsening analysis Started")
    for problem in config.problems:
        for n_inv in config.grids:
            A, meta = make_problem(problem['kind'], n_inv - 1, problem.get('params'))
            prefix = 'fig1' if len(config.problems) * len(config.grids) == 1 else f"fig1_{problem_id(problem)}_h{n_inv}"
            run_coarsening_analysis(A, meta, config, config.output_dir, seed=config.seeds[0], prefix=prefix)
    _banner("Stage 1 Finished")
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="JSON configuration file layered over the preset")
    p.add_argument("--output_dir", type=str, default=None, help="Directory for all outputs (default: Results)")
    p.add_argument("--grids", type=int, nargs='+', default=None,
                   help="Override the list of inverse mesh sizes 1/h (e.g. --grids 32 64)")


def _add_problem(p: argparse.ArgumentParser, with_method: bool = True) -> None:
    p.add_argument("--preset", type=str, default=None, choices=PRESETS_ALL, help="Preset supplying defaults")
    p.add_argument("--problem", type=str, default=None, choices=['poisson', 'four_region', 'jump'])
    p.add_argument("--grid", type=int, default=None, help="Inverse mesh size 1/h")
    p.add_argument("--tiling", type=int, default=None, help="Inclusion tiling for the jump problem")
    p.add_argument("--exponent", type=int, default=None, help="Permeability exponent for the jump problem")
    p.add_argument("--matrix", type=str, default=None, help="Matrix Market operator instead of a generated problem")
    if with_method:
        p.add_argument("--method", type=str, default='lsr', choices=['ls', 'lsr'])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Run bootstrap AMG experiments (bamgx).")
    parser.add_argument("--log_level", type=str, default="INFO",
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], help="Logging level (default: INFO)")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('generate', help="Write a model problem as a Matrix Market file")
    _add_common(p)
    _add_problem(p, with_method=False)
    p.add_argument("--out", type=str, default=None, help="Output .mtx path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser('coarsen', help="Compatible-relaxation coarsening analysis")
    _add_common(p)
    _add_problem(p, with_method=False)
    p.set_defaults(func=cmd_coarsen)

    p = sub.add_parser('setup', help="Bootstrap setup and hierarchy summary")
    _add_common(p)
    _add_problem(p)
    p.set_defaults(func=cmd_setup)

    p = sub.add_parser('solve', help="Bootstrap setup and asymptotic rate estimate")
    _add_common(p)
    _add_problem(p)
    p.add_argument("--oracle", action="store_true",
                   help="Compare with the spectral radius of the dense error-propagation operator")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser('table', help="Run a table preset")
    p.add_argument("preset", type=str, choices=PRESETS_ALL)
    _add_common(p)
    p.add_argument("--workers", type=int, default=1, help="Number of parallel worker processes (default: 1)")
    p.add_argument("--fresh_start", action="store_true", help="Clear previous results and start fresh")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser('fig1', help="Coarsening analysis of the four-region problem")
    _add_common(p)
    p.add_argument("--fresh_start", action="store_true", help="Clear previous results and start fresh")
    p.set_defaults(func=cmd_fig1)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level))
    try:
        return args.func(args)
    except (ConfigError, SpecificationError, MatrixMarketParseError, FileNotFoundError) as e:
        logger.error(str(e))
        return EXIT_CONFIG
    except ResolutionError as e:
        logger.error(str(e))
        return EXIT_UNRESOLVABLE
    except NumericalError as e:
        logger.error(f"numerical failure: {e}")
        return EXIT_NUMERICAL


def cli() -> None:
    sys.exit(main())


if __name__ == "__main__":
    cli()
