"""
MG Hierarchy Module for bamgx Pipeline

Galerkin multilevel hierarchies built from least-squares interpolation,
V- and W-cycles with R = P^T, composite interpolation P_l and Gram operators
T_l = P_l^T P_l, and asymptotic convergence-rate estimation on the
homogeneous system.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import logging
import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from bamgx.pipeline.cr_coarsening import (CoarseningConfig, CrReport, Partition, cover_interpolation_gaps,
                                          cr_coarsen, full_coarsening, strength_graph)
from bamgx.pipeline.errors import (DimensionMismatchError, SingularCoarseError, SpecificationError,
                                   StagnationError)
from bamgx.pipeline.ls_interp import (InterpConfig, InterpolationOperator, TestVectorSet,
                                      build_interpolation)
from bamgx.pipeline.problem_gen import GridMeta
from bamgx.pipeline.smoothing import SmootherSpec, smooth
from bamgx.pipeline.sparse_core import SparseMatrix, a_norm, as_csr, galerkin, identity

logger = logging.getLogger(__name__)

DENSE_COARSE_MAX = 4096  # coarsest systems up to this size use dense Cholesky, larger ones splu
COARSEST_NX = 15  # stop once the grid has at most this many points per side (h = 1/16)
COARSEST_SIZE = 15 * 15  # algebraic stop below this many unknowns when no grid metadata is available
RATE_TOL = 1e-50  # stop iterating once ||e|| < RATE_TOL * ||e_0||
RATE_WINDOW = 10  # ratios averaged (geometric mean) per seed
DIVERGENCE_RUN = 5  # consecutive ratios above 1 that count as divergence
DEFAULT_MAX_ITERS = 100


@dataclass(frozen=True)
class CycleSpec:
    """
    Solve cycle: nu1 pre- and nu2 post-smoothing sweeps, cycle index 1 (V) or 2 (W).
    """
    pre_sweeps: int = 2
    post_sweeps: int = 2
    cycle_index: int = 1
    smoother: SmootherSpec = field(default_factory=SmootherSpec)

    def __post_init__(self):
        if self.pre_sweeps < 0 or self.post_sweeps < 0 or self.pre_sweeps + self.post_sweeps < 1:
            raise ValueError("need pre_sweeps, post_sweeps >= 0 with at least one sweep in total")
        if self.cycle_index not in (1, 2):
            raise ValueError(f"cycle_index must be 1 (V) or 2 (W), got {self.cycle_index}")

    @property
    def label(self) -> str:
        return f"{'V' if self.cycle_index == 1 else 'W'}({self.pre_sweeps},{self.post_sweeps})"


@dataclass(frozen=True)
class StopCriteria:
    """
    When to stop coarsening.

    Attributes:
        max_levels: Upper bound on the number of levels (2 gives a two-grid method).
        coarsest_nx: Stop when the grid has at most this many points per side.
        coarsest_size: Stop when the level has fewer than this many unknowns
            (used when no grid metadata is available).
    """
    max_levels: Optional[int] = None
    coarsest_nx: int = COARSEST_NX
    coarsest_size: int = COARSEST_SIZE

    def reached(self, n_levels: int, level: 'Level') -> bool:
        if self.max_levels is not None and n_levels >= self.max_levels:
            return True
        if level.meta is not None:
            return level.meta.nx <= self.coarsest_nx
        return level.A.shape[0] < self.coarsest_size


@dataclass
class Level:
    """
    One level of the hierarchy.

    Attributes:
        A: Level operator A_l.
        part: C/F splitting used to build P_down (absent on the coarsest level).
        P_down: Interpolation from the next coarser level.
        meta: Grid metadata (geometric mode only).
        composite_P: P_l, mapping this level to the finest.
        gram_T: T_l = P_l^T P_l.
        cr_reports: CR stages that produced `part` (CR coarsening only).
    """
    A: SparseMatrix
    part: Optional[Partition] = None
    P_down: Optional[InterpolationOperator] = None
    meta: Optional[GridMeta] = None
    composite_P: Optional[SparseMatrix] = None
    gram_T: Optional[SparseMatrix] = None
    cr_reports: List[CrReport] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def P(self) -> SparseMatrix:
        return self.P_down.P


class CoarseSolver:
    """Direct solver of the coarsest system: dense Cholesky or sparse LU."""

    def __init__(self, A: SparseMatrix):
        self.n = A.shape[0]
        self._cho, self._lu = None, None
        if self.n == 0:
            return
        try:
            if self.n <= DENSE_COARSE_MAX:
                self._cho = sla.cho_factor(A.toarray(), lower=True, check_finite=False)
            else:
                self._lu = spla.splu(A.tocsc())
        except (np.linalg.LinAlgError, RuntimeError) as exc:
            raise SingularCoarseError(f"coarsest factorization failed (n={self.n}): {exc}") from exc

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.n == 0:
            return np.zeros(0)
        if self._cho is not None:
            return sla.cho_solve(self._cho, b, check_finite=False)
        return self._lu.solve(b)


class Hierarchy:
    """
    Levels 0 (finest) .. L (coarsest). The coarsest factorization is built
    lazily and dropped whenever levels change.
    """

    def __init__(self, levels: List[Level]):
        if not levels:
            raise ValueError("a hierarchy needs at least one level")
        self.levels = levels
        self._coarse: Optional[CoarseSolver] = None

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, l: int) -> Level:
        return self.levels[l]

    @property
    def coarsest(self) -> int:
        return len(self.levels) - 1

    def coarse_solve(self, b: np.ndarray) -> np.ndarray:
        if self._coarse is None:
            self._coarse = CoarseSolver(self.levels[-1].A)
        return self._coarse.solve(b)

    def truncate(self, n_levels: int) -> None:
        del self.levels[n_levels:]
        self.levels[-1].part, self.levels[-1].P_down = None, None
        self._coarse = None

    def attach_interpolation(self, l: int, part: Partition, P_op: InterpolationOperator,
                             coarse_meta: Optional[GridMeta] = None) -> None:
        """
        Install P_down on level l and recompute level l+1 (A, P_{l+1}, T_{l+1}).
        Coarser levels, if any, are discarded when their size no longer matches.
        """
        fine = self.levels[l]
        fine.part, fine.P_down = part, P_op
        Ac = galerkin(fine.A, P_op.P)
        comp = as_csr(fine.composite_P @ P_op.P)
        T = galerkin(fine.gram_T, P_op.P)
        if l + 1 < len(self.levels) and self.levels[l + 1].n == Ac.shape[0]:
            nxt = self.levels[l + 1]
            nxt.A, nxt.composite_P, nxt.gram_T = Ac, comp, T
            nxt.meta = coarse_meta if coarse_meta is not None else nxt.meta
        else:
            del self.levels[l + 1:]
            self.levels.append(Level(A=Ac, meta=coarse_meta, composite_P=comp, gram_T=T))
        self._coarse = None

    def operator_complexity(self) -> float:
        return sum(lv.A.nnz for lv in self.levels) / self.levels[0].A.nnz

    def summary(self) -> Dict:
        """JSON-friendly description: sizes, nnz and operator complexity."""
        return {
            'n_levels': len(self.levels),
            'sizes': [int(lv.n) for lv in self.levels],
            'nnz': [int(lv.A.nnz) for lv in self.levels],
            'operator_complexity': float(self.operator_complexity()),
        }


def single_level(A: SparseMatrix, meta: Optional[GridMeta] = None) -> Hierarchy:
    A = as_csr(A)
    n = A.shape[0]
    return Hierarchy([Level(A=A, meta=meta, composite_P=identity(n), gram_T=identity(n))])


def coarsen_level(A: SparseMatrix, meta: Optional[GridMeta], V: TestVectorSet,
                  coarsening: CoarseningConfig, interp: InterpConfig, smoother: SmootherSpec,
                  T: Optional[SparseMatrix] = None
                  ) -> Tuple[Partition, InterpolationOperator, Optional[GridMeta], List[CrReport]]:
    """
    Choose C on one level and fit P to the level's test vectors.

    Returns:
        (partition, interpolation, coarse grid meta or None, CR stage reports).

    Raises:
        StagnationError: If every point became coarse.
        SpecificationError: Geometric coarsening requested without grid metadata.
    """
    reports: List[CrReport] = []
    if coarsening.method == 'geometric':
        if meta is None:
            raise SpecificationError("geometric coarsening needs grid metadata")
        part, source, coarse_meta = full_coarsening(meta), meta, meta.coarsened()
    else:
        graph = strength_graph(V, A, coarsening.strength_threshold)
        part, reports = cr_coarsen(A, Partition.empty(A.shape[0]), smoother, nu=coarsening.cr_sweeps,
                                   delta=coarsening.delta, graph=graph,
                                   max_stages=coarsening.max_stages,
                                   score_threshold=coarsening.score_threshold,
                                   mode=coarsening.cr_mode, candidate_rule=coarsening.candidate_rule)
        part = cover_interpolation_gaps(part, graph)
        source, coarse_meta = graph, None
    if part.n_c == part.n:
        raise StagnationError(f"level with n={part.n} failed to coarsen (C equals all points)")
    P_op = build_interpolation(A, part, V, mode=interp.mode, source=source, caliber=interp.caliber,
                               weight_mode=interp.weight_mode, T=T, lsr_fraction=interp.lsr_fraction)
    return part, P_op, coarse_meta, reports


def build_hierarchy(A: SparseMatrix, meta: Optional[GridMeta], V: TestVectorSet,
                    coarsening: CoarseningConfig = CoarseningConfig(),
                    interp: InterpConfig = InterpConfig(),
                    stop: StopCriteria = StopCriteria(),
                    smoother: SmootherSpec = SmootherSpec()) -> Hierarchy:
    """
    Galerkin hierarchy from a fixed set of test vectors.

    Each level picks C, fits P by least squares, forms A_{l+1} = P^T A_l P and
    injects the test vectors at the C-points for the next level.

    Args:
        A: SPD fine operator.
        meta: Grid metadata (required for geometric coarsening).
        V: Test vectors on the finest level.
        coarsening: Coarse-grid selection.
        interp: LS interpolation settings.
        stop: Coarsest-level criteria.
        smoother: Relaxation used inside CR coarsening.

    Returns:
        The hierarchy.

    Raises:
        StagnationError: If a level fails to coarsen.
    """
    hier = single_level(A, meta)
    V_l = V
    while not stop.reached(len(hier), hier.levels[-1]):
        l = hier.coarsest
        lv = hier[l]
        part, P_op, coarse_meta, reports = coarsen_level(lv.A, lv.meta, V_l, coarsening, interp,
                                                         smoother, T=lv.gram_T if l else None)
        if part.n_c == 0:
            logger.info(f"level {l}: relaxation alone resolves the level, stopping")
            break
        lv.cr_reports = reports
        hier.attach_interpolation(l, part, P_op, coarse_meta)
        V_l = V_l.restricted(part.c_flags)
        logger.debug(f"level {l}: n={part.n} -> n_c={part.n_c}, nnz(A_c)={hier[l + 1].A.nnz}")
    return hier


def cycle(hier: Hierarchy, spec: CycleSpec, level: int, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    One V- or W-cycle for A_level x = b.

    Pre-smoothing, coarse correction with R = P^T (repeated cycle_index times
    below the next-to-coarsest level), post-smoothing; the coarsest level is
    solved directly.

    Raises:
        SingularCoarseError: If the coarsest factorization fails.
        DimensionMismatchError: On shape mismatch.
    """
    lv = hier[level]
    if x.shape != (lv.n,) or b.shape != (lv.n,):
        raise DimensionMismatchError(f"level {level} has n={lv.n}, got x {x.shape}, b {b.shape}")
    if level == hier.coarsest:
        return hier.coarse_solve(b)
    A, P = lv.A, lv.P
    if spec.pre_sweeps:
        x = smooth(spec.smoother, A, x, b, sweeps=spec.pre_sweeps)
    rc = P.T @ (b - A @ x)
    ec = np.zeros(P.shape[1])
    repeats = 1 if level + 1 == hier.coarsest else spec.cycle_index
    for _ in range(repeats):
        ec = cycle(hier, spec, level + 1, ec, rc)
    x = x + P @ ec
    if spec.post_sweeps:
        x = smooth(spec.smoother, A, x, b, sweeps=spec.post_sweeps)
    return x


@dataclass
class RateEstimate:
    """
    Asymptotic convergence factor over several random starts.

    Attributes:
        rho: Median of the per-seed estimates.
        rho_min, rho_max: Spread over seeds.
        per_seed: Per-seed estimates.
        iterations: Cycles run per seed.
        diverged: True if any seed diverged.
        norm: 'l2' or 'a'.
    """
    rho: float
    rho_min: float
    rho_max: float
    per_seed: List[float]
    iterations: List[int]
    diverged: bool
    norm: str = 'l2'

    def to_dict(self) -> Dict:
        return {'rho': self.rho, 'rho_min': self.rho_min, 'rho_max': self.rho_max,
                'per_seed': list(self.per_seed), 'iterations': list(self.iterations),
                'diverged': self.diverged, 'norm': self.norm}


def iteration_rate(step: Callable[[np.ndarray], np.ndarray], x0: np.ndarray,
                   norm: Callable[[np.ndarray], float], max_iters: int = DEFAULT_MAX_ITERS
                   ) -> Tuple[float, int, bool]:
    """
    Asymptotic factor of a linear iteration e <- step(e) from x0.

    Returns:
        (rho, iterations, diverged): rho is the geometric mean of the last
        RATE_WINDOW ratios; on divergence it is the largest recent ratio.
    """
    e = x0
    n0 = norm(e)
    prev = n0
    ratios: List[float] = []
    run = 0
    for it in range(1, max_iters + 1):
        e = step(e)
        cur = norm(e)
        ratio = cur / prev if prev > 0.0 else 0.0
        ratios.append(ratio)
        run = run + 1 if ratio > 1.0 else 0
        if run >= DIVERGENCE_RUN:
            return float(max(ratios[-DIVERGENCE_RUN:])), it, True
        if cur == 0.0 or cur < RATE_TOL * n0:
            break
        prev = cur
    tail = np.asarray(ratios[-RATE_WINDOW:])
    if (tail == 0.0).any():
        return 0.0, len(ratios), False
    return float(np.exp(np.mean(np.log(tail)))), len(ratios), False


def _seed_list(seeds: Union[int, Sequence[int]]) -> List[int]:
    return list(range(seeds)) if isinstance(seeds, (int, np.integer)) else [int(s) for s in seeds]


def estimate_asymptotic_rate(hier: Hierarchy, spec: CycleSpec, seeds: Union[int, Sequence[int]] = 5,
                             max_iters: int = DEFAULT_MAX_ITERS, norm: str = 'l2',
                             step: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> RateEstimate:
    """
    Estimate the asymptotic convergence factor of the solver on A x = 0.

    Args:
        hier: Hierarchy whose finest operator defines the problem.
        spec: Solve cycle.
        seeds: Seed count (seeds 0..seeds-1) or explicit seeds; each gives a
            standard-normal start vector.
        max_iters: Cycle budget per seed.
        norm: 'l2' or 'a' (energy norm).
        step: Alternative iteration (e.g. a bare smoother) replacing the cycle.

    Returns:
        RateEstimate with the median over seeds and its min/max.
    """
    A = hier[0].A
    n = A.shape[0]
    zero = np.zeros(n)
    step = step or (lambda e: cycle(hier, spec, 0, e, zero))
    if norm == 'l2':
        norm_fn = np.linalg.norm
    elif norm == 'a':
        norm_fn = lambda e: a_norm(A, e)
    else:
        raise ValueError(f"unknown norm '{norm}'")

    per_seed, iters, diverged = [], [], False
    for seed in _seed_list(seeds):
        x0 = np.random.default_rng(seed).standard_normal(n)
        rho, it, div = iteration_rate(step, x0, norm_fn, max_iters)
        per_seed.append(rho)
        iters.append(it)
        diverged |= div
    if diverged:
        logger.warning(f"solver diverged for at least one seed (max rho={max(per_seed):.3f})")
    return RateEstimate(rho=float(np.median(per_seed)), rho_min=float(min(per_seed)),
                        rho_max=float(max(per_seed)), per_seed=per_seed, iterations=iters,
                        diverged=diverged, norm=norm)
