"""
Bootstrap Setup Module for bamgx Pipeline

The bootstrap AMG setup. Relaxed test vectors V^r are smoothed on every
level's homogeneous system, interpolation is fit to them by least squares,
and the coarsest level seeds eigen test vectors V^e from the generalized
eigenproblem A_L x = lambda T_L x. On the way back up, V^e is interpolated
and refined level by level (multilevel generalized eigensolver), with the
relative eigenvalue change tau recorded as a measure of interpolation
accuracy. Setup cycles come in V and W shapes and may be repeated; an
optional adaptive step polishes the smoothest V^r vector with solve cycles.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import logging
import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla
from tqdm import tqdm

from bamgx.pipeline.cr_coarsening import CoarseningConfig
from bamgx.pipeline.errors import GramDegenerateError
from bamgx.pipeline.ls_interp import InterpConfig, TestVectorSet
from bamgx.pipeline.mg_hierarchy import (CycleSpec, Hierarchy, StopCriteria, coarsen_level, cycle,
                                         estimate_asymptotic_rate, single_level)
from bamgx.pipeline.problem_gen import GridMeta
from bamgx.pipeline.smoothing import SmootherSpec, smooth
from bamgx.pipeline.sparse_core import SparseMatrix, as_csr, identity

logger = logging.getLogger(__name__)

TV_SWEEPS = 4  # eta: relaxation sweeps per test vector per level visit
REFINE_SWEEPS = 2  # smoothing sweeps on the frozen-shift system during eigen refinement
TAU_THRESHOLD = 0.1  # levels above this are refit on the W-shape revisit
ADAPTIVE_CYCLES = 5
TEST_ITERS = 20  # cycles used to test the solver at the end of a setup cycle
DENSE_EIGEN_MAX = 4096  # larger coarsest levels use shift-invert Lanczos
SETUP_SHAPES = ('V', 'W')


@dataclass(frozen=True)
class SetupSpec:
    """
    Bootstrap setup parameters.

    Attributes:
        cycle_shape: 'V' or 'W'.
        repeats: Number m of setup cycles.
        eta: Relaxation sweeps per test vector per level.
        k_r: Random relaxed test vectors.
        k_e: Eigen test vectors computed on the coarsest level.
        include_constant: Append the constant vector to V^r.
        smoother: Relaxation for test vectors and refinement.
        rng_seed: Seed of the initial random vectors.
        adaptive_step: Run the adaptive step between consecutive setup cycles.
        adaptive_cycles: Solve cycles used by the adaptive step.
        adaptive_cycle: Cycle used by the adaptive step.
        mg_solve_tvs: From the second cycle on, replace V^r relaxation by
            one solve cycle per vector.
        interp: LS interpolation settings.
        coarsening: Coarse-grid selection.
        stop: Coarsest-level criteria.
        refine_sweeps: Sweeps on (A - lambda T) x = 0 per refinement step.
        tau_threshold: Levels whose largest tau exceeds this are refit on revisits.
        test_cycle: Solver cycle tested at the end of each setup cycle.
        test_iters: Iteration budget of that test.
    """
    cycle_shape: str = 'V'
    repeats: int = 1
    eta: int = TV_SWEEPS
    k_r: int = 8
    k_e: int = 0
    include_constant: bool = False
    smoother: SmootherSpec = field(default_factory=SmootherSpec)
    rng_seed: int = 0
    adaptive_step: bool = False
    adaptive_cycles: int = ADAPTIVE_CYCLES
    adaptive_cycle: CycleSpec = field(default_factory=CycleSpec)
    mg_solve_tvs: bool = False
    interp: InterpConfig = field(default_factory=InterpConfig)
    coarsening: CoarseningConfig = field(default_factory=CoarseningConfig)
    stop: StopCriteria = field(default_factory=StopCriteria)
    refine_sweeps: int = REFINE_SWEEPS
    tau_threshold: float = TAU_THRESHOLD
    test_cycle: CycleSpec = field(default_factory=CycleSpec)
    test_iters: int = TEST_ITERS

    def __post_init__(self):
        if self.cycle_shape not in SETUP_SHAPES:
            raise ValueError(f"cycle_shape must be one of {SETUP_SHAPES}, got '{self.cycle_shape}'")
        if self.repeats < 1:
            raise ValueError(f"repeats must be >= 1, got {self.repeats}")
        if self.k_r < 1 or self.k_e < 0:
            raise ValueError(f"need k_r >= 1 and k_e >= 0, got k_r={self.k_r}, k_e={self.k_e}")
        if self.eta < 0 or self.refine_sweeps < 0 or self.adaptive_cycles < 0:
            raise ValueError("sweep and cycle counts must be non-negative")

    @property
    def label(self) -> str:
        return f"{self.cycle_shape}^{self.repeats}" if self.repeats > 1 else self.cycle_shape


@dataclass
class EigenPair:
    """Approximate generalized eigenpair on one level, x normalized in the T-norm."""
    vector: np.ndarray
    eigenvalue: float
    level: int
    tau_history: List[float] = field(default_factory=list)

    @property
    def tau(self) -> float:
        return self.tau_history[-1] if self.tau_history else float('nan')


@dataclass
class SetupReport:
    """Per-cycle solver rates, tau statistics and hierarchy sizes of a bootstrap setup."""
    cycles: List[Dict] = field(default_factory=list)
    tv_energies: List[float] = field(default_factory=list)
    hierarchy: Dict = field(default_factory=dict)

    @property
    def final_rho(self) -> float:
        return self.cycles[-1]['rho'] if self.cycles else float('nan')

    def to_dict(self) -> Dict:
        return {'cycles': self.cycles, 'tv_energies': self.tv_energies, 'hierarchy': self.hierarchy}


def init_test_vectors(n: int, k_r: int, seed: int = 0, include_constant: bool = False) -> TestVectorSet:
    """
    k_r standard-normal vectors (plus the constant vector if requested).

    Args:
        n: Vector length.
        k_r: Number of random vectors, at least 1.
        seed: Generator seed; equal seeds give identical sets.
        include_constant: Append the all-ones vector last.
    """
    if k_r < 1:
        raise ValueError(f"k_r must be >= 1, got {k_r}")
    X = np.random.default_rng(seed).standard_normal((n, k_r))
    if include_constant:
        X = np.hstack([X, np.ones((n, 1))])
    return TestVectorSet(vectors=X)


def relax_tvs(A: SparseMatrix, V: TestVectorSet, spec: SmootherSpec, eta: int) -> TestVectorSet:
    """
    Smooth every relaxed-origin vector eta sweeps on A x = 0, then rescale it to
    unit l2 norm. Eigen-origin vectors pass through; metadata is refreshed.
    """
    if eta < 0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    X = V.vectors.copy()
    if eta > 0:
        zero = np.zeros(V.n)
        for kappa in np.flatnonzero(V.relaxed_mask):
            x = smooth(spec, A, X[:, kappa], zero, sweeps=eta)
            nrm = np.linalg.norm(x)
            X[:, kappa] = x / nrm if nrm > 0.0 else x
    return V.with_vectors(X).refreshed(A)


def _t_energy(T: Optional[SparseMatrix], x: np.ndarray) -> float:
    return float(np.dot(x, x)) if T is None else float(np.dot(T @ x, x))


def eigen_tau(lam_coarse: float, lam_fine: float) -> float:
    """Relative eigenvalue change |lambda_coarse - lambda_fine| / |lambda_fine|."""
    if lam_fine == 0.0:
        return 0.0 if lam_coarse == 0.0 else float('inf')
    return abs(lam_coarse - lam_fine) / abs(lam_fine)


def mge_coarsest_solve(A_L: SparseMatrix, T_L: Optional[SparseMatrix], k_e: int,
                       level: int = 0) -> List[EigenPair]:
    """
    The k_e smallest generalized eigenpairs of A_L x = lambda T_L x.

    Args:
        A_L: Coarsest operator.
        T_L: Gram operator of the level (None for identity).
        k_e: Number of pairs.
        level: Level index stored in the pairs.

    Returns:
        Pairs with T-orthonormal vectors, ascending eigenvalues.

    Raises:
        GramDegenerateError: If T_L is not numerically positive definite.
    """
    n = A_L.shape[0]
    if k_e == 0:
        return []
    if not 1 <= k_e <= n:
        raise ValueError(f"k_e must lie in [1, {n}], got {k_e}")
    try:
        if n <= DENSE_EIGEN_MAX:
            lam, X = sla.eigh(A_L.toarray(), None if T_L is None else T_L.toarray(),
                              subset_by_index=[0, k_e - 1])
        else:
            lam, X = spla.eigsh(A_L.tocsc(), k=k_e, M=None if T_L is None else T_L.tocsc(), sigma=0.0)
            order = np.argsort(lam)
            lam, X = lam[order], X[:, order]
    except (np.linalg.LinAlgError, RuntimeError) as exc:
        raise GramDegenerateError(f"generalized eigensolve failed on level {level}: {exc}") from exc
    pairs = []
    for j in range(k_e):
        x = X[:, j]
        x = x / np.sqrt(_t_energy(T_L, x))
        pairs.append(EigenPair(vector=x, eigenvalue=float(lam[j]), level=level))
    return pairs


def mge_refine(l: int, pair: EigenPair, hier: Hierarchy, spec: SmootherSpec,
               sweeps: int = REFINE_SWEEPS) -> EigenPair:
    """
    Carry an eigenpair from level l to level l-1.

    The vector is interpolated, smoothed `sweeps` times on
    (A_{l-1} - lambda T_{l-1}) x = 0 with lambda frozen, its eigenvalue is
    replaced by the generalized Rayleigh quotient, and tau records the
    relative change.

    Raises:
        GramDegenerateError: If <T x, x> <= 0.
    """
    if l < 1:
        raise ValueError(f"refinement needs a coarse level index >= 1, got {l}")
    fine = hier[l - 1]
    T = fine.gram_T
    x = fine.P @ pair.vector
    if sweeps:
        shifted = as_csr(fine.A - pair.eigenvalue * T)
        x = smooth(spec, shifted, x, np.zeros_like(x), sweeps=sweeps)
    t = _t_energy(T, x)
    if t <= 0.0:
        raise GramDegenerateError(f"<T x, x> = {t:.3e} on level {l - 1}")
    lam = float(np.dot(fine.A @ x, x)) / t
    tau = eigen_tau(pair.eigenvalue, lam)
    return EigenPair(vector=x / np.sqrt(t), eigenvalue=lam, level=l - 1,
                     tau_history=pair.tau_history + [tau])


def _relax_eigen(A: SparseMatrix, T: Optional[SparseMatrix], pairs: List[EigenPair],
                 spec: SmootherSpec, sweeps: int) -> List[EigenPair]:
    """Relax V^e on the frozen-shift system and update the Rayleigh quotients."""
    if not sweeps:
        return pairs
    out = []
    for pair in pairs:
        M = A - pair.eigenvalue * (T if T is not None else identity(A.shape[0]))
        x = smooth(spec, as_csr(M), pair.vector, np.zeros_like(pair.vector), sweeps=sweeps)
        t = _t_energy(T, x)
        if t <= 0.0:
            out.append(pair)
            continue
        lam = float(np.dot(A @ x, x)) / t
        out.append(EigenPair(vector=x / np.sqrt(t), eigenvalue=lam, level=pair.level,
                             tau_history=list(pair.tau_history)))
    return out


def _eigen_set(pairs: List[EigenPair]) -> Optional[TestVectorSet]:
    if not pairs:
        return None
    return TestVectorSet(vectors=np.column_stack([p.vector for p in pairs]),
                         origin=('eigen',) * len(pairs),
                         eigenvalues=np.array([p.eigenvalue for p in pairs]))


def adaptive_step(hier: Hierarchy, V: TestVectorSet, cycles: int = ADAPTIVE_CYCLES,
                  spec: CycleSpec = CycleSpec()) -> TestVectorSet:
    """
    Replace the relaxed test vector of smallest Rayleigh quotient by the
    result of `cycles` solve cycles on A x = 0 started from it.

    Returns:
        A new set; the replaced vector is rescaled to unit l2 norm.
    """
    if cycles == 0:
        return V
    relaxed = np.flatnonzero(V.relaxed_mask)
    if relaxed.size == 0:
        raise ValueError("adaptive step needs at least one relaxed test vector")
    A = hier[0].A
    X = V.vectors.copy()
    rq = np.einsum('ik,ik->k', A @ X[:, relaxed], X[:, relaxed]) / np.einsum('ik,ik->k', X[:, relaxed],
                                                                              X[:, relaxed])
    kappa = int(relaxed[np.argmin(rq)])
    x = X[:, kappa]
    zero = np.zeros_like(x)
    for _ in range(cycles):
        x = cycle(hier, spec, 0, x, zero)
    nrm = np.linalg.norm(x)
    if nrm == 0.0:
        logger.warning("adaptive step annihilated the test vector; keeping the original")
        return V
    X[:, kappa] = x / nrm
    logger.debug(f"adaptive step replaced test vector {kappa} (RQ {rq.min():.3e})")
    return V.with_vectors(X).refreshed(A)


class _BootstrapRun:
    """Mutable state of one bootstrap setup: per-level V^r and V^e plus the hierarchy."""

    def __init__(self, A: SparseMatrix, meta: Optional[GridMeta], spec: SetupSpec):
        self.spec = spec
        self.hier = single_level(A, meta)
        self.Vr: Dict[int, TestVectorSet] = {
            0: init_test_vectors(A.shape[0], spec.k_r, spec.rng_seed, spec.include_constant)}
        self.Ve: Dict[int, List[EigenPair]] = {}
        self.taus: Dict[int, List[float]] = {}
        self.cycle_no = 0

    def _is_coarsest(self, l: int) -> bool:
        return self.spec.stop.reached(l + 1, self.hier[l])

    def _gram(self, l: int) -> Optional[SparseMatrix]:
        return None if l == 0 else self.hier[l].gram_T

    def _update_relaxed(self, l: int) -> None:
        spec, lv = self.spec, self.hier[l]
        V = self.Vr[l]
        if spec.mg_solve_tvs and self.cycle_no > 0 and l < self.hier.coarsest:
            zero = np.zeros(lv.n)
            X = V.vectors.copy()
            for kappa in range(V.k):
                x = cycle(self.hier, spec.test_cycle, l, X[:, kappa], zero)
                nrm = np.linalg.norm(x)
                X[:, kappa] = x / nrm if nrm > 0.0 else x
            self.Vr[l] = V.with_vectors(X).refreshed(lv.A)
        else:
            self.Vr[l] = relax_tvs(lv.A, V, spec.smoother, spec.eta)

    def _fit_set(self, l: int) -> TestVectorSet:
        return self.Vr[l].combine(_eigen_set(self.Ve.get(l, [])))

    def _refit(self, l: int) -> None:
        spec, lv = self.spec, self.hier[l]
        part, P_op, coarse_meta, reports = coarsen_level(lv.A, lv.meta, self._fit_set(l), spec.coarsening,
                                                         spec.interp, spec.smoother, T=self._gram(l))
        lv.cr_reports = reports
        self.hier.attach_interpolation(l, part, P_op, coarse_meta)

    def leg(self, l: int, revisit: bool = False) -> None:
        spec = self.spec
        if self._is_coarsest(l):
            self.hier.truncate(l + 1)
            lv = self.hier[l]
            self.Ve[l] = mge_coarsest_solve(lv.A, self._gram(l), min(spec.k_e, lv.n), level=l)
            return

        # downward: relax, fit P, coarsen, inject
        self._update_relaxed(l)
        if self.Ve.get(l):
            self.Ve[l] = _relax_eigen(self.hier[l].A, self._gram(l), self.Ve[l], spec.smoother, spec.eta)
        stale = max(self.taus.get(l, [np.inf]), default=np.inf) > spec.tau_threshold
        if not revisit or stale or self.hier[l].P_down is None:
            self._refit(l)
        c_flags = self.hier[l].part.c_flags
        self.Vr[l + 1] = self.Vr[l].restricted(c_flags)
        if self.Ve.get(l):
            self.Ve[l + 1] = [EigenPair(vector=p.vector[c_flags], eigenvalue=p.eigenvalue, level=l + 1,
                                        tau_history=list(p.tau_history)) for p in self.Ve[l]]

        self.leg(l + 1, revisit)
        if spec.cycle_shape == 'W' and not self._is_coarsest(l + 1):
            self.leg(l + 1, revisit=True)

        # upward: interpolate and refine V^e
        pairs = [mge_refine(l + 1, p, self.hier, spec.smoother, spec.refine_sweeps)
                 for p in self.Ve.get(l + 1, [])]
        self.Ve[l] = pairs
        self.taus[l] = [p.tau for p in pairs]

    def fine_set(self) -> TestVectorSet:
        return self._fit_set(0).refreshed(self.hier[0].A)

    def test(self) -> float:
        if self.spec.test_iters == 0:
            return float('nan')
        est = estimate_asymptotic_rate(self.hier, self.spec.test_cycle, seeds=[self.spec.rng_seed],
                                       max_iters=self.spec.test_iters)
        return est.rho

    def adapt(self) -> None:
        # the next setup cycle relaxes, refits and restricts from the updated finest set
        self.Vr[0] = adaptive_step(self.hier, self.Vr[0], self.spec.adaptive_cycles, self.spec.adaptive_cycle)


def bootstrap_setup(A: SparseMatrix, meta: Optional[GridMeta], spec: SetupSpec,
                    show_progress: bool = False) -> Tuple[Hierarchy, TestVectorSet, SetupReport]:
    """
    Run `spec.repeats` bootstrap setup cycles of shape `spec.cycle_shape`.

    Downward leg per level: relax V^r on A_l x = 0, relax V^e on the shifted
    system, fit P to V^r and V^e, Galerkin-coarsen and inject the test vectors.
    Coarsest level: generalized eigensolve for V^e. Upward leg: interpolate
    and refine V^e, recording tau. A W-shape revisits each coarser subtree once
    more, refitting P only where tau exceeds spec.tau_threshold. After each
    cycle the solver is tested on the finest level. If enabled, the adaptive
    step then updates the finest V^r before every cycle but the first, so the
    following cycle refits all levels from it.

    Args:
        A: SPD fine operator.
        meta: Grid metadata (required for geometric coarsening).
        spec: Setup parameters.
        show_progress: Display a tqdm bar over setup cycles.

    Returns:
        (hierarchy, finest-level test vectors V^r and V^e, report).
    """
    run = _BootstrapRun(as_csr(A), meta, spec)
    report = SetupReport()
    if spec.adaptive_step and spec.repeats < 2:
        logger.warning("adaptive step runs between setup cycles; skipped with a single cycle")
    for c in tqdm(range(spec.repeats), desc='Setup cycles', disable=not show_progress):
        run.cycle_no = c
        run.leg(0)
        entry = {'cycle': c + 1, 'rho': run.test(),
                 'tau': {str(l): [float(t) for t in ts] for l, ts in sorted(run.taus.items())},
                 **run.hier.summary()}
        if spec.adaptive_step and c < spec.repeats - 1:
            run.adapt()
            entry['adaptive_step'] = True
        report.cycles.append(entry)
        logger.info(f"setup cycle {c + 1}/{spec.repeats} ({spec.cycle_shape}): rho={entry['rho']:.3f}, "
                    f"levels={entry['n_levels']}, complexity={entry['operator_complexity']:.2f}")
    V = run.fine_set()
    report.tv_energies = [float(e) for e in V.energies]
    report.hierarchy = run.hier.summary()
    return run.hier, V, report
