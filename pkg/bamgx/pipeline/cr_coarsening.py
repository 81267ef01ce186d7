"""
CR Coarsening Module for bamgx Pipeline

Compatible-relaxation driven coarse-grid selection. Each stage runs a few
CR sweeps on the homogeneous system, turns the resulting pointwise error into
candidate scores, and adds an independent set of slow-to-converge candidates
to C, using an algebraic-distance strength graph to decide independence. The
loop stops once the CR rate drops below a target delta.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import logging
import numpy as np
import scipy.sparse as sp

from bamgx.pipeline.errors import UndefinedDistanceError, DimensionMismatchError
from bamgx.pipeline.problem_gen import GridMeta
from bamgx.pipeline.smoothing import (SmootherSpec, ProjectionSolver, f_relax, hcr_apply,
                                      injection_operator)
from bamgx.pipeline.sparse_core import SparseMatrix, as_csr

logger = logging.getLogger(__name__)

CR_SWEEPS = 5  # CR iterations per stage
CR_DELTA = 0.7  # accept the coarse set once rho_cr <= delta
SCORE_THRESHOLD = 0.5  # candidates have normalized error at least this large
MAX_STAGES = 10
STRENGTH_THRESHOLD = 0.25  # mu_ij at or below this marks a strong connection
CR_SEED = 1234  # fixed seed of the CR start vector
CR_MODES = ('f_relax', 'hcr')
CANDIDATE_RULES = ('rate', 'fixed')


@dataclass(frozen=True)
class CoarseningConfig:
    """
    Coarse-grid selection per level.

    Attributes:
        method: 'geometric' (standard full coarsening, needs grid metadata)
            or 'cr' (compatible-relaxation coarsening from an empty C).
        cr_sweeps, delta, score_threshold, max_stages: CR loop controls.
        strength_threshold: Algebraic-distance cutoff for strong edges.
        cr_mode: 'f_relax' or 'hcr'.
        candidate_rule: 'rate' caps the candidate cutoff at 1 - rho_cr of the
            stage, 'fixed' always uses score_threshold.
    """
    method: str = 'geometric'
    cr_sweeps: int = CR_SWEEPS
    delta: float = CR_DELTA
    score_threshold: float = SCORE_THRESHOLD
    max_stages: int = MAX_STAGES
    strength_threshold: float = STRENGTH_THRESHOLD
    cr_mode: str = 'f_relax'
    candidate_rule: str = 'rate'

    def __post_init__(self):
        if self.method not in ('geometric', 'cr'):
            raise ValueError(f"unknown coarsening method '{self.method}'")
        if self.cr_mode not in CR_MODES:
            raise ValueError(f"unknown CR mode '{self.cr_mode}'")
        if self.candidate_rule not in CANDIDATE_RULES:
            raise ValueError(f"unknown candidate rule '{self.candidate_rule}'")
        if self.cr_sweeps < 2:
            raise ValueError(f"cr_sweeps must be >= 2, got {self.cr_sweeps}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0,1), got {self.delta}")
        if self.max_stages < 1:
            raise ValueError(f"max_stages must be >= 1, got {self.max_stages}")


@dataclass(frozen=True)
class Partition:
    """
    C/F splitting of a level's variables.

    Attributes:
        c_flags: Boolean per point, True for coarse points.
    """
    c_flags: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'c_flags', np.asarray(self.c_flags, dtype=bool))

    @classmethod
    def empty(cls, n: int) -> 'Partition':
        return cls(np.zeros(n, dtype=bool))

    @classmethod
    def from_coarse(cls, n: int, coarse) -> 'Partition':
        flags = np.zeros(n, dtype=bool)
        flags[np.asarray(coarse, dtype=int)] = True
        return cls(flags)

    @property
    def n(self) -> int:
        return self.c_flags.size

    @property
    def C(self) -> np.ndarray:
        return np.flatnonzero(self.c_flags)

    @property
    def F(self) -> np.ndarray:
        return np.flatnonzero(~self.c_flags)

    @property
    def n_c(self) -> int:
        return int(self.c_flags.sum())

    def coarse_index(self) -> np.ndarray:
        """Map fine index -> coarse index (-1 on F)."""
        out = np.full(self.n, -1, dtype=int)
        out[self.C] = np.arange(self.n_c)
        return out

    def with_added(self, points) -> 'Partition':
        flags = self.c_flags.copy()
        flags[np.asarray(points, dtype=int)] = True
        return Partition(flags)


def full_coarsening(meta: GridMeta) -> Partition:
    """Standard full coarsening: C = points whose 1-based grid coordinates are all even."""
    gi, gj = meta.grid_coords()
    flags = gi % 2 == 0
    if meta.dim == 2:
        flags &= gj % 2 == 0
    return Partition(flags)


@dataclass
class StrengthGraph:
    """
    Algebraic-distance weighted graph on the off-diagonal pattern of A.

    Attributes:
        rows, cols: Edge endpoints (both directions present).
        mu: Algebraic distance per edge, in [0, 1].
        threshold: Edges with mu <= threshold are strong.
        fallback: True when every edge is treated as strong.
        vectors: Test-vector traces the distances were computed from.
    """
    n: int
    rows: np.ndarray
    cols: np.ndarray
    mu: np.ndarray
    threshold: float
    fallback: bool = False
    vectors: Optional[np.ndarray] = None

    @property
    def strong(self) -> np.ndarray:
        if self.fallback:
            return np.ones(self.mu.size, dtype=bool)
        return self.mu <= self.threshold

    def strong_matrix(self) -> SparseMatrix:
        """Symmetric 0/1 CSR adjacency of the strong edges."""
        s = self.strong
        S = sp.csr_matrix((np.ones(int(s.sum())), (self.rows[s], self.cols[s])), shape=(self.n, self.n))
        S = ((S + S.T) > 0).astype(np.float64)
        return as_csr(S)


@dataclass
class CrReport:
    """
    Outcome of one CR estimation stage.

    Attributes:
        rho_cr: ||e^nu|| / ||e^(nu-1)||.
        norms: l2 error norms after 0..nu sweeps.
        final_error: e^nu on all points.
        c_flags: The partition the estimate was computed for.
        scores: Candidate scores derived from final_error.
        stage: Stage counter inside cr_coarsen.
        work: Estimated operator complexity W of the implied two-level hierarchy.
        beta: Work-weighted quality rho_cr ** (1 / W).
        threshold: Candidate cutoff used to grow C after this stage.
        warning: Non-empty when coarsening stagnated.
    """
    rho_cr: float
    norms: List[float]
    final_error: np.ndarray
    c_flags: np.ndarray
    scores: Optional[np.ndarray] = None
    stage: int = 0
    work: float = 1.0
    beta: float = 0.0
    threshold: Optional[float] = None
    warning: str = ''

    def to_dict(self) -> Dict:
        """JSON-friendly summary (vectors dropped)."""
        return {
            'stage': self.stage, 'rho_cr': self.rho_cr, 'beta': self.beta, 'work': self.work,
            'n_c': int(self.c_flags.sum()), 'n': int(self.c_flags.size),
            'norms': [float(v) for v in self.norms], 'threshold': self.threshold,
            'warning': self.warning,
        }


def _tv_array(V) -> np.ndarray:
    vectors = getattr(V, 'vectors', V)
    return np.asarray(vectors, dtype=np.float64)


def work_estimate(A: SparseMatrix, part: Partition) -> float:
    """
    Operator complexity sum_l nnz(A_l) / nnz(A_0) of the two-level hierarchy a
    splitting implies, with the coarse operator's pattern taken as the
    distance-two couplings of A among C-points.
    """
    A = as_csr(A)
    if A.nnz == 0 or part.n_c == 0:
        return 1.0
    pattern = abs(A)
    C = part.C
    coarse = (pattern @ pattern)[C][:, C]
    return 1.0 + coarse.nnz / A.nnz


def estimate_cr_rate(A: SparseMatrix, part: Partition, spec: SmootherSpec, nu: int = CR_SWEEPS,
                     mode: str = 'f_relax', X: Optional[SparseMatrix] = None,
                     seed: int = CR_SEED) -> CrReport:
    """
    Estimate the CR convergence rate of a C/F splitting.

    Args:
        A: Level operator.
        part: Candidate splitting.
        spec: Relaxation used inside CR (one sweep per CR iteration).
        nu: Number of CR iterations, at least 2.
        mode: 'f_relax' (F-point relaxation, C frozen at zero) or 'hcr'
            (full relaxation followed by removal of the projection onto range(X^T)).
        X: Coarse-variable map for 'hcr'; defaults to injection at C.
        seed: Seed of the uniform [-1, 1] start vector.

    Returns:
        CrReport with rho_cr = ||e^nu|| / ||e^(nu-1)|| (0 when the denominator vanishes).
    """
    if nu < 2:
        raise ValueError(f"nu must be >= 2, got {nu}")
    if mode not in CR_MODES:
        raise ValueError(f"unknown CR mode '{mode}'")
    n = A.shape[0]
    if part.n != n:
        raise DimensionMismatchError(f"partition has {part.n} points, matrix has {n}")

    rng = np.random.default_rng(seed)
    e = rng.uniform(-1.0, 1.0, size=n)
    if mode == 'f_relax':
        e[part.c_flags] = 0.0
        step = lambda v: f_relax(spec, A, part.c_flags, v, sweeps=1)
    else:
        X = injection_operator(part.c_flags) if X is None else X
        projector = ProjectionSolver(X)
        e = projector.project_out(e)
        step = lambda v: hcr_apply(A, spec, X, v, sweeps=1, projector=projector)

    norms = [float(np.linalg.norm(e))]
    for _ in range(nu):
        e = step(e)
        norms.append(float(np.linalg.norm(e)))
    rho = norms[-1] / norms[-2] if norms[-2] > 0.0 else 0.0

    work = work_estimate(A, part)
    beta = rho ** (1.0 / work)
    report = CrReport(rho_cr=rho, norms=norms, final_error=e, c_flags=part.c_flags.copy(),
                      work=work, beta=beta)
    report.scores = candidate_scores(report)
    return report


def candidate_scores(report: CrReport) -> np.ndarray:
    """
    Scaled pointwise CR error: |e_i| / max_j |e_j| on F, 0 on C.

    An all-zero final error yields all-zero scores.
    """
    err = np.abs(report.final_error)
    err = np.where(report.c_flags, 0.0, err)
    top = err.max() if err.size else 0.0
    if top == 0.0:
        return np.zeros_like(err)
    return err / top


def coupling_coefficient(V, i: int, j: int) -> float:
    """
    Minimizer p_ij of sum_k (v_i^k - p v_j^k)^2 over the test vectors.

    Raises:
        UndefinedDistanceError: If the trace at j vanishes.
    """
    Vm = _tv_array(V)
    vj = Vm[j]
    den = float(np.dot(vj, vj))
    if den == 0.0:
        raise UndefinedDistanceError(f"test-vector trace at point {j} is zero")
    return float(np.dot(Vm[i], vj)) / den


def algebraic_distance(V, i: int, j: int) -> float:
    """
    mu_ij = 1 - <V_i, V_j>^2 / (||V_i||^2 ||V_j||^2), where V_i is the trace of
    all test vectors at point i.

    Raises:
        UndefinedDistanceError: If either trace is identically zero.
    """
    Vm = _tv_array(V)
    vi, vj = Vm[i], Vm[j]
    ni, nj = float(np.dot(vi, vi)), float(np.dot(vj, vj))
    if ni == 0.0 or nj == 0.0:
        raise UndefinedDistanceError(f"test-vector trace at point {i if ni == 0.0 else j} is zero")
    dot = float(np.dot(vi, vj))
    return float(min(max(1.0 - dot * dot / (ni * nj), 0.0), 1.0))


def pairwise_distance(V, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """
    Vectorized algebraic distance over index pairs. Pairs touching a zero
    trace get distance 1 (never strong).
    """
    Vm = _tv_array(V)
    sq = np.einsum('ik,ik->i', Vm, Vm)
    dots = np.einsum('ik,ik->i', Vm[rows], Vm[cols])
    den = sq[rows] * sq[cols]
    with np.errstate(divide='ignore', invalid='ignore'):
        mu = np.where(den > 0.0, 1.0 - dots * dots / np.where(den > 0.0, den, 1.0), 1.0)
    return np.clip(mu, 0.0, 1.0)


def strength_graph(V, A: SparseMatrix, threshold: float = STRENGTH_THRESHOLD,
                   fallback: bool = False) -> StrengthGraph:
    """
    Strength-of-connection graph from algebraic distances on the pattern of A.

    Args:
        V: TestVectorSet (or n x k array of test vectors).
        A: Level operator; only its off-diagonal pattern is used.
        threshold: mu at or below this is strong.
        fallback: Treat every off-diagonal nonzero as strong, for use before
            the test vectors are reliable.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0,1], got {threshold}")
    coo = as_csr(A).tocoo()
    off = coo.row != coo.col
    rows, cols = coo.row[off].astype(int), coo.col[off].astype(int)
    vectors = None if V is None else _tv_array(V)
    if fallback or vectors is None:
        mu = np.zeros(rows.size)
    else:
        mu = pairwise_distance(vectors, rows, cols)
    graph = StrengthGraph(n=A.shape[0], rows=rows, cols=cols, mu=mu, threshold=threshold,
                          fallback=fallback or vectors is None, vectors=vectors)
    logger.debug(f"strength graph: {int(graph.strong.sum())}/{rows.size} strong edges")
    return graph


def update_coarse_set(part: Partition, scores: np.ndarray, graph: StrengthGraph,
                      score_threshold: float = SCORE_THRESHOLD) -> Partition:
    """
    Add a maximal independent set of candidates to C.

    Candidates are F-points scoring at least score_threshold; they are visited
    by descending score, ties by ascending index, and each accepted point
    blocks its strong neighbors.
    """
    scores = np.asarray(scores, dtype=np.float64)
    cand = np.flatnonzero(~part.c_flags & (scores >= score_threshold))
    if cand.size == 0:
        return part
    order = cand[np.lexsort((cand, -scores[cand]))]
    S = graph.strong_matrix()
    blocked = np.zeros(part.n, dtype=bool)
    added = []
    for i in order:
        if blocked[i]:
            continue
        added.append(i)
        blocked[S.indices[S.indptr[i]:S.indptr[i + 1]]] = True
    return part.with_added(added)


def cover_interpolation_gaps(part: Partition, graph: StrengthGraph) -> Partition:
    """
    Promote F-points that have no C-point within graph distance 2.

    Uncovered points are visited in index order; each promoted point covers
    its distance-2 neighbourhood, so no two promoted points lie within
    distance 2 of each other.
    """
    n = part.n
    if graph.n != n:
        raise DimensionMismatchError(f"graph has {graph.n} points, partition has {n}")
    pattern = sp.csr_matrix((np.ones(graph.rows.size), (graph.rows, graph.cols)), shape=(n, n))
    reach = as_csr((sp.identity(n, format='csr') + pattern + pattern @ pattern) > 0)
    covered = part.c_flags | (reach @ part.c_flags.astype(np.float64) > 0)
    added = []
    for i in np.flatnonzero(~covered):
        if covered[i]:
            continue
        added.append(i)
        covered[reach.indices[reach.indptr[i]:reach.indptr[i + 1]]] = True
    if added:
        logger.debug(f"promoted {len(added)} F-points without a coarse point within distance 2")
    return part.with_added(added) if added else part


def cr_coarsen(A: SparseMatrix, C0: Partition, spec: SmootherSpec, nu: int = CR_SWEEPS,
               delta: float = CR_DELTA, graph: Optional[StrengthGraph] = None,
               max_stages: int = MAX_STAGES, score_threshold: float = SCORE_THRESHOLD,
               mode: str = 'f_relax', seed: int = CR_SEED,
               candidate_rule: str = 'rate') -> Tuple[Partition, List[CrReport]]:
    """
    CR coarsening loop: estimate, score, grow C until rho_cr <= delta.

    Args:
        A: Level operator.
        C0: Initial partition (empty by default in callers).
        spec: CR smoother.
        nu: CR sweeps per stage.
        delta: Target CR rate in (0, 1).
        graph: Strength graph; defaults to the all-strong fallback graph.
        max_stages: Maximum number of C updates.
        score_threshold: Candidate cutoff on the normalized error.
        mode: 'f_relax' or 'hcr'.
        seed: Seed for the CR start vector.
        candidate_rule: 'rate' lowers the cutoff to 1 - rho_cr when CR is slow,
            'fixed' keeps score_threshold.

    Returns:
        Final partition and one report per estimate.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0,1), got {delta}")
    if max_stages < 1:
        raise ValueError(f"max_stages must be >= 1, got {max_stages}")
    if candidate_rule not in CANDIDATE_RULES:
        raise ValueError(f"unknown candidate rule '{candidate_rule}'")
    graph = graph or strength_graph(None, A, fallback=True)

    part = C0
    reports: List[CrReport] = []
    for stage in range(max_stages + 1):
        report = estimate_cr_rate(A, part, spec, nu=nu, mode=mode, seed=seed)
        report.stage = stage
        reports.append(report)
        logger.info(f"CR stage {stage}: rho_cr={report.rho_cr:.3f}, beta={report.beta:.3f}, "
                    f"|C|={part.n_c}/{part.n}")
        if report.rho_cr <= delta or stage == max_stages:
            break
        threshold = score_threshold
        if candidate_rule == 'rate':
            threshold = min(score_threshold, max(1.0 - report.rho_cr, 0.0))
        report.threshold = threshold
        grown = update_coarse_set(part, report.scores, graph, threshold)
        if grown.n_c == part.n_c:
            report.warning = 'coarsening degenerate: no candidates above threshold'
            logger.warning(f"CR stage {stage}: {report.warning} (rho_cr={report.rho_cr:.3f})")
            break
        part = grown
    if reports[-1].rho_cr > delta and part.n_c == part.n:
        reports[-1].warning = 'coarsening degenerate: C equals all points'
        logger.warning(reports[-1].warning)
    return part, reports
