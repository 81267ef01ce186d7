"""
LS Interpolation Module for bamgx Pipeline

Least-squares interpolation: every F-row of P is the weighted least-squares
fit of the test-vector values at i by their values on a small set C_i of
coarse points. The residual-based variant (LSR) first applies a local
Jacobi-type correction to the largest-residual F-point entries of each test
vector. C-rows are unit coordinate rows.

Interpolatory sets are stored as a padded (n, caliber) index array, with -1
marking unused slots and every slot unused on C-rows.
"""

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple, Union

import logging
import math
import numpy as np
import scipy.sparse as sp

from bamgx.pipeline.cr_coarsening import Partition, StrengthGraph, pairwise_distance
from bamgx.pipeline.errors import (DegenerateDiagonalError, DimensionMismatchError,
                                   IsolatedPointError)
from bamgx.pipeline.problem_gen import GridMeta
from bamgx.pipeline.sparse_core import SparseMatrix, as_csr, normalize_l1

logger = logging.getLogger(__name__)

WEIGHT_CAP = 1e8  # weight assigned to (near) null-space vectors
TIKHONOV_GAMMA = 1e-12  # shift gamma * trace / |C_i| for singular local Gram matrices
GRAM_RCOND = 1e-12  # local Gram matrices with smaller reciprocal condition count as singular
LSR_FRACTION = 0.20  # share of entries updated by the LSR correction
FIT_FACTOR = 10.0  # rows with fitness above FIT_FACTOR * median are flagged
GEOMETRIC_CALIBER = 4
WEIGHT_MODES = ('a_norm', 'azm', 'uniform')
INTERP_MODES = ('ls', 'lsr')
ORIGINS = ('relaxed', 'eigen')

_COLLINEAR = ((-1, 0), (1, 0), (0, -1), (0, 1))
_DIAGONAL = ((-1, -1), (1, -1), (-1, 1), (1, 1))


@dataclass(frozen=True)
class InterpConfig:
    """How a level's P is fit: LS or LSR rows, caliber, weighting."""
    mode: str = 'ls'
    caliber: int = GEOMETRIC_CALIBER
    weight_mode: str = 'a_norm'
    lsr_fraction: float = LSR_FRACTION

    def __post_init__(self):
        if self.mode not in INTERP_MODES:
            raise ValueError(f"unknown interpolation mode '{self.mode}'")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"unknown weight mode '{self.weight_mode}'")
        if self.caliber < 1:
            raise ValueError(f"caliber must be >= 1, got {self.caliber}")
        if not 0.0 < self.lsr_fraction <= 1.0:
            raise ValueError(f"lsr_fraction must lie in (0,1], got {self.lsr_fraction}")


@dataclass
class TestVectorSet:
    """
    Ordered test vectors stored as the columns of an (n, k) array.

    Attributes:
        vectors: (n, k) array, column kappa is v^(kappa).
        origin: Per-vector tag, 'relaxed' or 'eigen'.
        eigenvalues: Eigenvalue estimates (NaN for relaxed vectors).
        energies: <A v, v> per vector, refreshed by `refreshed`.
        residual_norms: ||A v|| per vector (homogeneous residual).
        weights: Optional LS weights, positive.
    """
    __test__ = False

    vectors: np.ndarray
    origin: Tuple[str, ...] = ()
    eigenvalues: Optional[np.ndarray] = None
    energies: Optional[np.ndarray] = None
    residual_norms: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim == 1:
            self.vectors = self.vectors[:, None]
        if self.vectors.ndim != 2 or self.vectors.shape[1] < 1:
            raise ValueError(f"need an (n, k) array with k >= 1, got shape {self.vectors.shape}")
        k = self.vectors.shape[1]
        if not self.origin:
            self.origin = ('relaxed',) * k
        self.origin = tuple(self.origin)
        if len(self.origin) != k or any(o not in ORIGINS for o in self.origin):
            raise ValueError(f"origin must hold {k} tags from {ORIGINS}")
        if self.eigenvalues is None:
            self.eigenvalues = np.full(k, np.nan)
        if self.weights is not None and (np.asarray(self.weights) <= 0).any():
            raise ValueError("test-vector weights must be positive")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def k(self) -> int:
        return self.vectors.shape[1]

    @property
    def relaxed_mask(self) -> np.ndarray:
        return np.array([o == 'relaxed' for o in self.origin])

    def with_vectors(self, vectors: np.ndarray) -> 'TestVectorSet':
        """Same metadata, new values; derived quantities are cleared."""
        return replace(self, vectors=np.array(vectors, dtype=np.float64),
                       energies=None, residual_norms=None)

    def refreshed(self, A: SparseMatrix) -> 'TestVectorSet':
        AV = A @ self.vectors
        return replace(self, energies=np.einsum('ik,ik->k', AV, self.vectors),
                       residual_norms=np.linalg.norm(AV, axis=0))

    def select(self, mask) -> 'TestVectorSet':
        idx = np.flatnonzero(np.asarray(mask, dtype=bool))
        pick = lambda arr: None if arr is None else np.asarray(arr)[idx]
        return TestVectorSet(vectors=self.vectors[:, idx], origin=tuple(self.origin[i] for i in idx),
                             eigenvalues=pick(self.eigenvalues), energies=pick(self.energies),
                             residual_norms=pick(self.residual_norms), weights=pick(self.weights))

    def combine(self, other: Optional['TestVectorSet']) -> 'TestVectorSet':
        if other is None or other.k == 0:
            return self
        if other.n != self.n:
            raise DimensionMismatchError(f"cannot combine sets of length {self.n} and {other.n}")
        return TestVectorSet(vectors=np.hstack([self.vectors, other.vectors]),
                             origin=self.origin + other.origin,
                             eigenvalues=np.concatenate([self.eigenvalues, other.eigenvalues]))

    def restricted(self, c_flags: np.ndarray) -> 'TestVectorSet':
        """Injection of every vector onto the C-points."""
        return TestVectorSet(vectors=self.vectors[np.asarray(c_flags, dtype=bool)], origin=self.origin,
                             eigenvalues=self.eigenvalues.copy())


@dataclass
class InterpolationOperator:
    """
    Interpolation P (fine <- coarse) with per-row diagnostics.

    Attributes:
        P: n x n_c CSR matrix, unit rows at C-points.
        sets: (n, caliber) padded fine indices of each F-row's C_i.
        fitness: Weighted LS residual per row (0 on C-rows).
        caliber: Maximum |C_i|.
        degenerate: Rows where all test vectors vanish on C_i.
        bad_fit: Rows whose fitness exceeds fit_tolerance.
        fit_tolerance: FIT_FACTOR times the median F-row fitness.
    """
    P: SparseMatrix
    sets: np.ndarray
    fitness: np.ndarray
    caliber: int
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    bad_fit: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    fit_tolerance: float = 0.0

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def n_c(self) -> int:
        return self.P.shape[1]

    def row_set(self, i: int) -> np.ndarray:
        s = self.sets[i]
        return s[s >= 0]


def _geometric_sets(part: Partition, meta: GridMeta, caliber: int) -> np.ndarray:
    if meta.n != part.n:
        raise DimensionMismatchError(f"grid has {meta.n} points, partition has {part.n}")
    nx, ny = meta.nx, meta.ny
    offsets_near = _COLLINEAR if meta.dim == 2 else ((-1, 0), (1, 0))
    offsets_far = _DIAGONAL if meta.dim == 2 else ()
    k = np.arange(meta.n)
    ix, jy = k % nx, k // nx

    def neighbours(offsets):
        cols = []
        for dx, dy in offsets:
            qi, qj = ix + dx, jy + dy
            valid = (qi >= 0) & (qi < nx) & (qj >= 0) & (qj < ny)
            q = np.where(valid, qj * nx + qi, 0)
            cols.append(np.where(valid & part.c_flags[q], q, -1))
        return np.stack(cols, axis=1) if cols else np.full((meta.n, 0), -1, dtype=int)

    near = neighbours(offsets_near)
    far = neighbours(offsets_far) if offsets_far else np.full_like(near, -1)
    cand = np.where((near >= 0).any(axis=1)[:, None], near, far)
    big = np.iinfo(int).max
    cand = np.sort(np.where(cand < 0, big, cand), axis=1)
    cand = np.where(cand == big, -1, cand)[:, :caliber]
    sets = np.full((meta.n, caliber), -1, dtype=int)
    sets[:, :cand.shape[1]] = cand
    sets[part.c_flags] = -1
    return sets


def _algebraic_sets(part: Partition, graph: StrengthGraph, caliber: int) -> np.ndarray:
    n = graph.n
    pattern = sp.csr_matrix((np.ones(graph.rows.size), (graph.rows, graph.cols)), shape=(n, n))
    reach = (pattern + pattern @ pattern).tocoo()
    keep = (~part.c_flags[reach.row]) & part.c_flags[reach.col] & (reach.row != reach.col)
    rows, cols = reach.row[keep].astype(int), reach.col[keep].astype(int)
    if graph.vectors is None:
        mu = np.zeros(rows.size)
    else:
        mu = pairwise_distance(graph.vectors, rows, cols)
    order = np.lexsort((cols, mu, rows))
    rows, cols = rows[order], cols[order]
    starts = np.searchsorted(rows, rows, side='left')
    rank = np.arange(rows.size) - starts
    take = rank < caliber
    sets = np.full((n, caliber), -1, dtype=int)
    sets[rows[take], rank[take]] = cols[take]
    return sets


def select_interp_sets(part: Partition, source: Union[GridMeta, StrengthGraph],
                       caliber: int = GEOMETRIC_CALIBER) -> np.ndarray:
    """
    Interpolatory sets C_i for every F-point.

    Geometric mode (source is a GridMeta): the C-points among the four
    collinear neighbors if any, otherwise among the four diagonal neighbors.
    Under full coarsening this gives 2 collinear neighbors on coarse lines and
    4 diagonal neighbors at cell centers.

    Algebraic mode (source is a StrengthGraph): the `caliber` coarse points of
    smallest algebraic distance within graph distance 2, ties by index.

    Args:
        part: C/F splitting.
        source: GridMeta or StrengthGraph.
        caliber: Maximum |C_i|.

    Returns:
        (n, caliber) padded index array; C-rows are all -1.

    Raises:
        IsolatedPointError: If an F-point has no candidate.
    """
    if caliber < 1:
        raise ValueError(f"caliber must be >= 1, got {caliber}")
    if isinstance(source, GridMeta):
        sets = _geometric_sets(part, source, caliber)
    else:
        sets = _algebraic_sets(part, source, caliber)
    empty = np.flatnonzero(~part.c_flags & (sets < 0).all(axis=1))
    if empty.size:
        raise IsolatedPointError(int(empty[0]))
    return sets


def ls_weights(V: TestVectorSet, A: SparseMatrix, mode: str = 'a_norm',
               T: Optional[SparseMatrix] = None) -> np.ndarray:
    """
    Global LS weights, normalized so the largest is 1.

    a_norm: omega = <T v, v> / <A v, v> (T = identity on the finest level), so
    smooth vectors weigh more. azm: omega = 1 / ||A~ v|| with A~ the l1
    row-normalized matrix and v scaled to unit l2 norm. uniform: all ones.
    Null-space vectors receive WEIGHT_CAP.
    """
    if mode not in WEIGHT_MODES:
        raise ValueError(f"unknown weight mode '{mode}'")
    X = V.vectors
    if mode == 'uniform':
        return np.ones(V.k)
    if mode == 'a_norm':
        num = np.einsum('ik,ik->k', X, X) if T is None else np.einsum('ik,ik->k', T @ X, X)
        den = np.einsum('ik,ik->k', A @ X, X)
    else:
        Xu = X / np.linalg.norm(X, axis=0)
        num = np.ones(V.k)
        den = np.linalg.norm(normalize_l1(A).matrix @ Xu, axis=0)
    with np.errstate(divide='ignore', invalid='ignore'):
        w = np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), WEIGHT_CAP)
    w = np.minimum(w, WEIGHT_CAP)
    if (w <= 0).any():
        w = np.where(w <= 0, WEIGHT_CAP, w)
    return w / w.max()


def _solve_rows(targets: np.ndarray, samples: np.ndarray, w: np.ndarray
                ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Batched weighted LS fits.

    Args:
        targets: (m, k) values v_i^kappa.
        samples: (m, c, k) values v_j^kappa for j in C_i.
        w: (k,) weights.

    Returns:
        (coefficients (m, c), fitness (m,), degenerate (m,) flags).
    """
    m, c, _ = samples.shape
    G = np.einsum('mck,k,mdk->mcd', samples, w, samples)
    rhs = np.einsum('mck,k,mk->mc', samples, w, targets)
    trace = np.trace(G, axis1=1, axis2=2)
    degenerate = trace == 0.0

    eig = np.linalg.eigvalsh(G)
    singular = eig[:, 0] <= GRAM_RCOND * np.maximum(eig[:, -1], 0.0)
    shift = np.where(singular & ~degenerate, TIKHONOV_GAMMA * trace / c, 0.0)
    G = G + shift[:, None, None] * np.eye(c)
    G[degenerate] = np.eye(c)
    rhs[degenerate] = 0.0

    coef = np.linalg.solve(G, rhs[..., None])[..., 0]
    fit = np.einsum('mc,mck->mk', coef, samples)
    fitness = np.einsum('k,mk->m', w, (targets - fit) ** 2)
    return coef, fitness, degenerate


def ls_row(i: int, C_i: Sequence[int], V: TestVectorSet,
           weights: Optional[np.ndarray] = None) -> Tuple[np.ndarray, float]:
    """
    Minimizer of sum_kappa w_kappa (v_i - sum_j p_j v_j)^2 over j in C_i.

    Returns:
        (p, fitness) with fitness the functional value at p. A row where every
        test vector vanishes on C_i comes back as zeros.
    """
    C_i = np.asarray(C_i, dtype=int)
    if C_i.size < 1:
        raise ValueError("C_i must be non-empty")
    w = np.ones(V.k) if weights is None else np.asarray(weights, dtype=np.float64)
    coef, fitness, degenerate = _solve_rows(V.vectors[i][None, :], V.vectors[C_i][None, :, :], w)
    if degenerate[0]:
        logger.debug(f"row {i}: all test vectors vanish on C_i")
    return coef[0], float(fitness[0])


def lsr_update(V: TestVectorSet, A: SparseMatrix, fraction: float = LSR_FRACTION,
               rows: Optional[np.ndarray] = None) -> TestVectorSet:
    """
    Temporary residual-based correction of the test vectors.

    For each vector, the ceil(fraction * m) entries of largest |r_i| among the
    m eligible rows, with r = A v, are replaced by v_i - r_i / a_ii (ties by
    lower index). Every row is eligible unless `rows` is given. The input set
    is left untouched.

    Raises:
        DegenerateDiagonalError: If A has a zero diagonal entry.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0,1], got {fraction}")
    d = A.diagonal()
    zero = np.flatnonzero(d == 0.0)
    if zero.size:
        raise DegenerateDiagonalError(int(zero[0]))
    eligible = np.arange(V.n) if rows is None else np.sort(np.asarray(rows, dtype=int))
    X = V.vectors.copy()
    R = A @ X
    m = math.ceil(fraction * eligible.size)
    for kappa in range(V.k):
        top = eligible[np.argsort(-np.abs(R[eligible, kappa]), kind='stable')[:m]]
        X[top, kappa] -= R[top, kappa] / d[top]
    return V.with_vectors(X)


def build_interpolation(A: SparseMatrix, part: Partition, V: TestVectorSet, mode: str = 'ls',
                        sets: Optional[np.ndarray] = None,
                        source: Union[GridMeta, StrengthGraph, None] = None,
                        caliber: int = GEOMETRIC_CALIBER, weight_mode: str = 'a_norm',
                        T: Optional[SparseMatrix] = None,
                        lsr_fraction: float = LSR_FRACTION) -> InterpolationOperator:
    """
    Assemble P row by row from least-squares fits to the test vectors.

    Args:
        A: Level operator.
        part: C/F splitting.
        V: Test vectors on this level.
        mode: 'ls' or 'lsr' (F-point targets taken from LSR-corrected vectors).
        sets: Precomputed interpolatory sets; otherwise taken from `source`.
        source: GridMeta or StrengthGraph for select_interp_sets.
        caliber: Maximum |C_i|.
        weight_mode: 'a_norm', 'azm' or 'uniform'.
        T: Gram operator of this level, used by a_norm weights.
        lsr_fraction: Share of entries corrected in 'lsr' mode.

    Returns:
        The interpolation operator with per-row fitness and flags.
    """
    if mode not in INTERP_MODES:
        raise ValueError(f"unknown interpolation mode '{mode}'")
    if V.n != part.n or A.shape[0] != part.n:
        raise DimensionMismatchError(f"A {A.shape}, partition {part.n} and vectors {V.n} disagree")
    if sets is None:
        if source is None:
            raise ValueError("need either precomputed sets or a GridMeta / StrengthGraph source")
        sets = select_interp_sets(part, source, caliber)

    w = ls_weights(V, A, weight_mode, T) if V.weights is None else np.asarray(V.weights)
    # LSR corrects the F-point targets only; C-point samples keep their values
    X = V.vectors
    targets = lsr_update(V, A, lsr_fraction, rows=part.F).vectors if mode == 'lsr' else X

    n, coarse_of = part.n, part.coarse_index()
    fitness = np.zeros(n)
    degenerate = np.zeros(n, dtype=bool)
    rows, cols, vals = [part.C], [coarse_of[part.C]], [np.ones(part.n_c)]

    sizes = (sets >= 0).sum(axis=1)
    f_rows = part.F
    isolated = f_rows[sizes[f_rows] == 0]
    if isolated.size:
        raise IsolatedPointError(int(isolated[0]))
    for c in np.unique(sizes[f_rows]):
        grp = f_rows[sizes[f_rows] == c]
        idx = np.sort(sets[grp], axis=1)[:, -c:]
        coef, fit, deg = _solve_rows(targets[grp], X[idx], w)
        fitness[grp], degenerate[grp] = fit, deg
        rows.append(np.repeat(grp, c))
        cols.append(coarse_of[idx].ravel())
        vals.append(coef.ravel())

    P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, part.n_c))
    P = as_csr(P)

    tol = FIT_FACTOR * float(np.median(fitness[f_rows])) if f_rows.size else 0.0
    bad_fit = np.zeros(n, dtype=bool)
    bad_fit[f_rows] = fitness[f_rows] > tol
    if degenerate.any():
        logger.warning(f"{int(degenerate.sum())} interpolation rows have vanishing test vectors")
    logger.debug(f"interpolation ({mode}): n={n}, n_c={part.n_c}, bad fits={int(bad_fit.sum())}, "
                 f"median fitness={tol / FIT_FACTOR if f_rows.size else 0.0:.3e}")
    return InterpolationOperator(P=P, sets=sets, fitness=fitness, caliber=sets.shape[1],
                                 degenerate=degenerate, bad_fit=bad_fit, fit_tolerance=tol)
