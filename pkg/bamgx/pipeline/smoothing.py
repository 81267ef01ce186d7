"""
Smoothing Module for bamgx Pipeline

Pointwise relaxation used for solving, test-vector generation, compatible
relaxation and eigenvector refinement:

- forward lexicographic Gauss-Seidel,
- weighted Jacobi,
- forward Kaczmarz (sequential row projections),

plus F-point relaxation with frozen C-values and the HCR step
(relax, then remove the l2 projection onto range(X^T)).

The sweep kernels are compiled with numba and walk the CSR arrays in
row-major, ascending-column order.
"""

from dataclasses import dataclass
from typing import Optional

import logging
import numba as nb
import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from bamgx.pipeline.errors import (DegenerateDiagonalError, DimensionMismatchError,
                                   SingularProjectionError)
from bamgx.pipeline.sparse_core import SparseMatrix, as_csr

logger = logging.getLogger(__name__)

# fastmath stays off: it would let the compiler reorder the row accumulations
_numba_setting = {'nogil': True, 'cache': True}

SMOOTHER_KINDS = ('gauss_seidel_lex', 'weighted_jacobi', 'kaczmarz')
JACOBI_WEIGHT = 2.0 / 3.0  # smoothing-optimal damping for the 5-point Laplacian
DENSE_PROJECTION_MAX = 4096  # X X^T is factored densely up to this many rows
PROJECTION_CG_RTOL = 1e-12
SINGULAR_PIVOT_RTOL = 1e-12  # Schur pivots of X X^T below this (relative to its diagonal) flag rank deficiency


@dataclass(frozen=True)
class SmootherSpec:
    """
    Relaxation method M.

    Attributes:
        kind: One of 'gauss_seidel_lex', 'weighted_jacobi', 'kaczmarz'.
        sweeps: Number of full sweeps per application.
        weight: Damping, used by weighted Jacobi only.
    """
    kind: str = 'gauss_seidel_lex'
    sweeps: int = 1
    weight: float = JACOBI_WEIGHT

    def __post_init__(self):
        if self.kind not in SMOOTHER_KINDS:
            raise ValueError(f"unknown smoother '{self.kind}', expected one of {SMOOTHER_KINDS}")
        if self.sweeps < 1:
            raise ValueError(f"sweeps must be >= 1, got {self.sweeps}")
        if not 0.0 < self.weight <= 1.0:
            raise ValueError(f"weight must lie in (0,1], got {self.weight}")


@nb.njit(**_numba_setting)
def _gauss_seidel_sweep(indptr, indices, data, diag, x, b, active):
    for i in range(x.shape[0]):
        if not active[i]:
            continue
        s = b[i]
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            if j != i:
                s -= data[p] * x[j]
        x[i] = s / diag[i]


@nb.njit(**_numba_setting)
def _kaczmarz_sweep(indptr, indices, data, x, b, active):
    for i in range(x.shape[0]):
        if not active[i]:
            continue
        r = b[i]
        nrm = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            r -= data[p] * x[indices[p]]
            if active[indices[p]]:
                nrm += data[p] * data[p]
        if nrm == 0.0:
            continue
        r /= nrm
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            if active[j]:
                x[j] += r * data[p]


def _diagonal(A: SparseMatrix, active: np.ndarray) -> np.ndarray:
    d = A.diagonal()
    bad = np.flatnonzero((d == 0.0) & active)
    if bad.size:
        raise DegenerateDiagonalError(int(bad[0]))
    return d


def _check_dims(A: SparseMatrix, x: np.ndarray, b: Optional[np.ndarray]) -> None:
    n = A.shape[0]
    if A.shape[1] != n or x.shape != (n,) or (b is not None and b.shape != (n,)):
        raise DimensionMismatchError(
            f"smoother needs square A and matching vectors, got A {A.shape}, x {x.shape}"
            + ("" if b is None else f", b {b.shape}"))


def _relax(spec: SmootherSpec, A: SparseMatrix, x: np.ndarray, b: np.ndarray,
           active: np.ndarray, sweeps: int) -> np.ndarray:
    if A.format != 'csr' or not A.has_sorted_indices:
        A = as_csr(A)
    x = np.array(x, dtype=np.float64, copy=True)
    if sweeps == 0 or not active.any():
        return x
    if spec.kind == 'kaczmarz':
        for _ in range(sweeps):
            _kaczmarz_sweep(A.indptr, A.indices, A.data, x, b, active)
        return x
    d = _diagonal(A, active)
    if spec.kind == 'gauss_seidel_lex':
        for _ in range(sweeps):
            _gauss_seidel_sweep(A.indptr, A.indices, A.data, d, x, b, active)
        return x
    for _ in range(sweeps):
        r = b - A @ x
        x[active] += spec.weight * r[active] / d[active]
    return x


def smooth(spec: SmootherSpec, A: SparseMatrix, x: np.ndarray, b: np.ndarray,
           sweeps: Optional[int] = None) -> np.ndarray:
    """
    Apply `spec.sweeps` relaxation sweeps to A x = b.

    Args:
        spec: Smoother description.
        A: Square CSR matrix.
        x: Initial guess (not modified).
        b: Right-hand side.
        sweeps: Optional override of spec.sweeps (0 allowed).

    Returns:
        The relaxed iterate as a new array.

    Raises:
        DegenerateDiagonalError: Gauss-Seidel or Jacobi on a zero diagonal entry.
        DimensionMismatchError: On shape mismatch.
    """
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_dims(A, x, b)
    active = np.ones(A.shape[0], dtype=np.bool_)
    return _relax(spec, A, x, b, active, spec.sweeps if sweeps is None else sweeps)


def f_relax(spec: SmootherSpec, A: SparseMatrix, c_flags: np.ndarray, x: np.ndarray,
            sweeps: Optional[int] = None) -> np.ndarray:
    """
    Relax the homogeneous system on F-rows only, C-values frozen.

    Args:
        spec: Smoother description.
        A: Square CSR matrix.
        c_flags: Boolean mask, True at C-points (a Partition's c_flags).
        x: Current vector on all points.
        sweeps: Optional override of spec.sweeps.

    Returns:
        New vector equal to x on C.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_dims(A, x, None)
    active = ~np.asarray(c_flags, dtype=np.bool_)
    return _relax(spec, A, x, np.zeros_like(x), active, spec.sweeps if sweeps is None else sweeps)


class ProjectionSolver:
    """
    Factored X X^T for repeated l2 projections pi = X^T (X X^T)^{-1} X.

    Dense Cholesky up to DENSE_PROJECTION_MAX rows, conjugate gradients
    beyond that.
    """

    def __init__(self, X: SparseMatrix):
        self.X = as_csr(X)
        self.XT = as_csr(self.X.T)
        self.gram = as_csr(self.X @ self.XT)
        n_c = self.X.shape[0]
        self._factor = None
        if n_c == 0:
            return
        if n_c <= DENSE_PROJECTION_MAX:
            G = self.gram.toarray()
            try:
                self._factor = sla.cho_factor(G, lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise SingularProjectionError(f"X X^T is not positive definite: {exc}") from exc
            # squared Cholesky diagonal = Schur pivots, O(eps) when rank deficient
            pivots = np.diag(self._factor[0]) ** 2
            if pivots.min() <= SINGULAR_PIVOT_RTOL * np.diag(G).max():
                raise SingularProjectionError("X X^T is numerically rank deficient")
        elif (self.gram.diagonal() == 0.0).any():
            raise SingularProjectionError("X has a zero row")

    def solve(self, y: np.ndarray) -> np.ndarray:
        if self._factor is not None:
            return sla.cho_solve(self._factor, y, check_finite=False)
        z, info = spla.cg(self.gram, y, rtol=PROJECTION_CG_RTOL, maxiter=10 * self.gram.shape[0])
        if info != 0:
            raise SingularProjectionError(f"CG on X X^T did not converge (info={info})")
        return z

    def project_out(self, e: np.ndarray) -> np.ndarray:
        """(I - pi) e."""
        if self.X.shape[0] == 0:
            return np.array(e, dtype=np.float64, copy=True)
        return e - self.XT @ self.solve(self.X @ e)


def hcr_apply(A: SparseMatrix, spec: SmootherSpec, X: SparseMatrix, e: np.ndarray,
              sweeps: Optional[int] = None, projector: Optional[ProjectionSolver] = None) -> np.ndarray:
    """
    One habituated-CR step (I - pi)(I - M A)^nu e.

    Args:
        A: Fine operator.
        spec: Smoother M; nu = spec.sweeps unless `sweeps` is given.
        X: n_c x n coarse-variable map with full row rank.
        e: Error vector.
        sweeps: Optional override of the sweep count (0 allowed).
        projector: Reusable factorization of X X^T.

    Returns:
        The new error, with X @ result = 0.

    Raises:
        SingularProjectionError: If X X^T is rank deficient.
    """
    e = np.asarray(e, dtype=np.float64)
    if X.shape[1] != e.shape[0]:
        raise DimensionMismatchError(f"X has {X.shape[1]} columns but e has length {e.shape[0]}")
    projector = projector or ProjectionSolver(X)
    relaxed = smooth(spec, A, e, np.zeros_like(e), sweeps=sweeps)
    return projector.project_out(relaxed)


def injection_operator(c_flags: np.ndarray) -> SparseMatrix:
    """Rows of the identity selecting C-points, the coarse-variable map of C/F splittings."""
    c_idx = np.flatnonzero(c_flags)
    n = len(c_flags)
    return sp.csr_matrix((np.ones(c_idx.size), (np.arange(c_idx.size), c_idx)), shape=(c_idx.size, n))
