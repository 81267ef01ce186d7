"""
Sparse Core Module for bamgx Pipeline

Kernels shared by every other stage: matrix-vector products, residuals,
energy norms, l1 row normalization, Rayleigh quotients and the Galerkin
triple product. Matrices are scipy CSR with sorted, duplicate-free column
indices in float64; vectors are 1-D numpy arrays.
"""

from dataclasses import dataclass
from typing import Optional, Union

import logging
import numpy as np
import scipy.sparse as sp

from bamgx.pipeline.errors import (DimensionMismatchError, IndefiniteMatrixError,
                                   DegenerateRowError, DegenerateVectorError)

logger = logging.getLogger(__name__)

SparseMatrix = sp.csr_matrix

SYMMETRY_RTOL = 1e-12  # relative tolerance for the symmetry check
INDEFINITE_TOL = 1e-10  # <Ax,x> below -tol*||x||^2 signals a non-SPD matrix


def as_csr(A) -> SparseMatrix:
    """
    Canonicalize any scipy sparse or dense 2-D input to float64 CSR with
    sorted indices and no duplicates or explicit zeros.
    """
    A = sp.csr_matrix(A, dtype=np.float64)
    A.sum_duplicates()
    A.eliminate_zeros()
    A.sort_indices()
    return A


def identity(n: int) -> SparseMatrix:
    return sp.identity(n, dtype=np.float64, format='csr')


def is_symmetric(A: SparseMatrix, rtol: float = SYMMETRY_RTOL) -> bool:
    """True when every (i,j) entry equals (j,i) to within rtol relative to max|A|."""
    if A.shape[0] != A.shape[1]:
        return False
    scale = abs(A).max() if A.nnz else 0.0
    if scale == 0.0:
        return True
    diff = A - A.T
    return (abs(diff).max() if diff.nnz else 0.0) <= rtol * scale


def _check_matvec(A: SparseMatrix, x: np.ndarray) -> None:
    if x.ndim != 1 or x.shape[0] != A.shape[1]:
        raise DimensionMismatchError(
            f"matrix has {A.shape[1]} columns but vector has shape {x.shape}")


def spmv(A: SparseMatrix, x: np.ndarray) -> np.ndarray:
    """
    Sparse matrix-vector product y = A x.

    Rows are accumulated in row-major, ascending-column order, so results are
    bit-reproducible for a fixed build.

    Raises:
        DimensionMismatchError: If len(x) != A.shape[1].
    """
    x = np.asarray(x, dtype=np.float64)
    _check_matvec(A, x)
    return A @ x


def residual(A: SparseMatrix, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """r = b - A x."""
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 1 or b.shape[0] != A.shape[0]:
        raise DimensionMismatchError(
            f"matrix has {A.shape[0]} rows but right-hand side has shape {b.shape}")
    return b - spmv(A, x)


def energy(A: SparseMatrix, x: np.ndarray) -> float:
    """<A x, x> without the sign check."""
    return float(np.dot(spmv(A, x), x))


def a_norm(A: SparseMatrix, x: np.ndarray) -> float:
    """
    Energy norm sqrt(<A x, x>) of x for a symmetric positive definite A.

    Args:
        A: SPD matrix.
        x: Vector of length A.shape[1].

    Returns:
        The non-negative A-norm; 0.0 for x = 0.

    Raises:
        IndefiniteMatrixError: If <A x, x> < -1e-10 ||x||^2.
        DimensionMismatchError: On shape mismatch.
    """
    x = np.asarray(x, dtype=np.float64)
    e = energy(A, x)
    if e < 0.0:
        if e < -INDEFINITE_TOL * float(np.dot(x, x)):
            raise IndefiniteMatrixError(f"<Ax,x> = {e:.3e} < 0; matrix is not SPD")
        e = 0.0
    return float(np.sqrt(e))


@dataclass(frozen=True)
class NormalizedMatrix:
    """
    Row-scaled matrix diag(row_scales) @ base whose rows have unit l1 norm.

    Attributes:
        base: The unscaled CSR matrix.
        row_scales: Positive per-row factors 1 / ||row_i||_1.
    """
    base: SparseMatrix
    row_scales: np.ndarray

    @property
    def matrix(self) -> SparseMatrix:
        return as_csr(sp.diags(self.row_scales) @ self.base)

    def unscale(self) -> SparseMatrix:
        """Map the scaled matrix back to the base entries."""
        return as_csr(sp.diags(1.0 / self.row_scales) @ self.matrix)

    def scaled_residual(self, r: np.ndarray) -> np.ndarray:
        """Residual of the base system expressed in the scaled rows."""
        return self.row_scales * r


def normalize_l1(A: SparseMatrix) -> NormalizedMatrix:
    """
    Scale each row of A to unit l1 norm.

    Raises:
        DegenerateRowError: Naming the first all-zero row.
    """
    row_l1 = np.asarray(abs(A).sum(axis=1)).ravel()
    zero_rows = np.flatnonzero(row_l1 == 0.0)
    if zero_rows.size:
        raise DegenerateRowError(int(zero_rows[0]))
    return NormalizedMatrix(base=A, row_scales=1.0 / row_l1)


def rayleigh_quotient(A: SparseMatrix, B: Optional[SparseMatrix], x: np.ndarray) -> float:
    """
    Generalized Rayleigh quotient <A x, x> / <B x, x>; B=None means identity.

    Raises:
        DegenerateVectorError: If the denominator is zero.
    """
    x = np.asarray(x, dtype=np.float64)
    num = energy(A, x)
    den = float(np.dot(x, x)) if B is None else energy(B, x)
    if den == 0.0:
        raise DegenerateVectorError("Rayleigh quotient denominator <Bx,x> is zero")
    return num / den


def galerkin_triple_product(R: SparseMatrix, A: SparseMatrix, P: SparseMatrix) -> SparseMatrix:
    """
    Coarse operator R A P.

    When R is exactly the transpose of P the product is symmetrized as
    0.5 (Ac + Ac^T), so symmetry holds to round-off regardless of the order
    in which the sparse products were accumulated.

    Args:
        R: Restriction, n_c x n.
        A: Fine operator, n x n.
        P: Interpolation, n x n_c.

    Returns:
        The n_c x n_c coarse operator in canonical CSR.

    Raises:
        DimensionMismatchError: If inner dimensions disagree.
    """
    if R.shape[1] != A.shape[0] or A.shape[1] != P.shape[0]:
        raise DimensionMismatchError(
            f"cannot form RAP with R {R.shape}, A {A.shape}, P {P.shape}")
    Ac = as_csr(R @ as_csr(A @ P))
    if _is_transpose(R, P):
        Ac = as_csr(0.5 * (Ac + Ac.T))
    return Ac


def galerkin(A: SparseMatrix, P: SparseMatrix) -> SparseMatrix:
    """Variational coarse operator P^T A P."""
    return galerkin_triple_product(as_csr(P.T), A, P)


def _is_transpose(R: SparseMatrix, P: SparseMatrix) -> bool:
    if R.shape != (P.shape[1], P.shape[0]):
        return False
    diff = as_csr(R - P.T)
    return diff.nnz == 0


def inner(x: np.ndarray, y: np.ndarray, M: Union[SparseMatrix, None] = None) -> float:
    """<M x, y>; plain dot product when M is None."""
    return float(np.dot(x, y)) if M is None else float(np.dot(spmv(M, x), y))
