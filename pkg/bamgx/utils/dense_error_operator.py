import numpy as np
import scipy.linalg as sla

from bamgx.pipeline.mg_hierarchy import CycleSpec, Hierarchy, cycle
from bamgx.pipeline.smoothing import SmootherSpec, smooth
from bamgx.pipeline.sparse_core import SparseMatrix, galerkin

POWER_STEPS = 1000  # power iterations for the spectral radius
DENSE_MAX = 4096  # refuse to assemble larger operators


def _check_size(n):
    if n > DENSE_MAX:
        raise ValueError(f"dense error operator limited to n <= {DENSE_MAX}, got {n}")


def smoother_matrix(A: SparseMatrix, spec: SmootherSpec, sweeps: int) -> np.ndarray:
    """
    Dense error propagation of `sweeps` smoothing sweeps on A e = 0,
    assembled column by column.
    """
    n = A.shape[0]
    _check_size(n)
    S = np.eye(n)
    if sweeps == 0:
        return S
    zero = np.zeros(n)
    for j in range(n):
        S[:, j] = smooth(spec, A, S[:, j], zero, sweeps=sweeps)
    return S


def two_grid_error_operator(A: SparseMatrix, P: SparseMatrix, spec: SmootherSpec,
                            pre_sweeps: int = 2, post_sweeps: int = 2) -> np.ndarray:
    """
    E = S^post (I - P Ac^{-1} P^T A) S^pre with Ac = P^T A P solved exactly.
    """
    n = A.shape[0]
    _check_size(n)
    Ad = A.toarray()
    Pd = P.toarray()
    Ac = galerkin(A, P).toarray()
    coarse = Pd @ sla.cho_solve(sla.cho_factor(Ac, lower=True), Pd.T @ Ad)
    K = np.eye(n) - coarse
    return smoother_matrix(A, spec, post_sweeps) @ K @ smoother_matrix(A, spec, pre_sweeps)


def cycle_error_operator(hier: Hierarchy, spec: CycleSpec) -> np.ndarray:
    """Dense E of one solve cycle on the finest level (columns are cycles applied to unit vectors)."""
    n = hier[0].n
    _check_size(n)
    E = np.eye(n)
    zero = np.zeros(n)
    for j in range(n):
        E[:, j] = cycle(hier, spec, 0, E[:, j], zero)
    return E


def power_spectral_radius(E: np.ndarray, steps: int = POWER_STEPS, seed: int = 0) -> float:
    """Spectral radius of E from `steps` normalized power iterations (ratio of the last two norms)."""
    x = np.random.default_rng(seed).standard_normal(E.shape[0])
    x /= np.linalg.norm(x)
    rho = 0.0
    for _ in range(steps):
        y = E @ x
        rho = np.linalg.norm(y)
        if rho == 0.0:
            return 0.0
        x = y / rho
    return float(rho)


def eig_spectral_radius(E: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(E))))
