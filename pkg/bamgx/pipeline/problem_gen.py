"""
Problem Generation Module for bamgx Pipeline

Builds the model discretizations on the unit square with homogeneous
Dirichlet boundary conditions (boundary unknowns eliminated):

- 5-point finite-difference Poisson,
- bilinear (Q1) finite-element anisotropic diffusion with a mass term,
  assembled from axis-aligned regions,
- Q1 diffusion with a two-scale jumping permeability.

Every generator returns the matrix together with a GridMeta describing the
interior grid, which later stages use for geometric coarsening and
region-wise reporting.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import logging
import numpy as np
import scipy.sparse as sp

from bamgx.pipeline.errors import SpecificationError, ResolutionError
from bamgx.pipeline.sparse_core import SparseMatrix, as_csr

logger = logging.getLogger(__name__)

GAUSS_2x2 = np.array([-1.0, 1.0]) / np.sqrt(3.0)  # Gauss-Legendre nodes on [-1,1], unit weights
AREA_TOL = 1e-12  # tolerance on region box areas / overlaps


@dataclass(frozen=True)
class GridMeta:
    """
    Interior grid of a problem on the unit square.

    Point (i, j), 0 <= i < nx, 0 <= j < ny, sits at ((i+1) h, (j+1) h) and has
    linear index j * nx + i. ny == 1 describes a 1-D problem.

    Attributes:
        nx: Interior points along x.
        ny: Interior points along y.
        h: Mesh spacing 1 / (nx + 1).
        region_names: Labels referenced by region_index.
        region_index: Optional per-point region number (length nx*ny).
    """
    nx: int
    ny: int
    h: float
    region_names: Tuple[str, ...] = ()
    region_index: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    @property
    def n(self) -> int:
        return self.nx * self.ny

    @property
    def dim(self) -> int:
        return 1 if self.ny == 1 else 2

    def index(self, i, j):
        return j * self.nx + i

    def grid_coords(self) -> Tuple[np.ndarray, np.ndarray]:
        """1-based (i, j) grid coordinates of every point, in linear-index order."""
        k = np.arange(self.n)
        return k % self.nx + 1, k // self.nx + 1

    def points(self) -> Tuple[np.ndarray, np.ndarray]:
        gi, gj = self.grid_coords()
        return gi * self.h, (gj * self.h if self.dim == 2 else np.full(self.n, 0.5))

    def region_of(self, i: int, j: int) -> Optional[str]:
        if self.region_index is None:
            return None
        return self.region_names[self.region_index[self.index(i, j)]]

    def coarsened(self) -> 'GridMeta':
        """Meta of the full-coarsening grid (points with even 1-based coordinates)."""
        nx_c = self.nx // 2
        ny_c = self.ny // 2 if self.dim == 2 else 1
        region_index = None
        if self.region_index is not None:
            gi, gj = self.grid_coords()
            keep = (gi % 2 == 0) & ((gj % 2 == 0) | (self.dim == 1))
            region_index = self.region_index[keep]
        return GridMeta(nx=nx_c, ny=ny_c, h=1.0 / (nx_c + 1),
                        region_names=self.region_names, region_index=region_index)


@dataclass(frozen=True)
class DiffusionRegionSpec:
    """
    Constant coefficients on one axis-aligned box (x0, x1, y0, y1).

    The diffusion tensor is [[a, c], [c, b]] with
    a = cos^2 t + eps sin^2 t, b = eps cos^2 t + sin^2 t, c = (1 - eps) cos t sin t.
    """
    box: Tuple[float, float, float, float]
    epsilon: float = 1.0
    theta: float = 0.0
    mass: float = 0.0
    name: str = ''

    def __post_init__(self):
        x0, x1, y0, y1 = self.box
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise SpecificationError(f"region box {self.box} is not a subrectangle of [0,1]^2")
        if not 0.0 < self.epsilon <= 1.0:
            raise SpecificationError(f"epsilon must lie in (0,1], got {self.epsilon}")
        if self.mass < 0.0:
            raise SpecificationError(f"mass coefficient must be >= 0, got {self.mass}")

    def tensor(self) -> Tuple[float, float, float]:
        ct, st = np.cos(self.theta), np.sin(self.theta)
        a = ct**2 + self.epsilon * st**2
        b = self.epsilon * ct**2 + st**2
        c = (1.0 - self.epsilon) * ct * st
        return a, b, c

    def contains(self, x, y):
        x0, x1, y0, y1 = self.box
        return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)

    @property
    def area(self) -> float:
        x0, x1, y0, y1 = self.box
        return (x1 - x0) * (y1 - y0)


@dataclass(frozen=True)
class JumpSpec:
    """
    Two-scale permeability: 1 on tau^2 square inclusions of side 1/(2 tau),
    centered in a tau x tau macro-cell grid, and 10**exponent elsewhere.
    """
    exponent: int
    tiling: int

    def __post_init__(self):
        if self.tiling < 1:
            raise SpecificationError(f"tiling must be >= 1, got {self.tiling}")

    def resolvable(self, n_per_side: int) -> bool:
        return (n_per_side + 1) % (4 * self.tiling) == 0

    def in_inclusion(self, x, y):
        u = x * self.tiling - np.floor(x * self.tiling)
        v = y * self.tiling - np.floor(y * self.tiling)
        return (u > 0.25) & (u < 0.75) & (v > 0.25) & (v < 0.75)

    def coefficient(self, x, y):
        return np.where(self.in_inclusion(x, y), 1.0, 10.0 ** self.exponent)


# Four-region anisotropic problem with mass term
FOUR_REGION_SPEC = (
    DiffusionRegionSpec(box=(0.0, 0.5, 0.0, 0.5), epsilon=1.0, theta=0.0, mass=1e4, name='bottom_left'),
    DiffusionRegionSpec(box=(0.5, 1.0, 0.0, 0.5), epsilon=1.0, theta=0.0, mass=0.0, name='bottom_right'),
    DiffusionRegionSpec(box=(0.0, 0.5, 0.5, 1.0), epsilon=0.01, theta=0.0, mass=0.0, name='top_left'),
    DiffusionRegionSpec(box=(0.5, 1.0, 0.5, 1.0), epsilon=0.01, theta=np.pi / 2, mass=0.0, name='top_right'),
)


def _check_n(n_per_side: int) -> None:
    if int(n_per_side) < 1:
        raise ValueError(f"n_per_side must be >= 1, got {n_per_side}")


def _tridiag(n: int) -> SparseMatrix:
    return sp.diags([-np.ones(n - 1), 2.0 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format='csr')


def fd_poisson(n_per_side: int, dim: int = 2) -> Tuple[SparseMatrix, GridMeta]:
    """
    Five-point finite-difference Laplacian (three-point in 1-D) scaled by 1/h^2.

    Args:
        n_per_side: Interior points per axis, 1/h - 1.
        dim: 2 for the square (default) or 1 for the unit interval.

    Returns:
        (A, meta) with A SPD of size n_per_side**dim.
    """
    _check_n(n_per_side)
    n = int(n_per_side)
    h = 1.0 / (n + 1)
    T = _tridiag(n) / h**2
    if dim == 1:
        return as_csr(T), GridMeta(nx=n, ny=1, h=h)
    I = sp.identity(n, format='csr')
    A = sp.kron(I, T) + sp.kron(T, I)
    logger.debug(f"fd_poisson: n={n}, h={h:.5g}, size={n * n}")
    return as_csr(A), GridMeta(nx=n, ny=n, h=h)


def _reference_q1() -> Dict[str, np.ndarray]:
    """
    Reference 4x4 element integrals on a square element of side h, without
    the h factors: grad-grad parts are h-independent in 2-D and the mass
    part scales with h^2.

    Local node order: (0,0), (1,0), (1,1), (0,1).
    """
    corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
    mats = {key: np.zeros((4, 4)) for key in ('xx', 'yy', 'xy', 'mass')}
    for gx in GAUSS_2x2:
        for gy in GAUSS_2x2:
            phi = 0.25 * (1 + corners[:, 0] * gx) * (1 + corners[:, 1] * gy)
            # d/dxi scaled to physical derivative times h: (2/h) * h = 2
            dx = 0.25 * corners[:, 0] * (1 + corners[:, 1] * gy) * 2.0
            dy = 0.25 * corners[:, 1] * (1 + corners[:, 0] * gx) * 2.0
            jac = 0.25  # (h/2)^2 / h^2
            mats['xx'] += jac * np.outer(dx, dx)
            mats['yy'] += jac * np.outer(dy, dy)
            mats['xy'] += jac * (np.outer(dx, dy) + np.outer(dy, dx))
            mats['mass'] += jac * np.outer(phi, phi)
    return mats


def element_matrix(h: float, a: float, b: float, c: float, d: float) -> np.ndarray:
    """Q1 element matrix of -div(K grad u) + d u, K = [[a, c], [c, b]], on a square of side h."""
    ref = _reference_q1()
    return a * ref['xx'] + b * ref['yy'] + c * ref['xy'] + d * h**2 * ref['mass']


def _assemble_q1(n: int, a: np.ndarray, b: np.ndarray, c: np.ndarray, d: np.ndarray) -> SparseMatrix:
    """
    Assemble Q1 stiffness from per-element coefficients on the (n+1)^2 element
    mesh, eliminating boundary nodes. Coefficient arrays have shape (n+1, n+1)
    indexed [ej, ei].
    """
    h = 1.0 / (n + 1)
    ref = _reference_q1()
    ne = n + 1
    ej, ei = np.meshgrid(np.arange(ne), np.arange(ne), indexing='ij')
    ei, ej = ei.ravel(), ej.ravel()
    local = (a.ravel()[:, None, None] * ref['xx'] + b.ravel()[:, None, None] * ref['yy']
             + c.ravel()[:, None, None] * ref['xy'] + (d.ravel() * h**2)[:, None, None] * ref['mass'])

    # full-grid node coordinates of each element's four corners
    px = np.stack([ei, ei + 1, ei + 1, ei], axis=1)
    py = np.stack([ej, ej, ej + 1, ej + 1], axis=1)
    interior = (px >= 1) & (px <= n) & (py >= 1) & (py <= n)
    dof = np.where(interior, (py - 1) * n + (px - 1), -1)

    rows = np.repeat(dof[:, :, None], 4, axis=2)
    cols = np.repeat(dof[:, None, :], 4, axis=1)
    keep = (rows >= 0) & (cols >= 0)
    A = sp.coo_matrix((local[keep], (rows[keep], cols[keep])), shape=(n * n, n * n))
    A = as_csr(A)
    return as_csr(0.5 * (A + A.T))


def _element_centers(n: int) -> Tuple[np.ndarray, np.ndarray]:
    h = 1.0 / (n + 1)
    centers = (np.arange(n + 1) + 0.5) * h
    yc, xc = np.meshgrid(centers, centers, indexing='ij')
    return xc, yc


def _validate_regions(regions: Sequence[DiffusionRegionSpec]) -> None:
    if not regions:
        raise SpecificationError("at least one region is required")
    total = sum(r.area for r in regions)
    if abs(total - 1.0) > AREA_TOL:
        raise SpecificationError(f"region boxes cover area {total:.6g}, expected 1")
    for p, r in enumerate(regions):
        for s in regions[p + 1:]:
            wx = min(r.box[1], s.box[1]) - max(r.box[0], s.box[0])
            wy = min(r.box[3], s.box[3]) - max(r.box[2], s.box[2])
            if wx > AREA_TOL and wy > AREA_TOL:
                raise SpecificationError(f"regions {r.box} and {s.box} overlap")


def _lookup_region(regions: Sequence[DiffusionRegionSpec], x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Index of the first region (closed box, list order) containing each point; -1 if none."""
    out = np.full(x.shape, -1, dtype=int)
    for r_idx, region in enumerate(regions):
        hit = (out < 0) & region.contains(x, y)
        out[hit] = r_idx
    return out


def fe_diffusion(n_per_side: int,
                 regions: Sequence[DiffusionRegionSpec]) -> Tuple[SparseMatrix, GridMeta]:
    """
    Bilinear finite-element discretization of -div(K grad u) + d u on [0,1]^2.

    Each element takes the coefficients of the region containing its center.
    Mesh lines should align with region boundaries for the element assignment
    to reproduce the boxes exactly.

    Args:
        n_per_side: Interior nodes per axis.
        regions: Boxes partitioning the unit square.

    Returns:
        (A, meta); meta.region_index labels nodes by the first box containing them.

    Raises:
        SpecificationError: If the boxes do not partition the domain.
    """
    _check_n(n_per_side)
    n = int(n_per_side)
    regions = list(regions)
    _validate_regions(regions)

    xc, yc = _element_centers(n)
    owner = _lookup_region(regions, xc, yc)
    if (owner < 0).any():
        raise SpecificationError("region boxes leave part of the domain uncovered")
    tensors = np.array([r.tensor() for r in regions])
    masses = np.array([r.mass for r in regions])
    A = _assemble_q1(n, tensors[owner, 0], tensors[owner, 1], tensors[owner, 2], masses[owner])

    meta = GridMeta(nx=n, ny=n, h=1.0 / (n + 1),
                    region_names=tuple(r.name or f'region_{k}' for k, r in enumerate(regions)))
    px, py = meta.points()
    meta = GridMeta(nx=n, ny=n, h=meta.h, region_names=meta.region_names,
                    region_index=_lookup_region(regions, px, py))
    logger.debug(f"fe_diffusion: n={n}, regions={len(regions)}, nnz={A.nnz}")
    return A, meta


def four_region(n_per_side: int) -> Tuple[SparseMatrix, GridMeta]:
    """The four-region anisotropic problem with a mass-dominated bottom-left quadrant."""
    return fe_diffusion(n_per_side, FOUR_REGION_SPEC)


def jump_permeability(n_per_side: int, spec: JumpSpec) -> Tuple[SparseMatrix, GridMeta]:
    """
    Q1 diffusion with the piecewise-constant scalar permeability of spec.

    Raises:
        ResolutionError: If the grid does not align with the inclusion edges.
    """
    _check_n(n_per_side)
    n = int(n_per_side)
    if not spec.resolvable(n):
        raise ResolutionError(
            f"grid with h=1/{n + 1} does not resolve tiling {spec.tiling} "
            f"(needs (n+1) divisible by {4 * spec.tiling})")
    xc, yc = _element_centers(n)
    k = spec.coefficient(xc, yc)
    zero = np.zeros_like(k)
    A = _assemble_q1(n, k, k, zero, zero)

    meta = GridMeta(nx=n, ny=n, h=1.0 / (n + 1))
    px, py = meta.points()
    inside = _on_inclusion_edge(spec, px, py)
    meta = GridMeta(nx=n, ny=n, h=meta.h, region_names=('matrix', 'inclusion'),
                    region_index=inside.astype(int))
    return A, meta


def _on_inclusion_edge(spec: JumpSpec, x, y):
    u = x * spec.tiling - np.floor(x * spec.tiling)
    v = y * spec.tiling - np.floor(y * spec.tiling)
    tol = 1e-12
    return (u >= 0.25 - tol) & (u <= 0.75 + tol) & (v >= 0.25 - tol) & (v <= 0.75 + tol)


def make_problem(kind: str, n_per_side: int, params: Optional[Dict] = None) -> Tuple[SparseMatrix, GridMeta]:
    """
    Dispatch on a problem name from an experiment config.

    Args:
        kind: 'poisson', 'four_region' or 'jump'.
        n_per_side: Interior points per axis.
        params: Problem parameters ('exponent', 'tiling' for jump).
    """
    params = params or {}
    if kind == 'poisson':
        return fd_poisson(n_per_side)
    if kind == 'four_region':
        return four_region(n_per_side)
    if kind == 'jump':
        return jump_permeability(n_per_side, JumpSpec(exponent=int(params['exponent']),
                                                      tiling=int(params['tiling'])))
    raise SpecificationError(f"unknown problem kind '{kind}'")
