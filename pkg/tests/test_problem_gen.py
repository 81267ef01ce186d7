import numpy as np
import pytest

from bamgx.pipeline.errors import ResolutionError, SpecificationError
from bamgx.pipeline.problem_gen import (FOUR_REGION_SPEC, DiffusionRegionSpec, GridMeta, JumpSpec, element_matrix,
                                        fd_poisson, fe_diffusion, four_region, jump_permeability, make_problem)
from bamgx.pipeline.sparse_core import is_symmetric


def _interior_mask(meta, layer=1):
    gi, gj = meta.grid_coords()
    return (gi > layer) & (gi <= meta.nx - layer) & (gj > layer) & (gj <= meta.ny - layer)


def _assert_spd(A, seed=0):
    assert is_symmetric(A)
    rng = np.random.default_rng(seed)
    for _ in range(20):
        x = rng.standard_normal(A.shape[0])
        assert np.dot(A @ x, x) > 0.0


def test_fd_poisson_single_point():
    A, meta = fd_poisson(1)
    np.testing.assert_array_equal(A.toarray(), [[16.0]])
    assert meta.h == 0.5 and meta.n == 1


def test_fd_poisson_stencil_and_row_sums():
    A, meta = fd_poisson(7)
    row_sums = np.asarray(A.sum(axis=1)).ravel()
    inner = _interior_mask(meta)
    assert np.all(np.diff(A.indptr)[inner] == 5)
    np.testing.assert_array_equal(row_sums[inner], 0.0)
    assert np.all(row_sums[~inner] > 0.0)
    _assert_spd(A)


def test_fd_poisson_smallest_eigenvalue():
    A, meta = fd_poisson(3)
    lam = np.linalg.eigvalsh(A.toarray())
    expected = 2.0 * (4.0 / meta.h**2) * np.sin(np.pi * meta.h / 2.0) ** 2
    assert lam[0] == pytest.approx(expected, rel=1e-12)


def test_fd_poisson_one_dimensional():
    A, meta = fd_poisson(5, dim=1)
    assert A.shape == (5, 5) and meta.dim == 1
    np.testing.assert_allclose(A.toarray()[2, 1:4], np.array([-1.0, 2.0, -1.0]) * 36.0)


def test_fd_poisson_rejects_empty_grid():
    with pytest.raises(ValueError):
        fd_poisson(0)


def test_grid_meta_index_bijection():
    meta = GridMeta(nx=4, ny=3, h=0.2)
    gi, gj = meta.grid_coords()
    idx = meta.index(gi - 1, gj - 1)
    np.testing.assert_array_equal(idx, np.arange(meta.n))
    coarse = GridMeta(nx=7, ny=7, h=0.125).coarsened()
    assert (coarse.nx, coarse.ny, coarse.h) == (3, 3, 0.25)


def _element_oracle(h, a, b, c, d):
    """Closed-form Q1 integrals on a square, node order (0,0),(1,0),(1,1),(0,1)."""
    kxx = np.array([[2, -2, -1, 1], [-2, 2, 1, -1], [-1, 1, 2, -2], [1, -1, -2, 2]]) / 6.0
    kyy = np.array([[2, 1, -1, -2], [1, 2, -2, -1], [-1, -2, 2, 1], [-2, -1, 1, 2]]) / 6.0
    sx = np.array([-1, 1, 1, -1])
    sy = np.array([-1, -1, 1, 1])
    kxy = (np.outer(sx, sy) + np.outer(sy, sx)) / 4.0
    mass = np.array([[4, 2, 1, 2], [2, 4, 2, 1], [1, 2, 4, 2], [2, 1, 2, 4]]) / 36.0
    return a * kxx + b * kyy + c * kxy + d * h**2 * mass


def test_element_matrix_matches_closed_form():
    region = DiffusionRegionSpec(box=(0, 1, 0, 1), epsilon=0.01, theta=np.pi / 4)
    a, b, c = region.tensor()
    h = 1.0 / 16
    np.testing.assert_allclose(element_matrix(h, a, b, c, 3.0), _element_oracle(h, a, b, c, 3.0),
                               rtol=1e-12, atol=1e-14)


def test_fe_isotropic_is_q1_laplacian():
    region = DiffusionRegionSpec(box=(0, 1, 0, 1), epsilon=1.0, theta=0.7)
    A, meta = fe_diffusion(7, [region])
    centre = meta.index(3, 3)
    row = A.getrow(centre)
    assert row.nnz == 9
    assert A[centre, centre] == pytest.approx(8.0 / 3.0, rel=1e-12)
    assert A[centre, meta.index(2, 2)] == pytest.approx(-1.0 / 3.0, rel=1e-12)
    assert row.sum() == pytest.approx(0.0, abs=1e-12)
    _assert_spd(A)


def test_fe_constant_annihilated_away_from_boundary():
    A, meta = fe_diffusion(9, [DiffusionRegionSpec(box=(0, 1, 0, 1), epsilon=0.1, theta=0.3)])
    r = A @ np.ones(meta.n)
    np.testing.assert_allclose(r[_interior_mask(meta)], 0.0, atol=1e-12)


def test_fe_regions_must_partition():
    with pytest.raises(SpecificationError):
        fe_diffusion(7, [DiffusionRegionSpec(box=(0, 0.5, 0, 1))])
    with pytest.raises(SpecificationError):
        fe_diffusion(7, [DiffusionRegionSpec(box=(0, 1, 0, 1)), DiffusionRegionSpec(box=(0, 0.5, 0, 0.5))])
    with pytest.raises(SpecificationError):
        DiffusionRegionSpec(box=(0, 1, 0, 1), epsilon=0.0)


def test_four_region_layout():
    assert [r.name for r in FOUR_REGION_SPEC] == ['bottom_left', 'bottom_right', 'top_left', 'top_right']
    A, meta = four_region(15)
    _assert_spd(A)
    assert meta.region_of(1, 1) == 'bottom_left'
    assert meta.region_of(13, 1) == 'bottom_right'
    assert meta.region_of(1, 13) == 'top_left'
    assert meta.region_of(13, 13) == 'top_right'
    # mass-dominated quadrant carries the 1e4 h^2 mass contribution on the diagonal
    assert A[meta.index(1, 1), meta.index(1, 1)] > A[meta.index(13, 1), meta.index(13, 1)]


def test_jump_without_contrast_matches_isotropic():
    A, _ = jump_permeability(15, JumpSpec(exponent=0, tiling=1))
    B, _ = fe_diffusion(15, [DiffusionRegionSpec(box=(0, 1, 0, 1))])
    np.testing.assert_allclose(A.toarray(), B.toarray(), rtol=1e-14, atol=1e-14)


def test_jump_single_inclusion_layout():
    spec = JumpSpec(exponent=-2, tiling=1)
    n = 31
    A, meta = jump_permeability(n, spec)
    _assert_spd(A)
    centres = (np.arange(n + 1) + 0.5) / (n + 1)
    yc, xc = np.meshgrid(centres, centres, indexing='ij')
    k = spec.coefficient(xc, yc)
    assert int((k == 1.0).sum()) == 16 * 16
    inside = (xc > 0.25) & (xc < 0.75) & (yc > 0.25) & (yc < 0.75)
    np.testing.assert_array_equal(k == 1.0, inside)
    np.testing.assert_allclose(k[~inside], 1e-2)
    assert meta.region_of(15, 15) == 'inclusion'
    assert meta.region_of(0, 0) == 'matrix'


def test_jump_unresolvable_tiling():
    with pytest.raises(ResolutionError):
        jump_permeability(31, JumpSpec(exponent=-2, tiling=16))
    assert JumpSpec(exponent=-8, tiling=16).resolvable(63)


def test_make_problem_dispatch():
    A, meta = make_problem('jump', 15, {'tiling': 4, 'exponent': -8})
    assert A.shape == (225, 225)
    with pytest.raises(SpecificationError):
        make_problem('helmholtz', 15)
