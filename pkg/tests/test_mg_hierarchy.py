import numpy as np
import pytest

from bamgx.pipeline.bootstrap_setup import init_test_vectors, relax_tvs
from bamgx.pipeline.cr_coarsening import CoarseningConfig
from bamgx.pipeline.errors import DimensionMismatchError, SpecificationError
from bamgx.pipeline.ls_interp import InterpConfig
from bamgx.pipeline.mg_hierarchy import (CycleSpec, StopCriteria, build_hierarchy, coarsen_level, cycle,
                                         estimate_asymptotic_rate, iteration_rate, single_level)
from bamgx.pipeline.problem_gen import fd_poisson
from bamgx.pipeline.smoothing import SmootherSpec
from bamgx.pipeline.sparse_core import galerkin
from bamgx.utils.dense_error_operator import (cycle_error_operator, eig_spectral_radius, power_spectral_radius,
                                              two_grid_error_operator)

GS = SmootherSpec()


def _smooth_vectors(A, k=8, eta=10, seed=0):
    return relax_tvs(A, init_test_vectors(A.shape[0], k, seed=seed), GS, eta=eta)


@pytest.fixture(scope='module')
def poisson_two_level():
    A, meta = fd_poisson(15)
    hier = build_hierarchy(A, meta, _smooth_vectors(A), stop=StopCriteria(coarsest_nx=7))
    return A, hier


@pytest.fixture(scope='module')
def poisson_three_level():
    A, meta = fd_poisson(31)
    hier = build_hierarchy(A, meta, _smooth_vectors(A), stop=StopCriteria(coarsest_nx=7))
    return A, hier


def test_cycle_spec_label_and_validation():
    assert CycleSpec().label == 'V(2,2)'
    assert CycleSpec(pre_sweeps=1, post_sweeps=1, cycle_index=2).label == 'W(1,1)'
    with pytest.raises(ValueError):
        CycleSpec(pre_sweeps=0, post_sweeps=0)
    with pytest.raises(ValueError):
        CycleSpec(cycle_index=3)


def test_single_level_solves_exactly():
    A, _ = fd_poisson(5)
    hier = single_level(A)
    b = np.arange(A.shape[0], dtype=float)
    x = cycle(hier, CycleSpec(), 0, np.zeros_like(b), b)
    np.testing.assert_allclose(A @ x, b, rtol=1e-10, atol=1e-10)
    assert hier.operator_complexity() == 1.0


def test_hierarchy_levels_and_galerkin(poisson_three_level):
    A, hier = poisson_three_level
    assert [lv.n for lv in hier.levels] == [961, 225, 49]
    assert [lv.meta.nx for lv in hier.levels] == [31, 15, 7]
    for l in range(hier.coarsest):
        lv, nxt = hier[l], hier[l + 1]
        np.testing.assert_allclose(nxt.A.toarray(), galerkin(lv.A, lv.P).toarray(), rtol=1e-12, atol=1e-12)
    comp = hier[2].composite_P
    assert comp.shape == (961, 49)
    np.testing.assert_allclose(hier[2].gram_T.toarray(), (comp.T @ comp).toarray(), rtol=1e-10, atol=1e-12)
    assert hier[2].part is None and hier[2].P_down is None


def test_hierarchy_summary(poisson_three_level):
    _, hier = poisson_three_level
    summary = hier.summary()
    assert summary['n_levels'] == 3
    assert summary['sizes'] == [961, 225, 49]
    assert 1.0 < summary['operator_complexity'] < 2.5


def test_cycle_converges_on_poisson(poisson_three_level):
    _, hier = poisson_three_level
    est = estimate_asymptotic_rate(hier, CycleSpec(), seeds=3)
    assert not est.diverged
    assert est.rho < 0.6
    assert est.rho_min <= est.rho <= est.rho_max
    w_est = estimate_asymptotic_rate(hier, CycleSpec(cycle_index=2), seeds=3)
    assert w_est.rho < 0.6


def test_cycle_dimension_mismatch(poisson_two_level):
    _, hier = poisson_two_level
    with pytest.raises(DimensionMismatchError):
        cycle(hier, CycleSpec(), 0, np.zeros(10), np.zeros(10))


def test_cycle_matches_two_grid_error_operator(poisson_two_level):
    A, hier = poisson_two_level
    spec = CycleSpec(pre_sweeps=1, post_sweeps=2)
    E = cycle_error_operator(hier, spec)
    E2 = two_grid_error_operator(A, hier[0].P, spec.smoother, pre_sweeps=1, post_sweeps=2)
    np.testing.assert_allclose(E, E2, atol=1e-10)


def test_rate_estimate_matches_spectral_radius(poisson_two_level):
    _, hier = poisson_two_level
    spec = CycleSpec()
    E = cycle_error_operator(hier, spec)
    radius = eig_spectral_radius(E)
    assert radius < 1.0
    assert power_spectral_radius(E) == pytest.approx(radius, abs=0.05)
    est = estimate_asymptotic_rate(hier, spec, seeds=3)
    assert est.rho == pytest.approx(radius, abs=0.05)


def test_iteration_rate_examples():
    norm = np.linalg.norm
    x0 = np.ones(4)
    rho, iters, diverged = iteration_rate(lambda e: 0.5 * e, x0, norm, max_iters=100)
    assert rho == pytest.approx(0.5) and iters == 100 and not diverged
    assert iteration_rate(lambda e: 0.0 * e, x0, norm) == (0.0, 1, False)
    assert iteration_rate(lambda e: 2.0 * e, x0, norm) == (2.0, 5, True)


def test_estimate_with_custom_step():
    A, _ = fd_poisson(3)
    hier = single_level(A)
    est = estimate_asymptotic_rate(hier, CycleSpec(), seeds=3, max_iters=40, step=lambda e: 0.5 * e)
    assert est.rho == pytest.approx(0.5)
    assert est.per_seed == pytest.approx([0.5] * 3)
    assert est.iterations == [40] * 3
    est_a = estimate_asymptotic_rate(hier, CycleSpec(), seeds=[7], max_iters=40, norm='a', step=lambda e: 0.5 * e)
    assert est_a.rho == pytest.approx(0.5) and est_a.norm == 'a'
    with pytest.raises(ValueError):
        estimate_asymptotic_rate(hier, CycleSpec(), norm='max', step=lambda e: e)


def test_stop_criteria():
    A, meta = fd_poisson(15)
    hier = build_hierarchy(A, meta, _smooth_vectors(A))
    assert len(hier) == 1
    hier = build_hierarchy(A, meta, _smooth_vectors(A), stop=StopCriteria(max_levels=2, coarsest_nx=1))
    assert len(hier) == 2


def test_algebraic_stop_keeps_a_level_of_exactly_the_limit():
    A, _ = fd_poisson(15)
    stop = StopCriteria(coarsest_size=225)
    assert not stop.reached(1, single_level(A)[0])
    assert stop.reached(1, single_level(A[:224, :224])[0])
    assert StopCriteria(max_levels=1).reached(1, single_level(A)[0])


def test_truncate_drops_coarse_levels():
    A, meta = fd_poisson(31)
    hier = build_hierarchy(A, meta, _smooth_vectors(A), stop=StopCriteria(coarsest_nx=7))
    hier.truncate(2)
    assert len(hier) == 2 and hier[1].P_down is None
    b = np.ones(225)
    np.testing.assert_allclose(hier[1].A @ hier.coarse_solve(b), b, rtol=1e-9)


def test_geometric_coarsening_needs_meta():
    A, _ = fd_poisson(7)
    with pytest.raises(SpecificationError):
        coarsen_level(A, None, _smooth_vectors(A), CoarseningConfig(), InterpConfig(), GS)


def test_cr_hierarchy_without_grid():
    A, _ = fd_poisson(15)
    coarsening = CoarseningConfig(method='cr')
    hier = build_hierarchy(A, None, _smooth_vectors(A, eta=20), coarsening=coarsening,
                           stop=StopCriteria(max_levels=2))
    assert len(hier) == 2
    assert 0 < hier[1].n < hier[0].n
    assert hier[1].meta is None
    assert hier[0].cr_reports and hier[0].cr_reports[0].stage == 0
    est = estimate_asymptotic_rate(hier, CycleSpec(), seeds=2)
    assert est.rho < 1.0


def test_coarse_correction_is_variational(poisson_three_level):
    A, hier = poisson_three_level
    P = hier[0].P
    coarse = hier[1].A
    e = np.random.default_rng(3).standard_normal(A.shape[0])
    ec = np.linalg.solve(coarse.toarray(), P.T @ (A @ e))
    corrected = e - P @ ec
    assert np.linalg.norm(P.T @ (A @ corrected)) <= 1e-10 * np.linalg.norm(P.T @ (A @ e))


@pytest.mark.parametrize('cycle_index', [1, 2])
def test_cycles_never_increase_the_energy_norm(poisson_three_level, cycle_index):
    A, hier = poisson_three_level
    spec = CycleSpec(pre_sweeps=1, post_sweeps=1, cycle_index=cycle_index)
    e = np.random.default_rng(11).standard_normal(A.shape[0])
    zero = np.zeros_like(e)
    energy = [float(np.sqrt(e @ (A @ e)))]
    for _ in range(10):
        e = cycle(hier, spec, 0, e, zero)
        energy.append(float(np.sqrt(e @ (A @ e))))
    assert all(b <= a * (1.0 + 1e-12) for a, b in zip(energy, energy[1:]))
    assert energy[-1] < energy[0]


def test_cr_hierarchy_covers_every_fine_point():
    A, _ = fd_poisson(15)
    V = _smooth_vectors(A, eta=4)
    for rule in ('rate', 'fixed'):
        hier = build_hierarchy(A, None, V, coarsening=CoarseningConfig(method='cr', candidate_rule=rule),
                               stop=StopCriteria(max_levels=2))
        P_op = hier[0].P_down
        sizes = (P_op.sets >= 0).sum(axis=1)
        assert (sizes[hier[0].part.F] >= 1).all()
