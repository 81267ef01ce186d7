import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from bamgx.pipeline.bootstrap_setup import init_test_vectors, relax_tvs
from bamgx.pipeline.cr_coarsening import (CoarseningConfig, CrReport, Partition, StrengthGraph, algebraic_distance,
                                          candidate_scores, coupling_coefficient, cover_interpolation_gaps,
                                          cr_coarsen, estimate_cr_rate, full_coarsening, pairwise_distance,
                                          strength_graph, update_coarse_set, work_estimate)
from bamgx.pipeline.errors import DimensionMismatchError, UndefinedDistanceError
from bamgx.pipeline.ls_interp import select_interp_sets
from bamgx.pipeline.problem_gen import fd_poisson, four_region
from bamgx.pipeline.smoothing import SmootherSpec
from bamgx.pipeline.sparse_core import as_csr

GS = SmootherSpec()

st_trace = hnp.arrays(dtype=np.float64, shape=6, elements=st.floats(-5, 5)).filter(
    lambda v: np.dot(v, v) > 1e-6)


def _path_graph(n):
    rows = np.concatenate([np.arange(n - 1), np.arange(1, n)])
    cols = np.concatenate([np.arange(1, n), np.arange(n - 1)])
    return StrengthGraph(n=n, rows=rows, cols=cols, mu=np.zeros(rows.size), threshold=0.25)


def test_algebraic_distance_examples():
    V = np.array([[1.0, 2.0], [2.0, 4.0], [-2.0, 1.0]])
    assert algebraic_distance(V, 0, 1) == pytest.approx(0.0, abs=1e-15)
    assert algebraic_distance(V, 0, 2) == pytest.approx(1.0)
    W = np.array([[1.0, 0.0], [1.0, 1.0]])
    assert algebraic_distance(W, 0, 1) == pytest.approx(0.5)


def test_algebraic_distance_zero_trace():
    V = np.array([[0.0, 0.0], [1.0, 1.0]])
    with pytest.raises(UndefinedDistanceError):
        algebraic_distance(V, 0, 1)
    with pytest.raises(UndefinedDistanceError):
        coupling_coefficient(V, 1, 0)
    np.testing.assert_array_equal(pairwise_distance(V, np.array([0]), np.array([1])), [1.0])


@given(vi=st_trace, vj=st_trace)
def test_algebraic_distance_symmetric_and_bounded(vi, vj):
    V = np.vstack([vi, vj])
    mu = algebraic_distance(V, 0, 1)
    assert 0.0 <= mu <= 1.0
    assert mu == pytest.approx(algebraic_distance(V, 1, 0), abs=1e-12)


def test_algebraic_distance_is_scaled_ls_residual():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        V = rng.standard_normal((2, 8))
        p = coupling_coefficient(V, 0, 1)
        scaled = np.sum((V[0] - p * V[1]) ** 2) / np.dot(V[0], V[0])
        assert scaled == pytest.approx(algebraic_distance(V, 0, 1), rel=1e-9, abs=1e-12)


def test_strength_graph_fallback_uses_pattern():
    A, _ = fd_poisson(5)
    graph = strength_graph(None, A)
    assert graph.fallback and graph.strong.all()
    S = graph.strong_matrix()
    pattern = (abs(A) - sp.diags(A.diagonal())) != 0
    assert (S != pattern.astype(np.float64)).nnz == 0


def test_strength_graph_zero_threshold_keeps_only_exact_couplings():
    A = as_csr(sp.diags([-np.ones(3), 2 * np.ones(4), -np.ones(3)], [-1, 0, 1]))
    V = np.array([[1.0, 2.0], [2.0, 4.0], [0.0, 1.0], [3.0, 0.0]])
    graph = strength_graph(V, A, threshold=0.0)
    strong = {(int(r), int(c)) for r, c, s in zip(graph.rows, graph.cols, graph.strong) if s}
    assert strong == {(0, 1), (1, 0)}


def test_strength_graph_threshold_range():
    A, _ = fd_poisson(3)
    with pytest.raises(ValueError):
        strength_graph(np.ones((9, 2)), A, threshold=1.5)


def test_smooth_vectors_couple_nearest_neighbours():
    A, _ = fd_poisson(31, dim=1)
    V = relax_tvs(A, init_test_vectors(A.shape[0], 8, seed=2), GS, eta=300)
    graph = strength_graph(V, A, threshold=0.1)
    assert graph.strong.all()


def test_work_estimate():
    A = as_csr(sp.diags([-np.ones(4), 2 * np.ones(5), -np.ones(4)], [-1, 0, 1]))
    assert work_estimate(A, Partition.empty(5)) == 1.0
    # distance-two couplings among C = {1, 3}: (1,1), (1,3), (3,1), (3,3)
    assert work_estimate(A, Partition.from_coarse(5, [1, 3])) == pytest.approx(1.0 + 4 / 13)
    assert work_estimate(A, Partition(np.ones(5, dtype=bool))) == pytest.approx(1.0 + 19 / 13)


def test_beta_uses_operator_complexity():
    A, meta = fd_poisson(15)
    part = full_coarsening(meta)
    report = estimate_cr_rate(A, part, GS)
    assert report.work == pytest.approx(work_estimate(A, part))
    assert 1.0 < report.work < 2.0
    assert report.beta == pytest.approx(report.rho_cr ** (1.0 / report.work))


def test_cr_rate_all_coarse_is_zero():
    A, _ = fd_poisson(5)
    part = Partition(np.ones(A.shape[0], dtype=bool))
    for mode in ('f_relax', 'hcr'):
        report = estimate_cr_rate(A, part, GS, mode=mode)
        assert report.rho_cr == 0.0
        assert report.beta == 0.0


def test_cr_rate_validation():
    A, _ = fd_poisson(3)
    with pytest.raises(ValueError):
        estimate_cr_rate(A, Partition.empty(9), GS, nu=1)
    with pytest.raises(DimensionMismatchError):
        estimate_cr_rate(A, Partition.empty(4), GS)


def test_cr_rate_empty_coarse_set_matches_smoother_radius():
    A, _ = fd_poisson(7)
    dense = A.toarray()
    E = np.eye(A.shape[0]) - np.linalg.solve(np.tril(dense), dense)
    radius = np.abs(np.linalg.eigvals(E)).max()
    report = estimate_cr_rate(A, Partition.empty(A.shape[0]), GS, nu=200)
    assert report.rho_cr == pytest.approx(radius, abs=1e-6)
    assert radius == pytest.approx(np.cos(np.pi / 8) ** 2, rel=1e-8)


def test_cr_rate_is_reproducible():
    A, _ = four_region(7)
    part = Partition.empty(A.shape[0])
    first = estimate_cr_rate(A, part, GS)
    second = estimate_cr_rate(A, part, GS)
    np.testing.assert_array_equal(first.final_error, second.final_error)
    assert len(first.norms) == 6


def test_full_coarsening_gives_fast_cr():
    A, meta = fd_poisson(15)
    part = full_coarsening(meta)
    assert part.n_c == 49
    assert estimate_cr_rate(A, part, GS).rho_cr <= 0.7


def test_candidate_scores():
    c_flags = np.array([False, False, True, False])
    report = CrReport(rho_cr=0.5, norms=[1.0, 0.5], final_error=np.array([0.0, -2.0, 9.0, 1.0]),
                      c_flags=c_flags)
    np.testing.assert_allclose(candidate_scores(report), [0.0, 1.0, 0.0, 0.5])

    report.final_error = np.array([0.0, 3e-7, 0.0, 0.0])
    np.testing.assert_array_equal(candidate_scores(report), [0.0, 1.0, 0.0, 0.0])

    report.final_error = np.zeros(4)
    np.testing.assert_array_equal(candidate_scores(report), 0.0)


def test_update_coarse_set_without_candidates():
    part = Partition.empty(4)
    out = update_coarse_set(part, np.full(4, 0.1), _path_graph(4))
    np.testing.assert_array_equal(out.c_flags, part.c_flags)


def test_update_coarse_set_clique_adds_one_point():
    n = 4
    rows, cols = np.nonzero(~np.eye(n, dtype=bool))
    graph = StrengthGraph(n=n, rows=rows, cols=cols, mu=np.zeros(rows.size), threshold=0.25)
    out = update_coarse_set(Partition.empty(n), np.ones(n), graph)
    np.testing.assert_array_equal(out.C, [0])


def test_update_coarse_set_path_with_equal_scores():
    out = update_coarse_set(Partition.empty(3), np.ones(3), _path_graph(3))
    np.testing.assert_array_equal(out.C, [0, 2])


def test_update_coarse_set_prefers_high_scores():
    out = update_coarse_set(Partition.empty(3), np.array([0.6, 1.0, 0.7]), _path_graph(3))
    np.testing.assert_array_equal(out.C, [1])


def test_cr_coarsen_diagonal_matrix_stops_immediately():
    A = as_csr(sp.diags(np.arange(1.0, 6.0)))
    part, reports = cr_coarsen(A, Partition.empty(5), GS)
    assert len(reports) == 1
    assert reports[0].rho_cr == 0.0
    assert part.n_c == 0


def test_cr_coarsen_grows_independent_sets():
    A, _ = four_region(15)
    graph = strength_graph(None, A)
    S = graph.strong_matrix()
    part, reports = cr_coarsen(A, Partition.empty(A.shape[0]), GS, graph=graph)
    assert len(reports) >= 2
    for before, after in zip(reports, reports[1:]):
        assert (after.c_flags >= before.c_flags).all()
        added = np.flatnonzero(after.c_flags & ~before.c_flags)
        assert added.size > 0
        assert S[added][:, added].nnz == 0
    np.testing.assert_array_equal(part.c_flags, reports[-1].c_flags)
    assert reports[-1].rho_cr <= 0.7 or reports[-1].warning


def test_cr_coarsen_degenerate_run_warns():
    A, _ = fd_poisson(5)
    part, reports = cr_coarsen(A, Partition.empty(A.shape[0]), GS, score_threshold=1.5, candidate_rule='fixed')
    assert part.n_c == 0
    assert 'degenerate' in reports[-1].warning


def test_coarsening_config_validation():
    with pytest.raises(ValueError):
        CoarseningConfig(method='aggregation')
    with pytest.raises(ValueError):
        CoarseningConfig(cr_sweeps=1)
    with pytest.raises(ValueError):
        CoarseningConfig(delta=1.0)
    with pytest.raises(ValueError):
        CoarseningConfig(candidate_rule='adaptive')


def test_rate_rule_lowers_the_candidate_cutoff():
    A, _ = four_region(15)
    graph = strength_graph(None, A)
    _, fixed = cr_coarsen(A, Partition.empty(A.shape[0]), GS, graph=graph, max_stages=1, candidate_rule='fixed')
    _, rate = cr_coarsen(A, Partition.empty(A.shape[0]), GS, graph=graph, max_stages=1)
    assert fixed[0].threshold == 0.5
    assert rate[0].threshold == pytest.approx(min(0.5, 1.0 - rate[0].rho_cr))
    assert rate[1].c_flags.sum() >= fixed[1].c_flags.sum()


def test_cr_rate_does_not_regress_across_stages():
    for A in (four_region(15)[0], four_region(31)[0], fd_poisson(31)[0]):
        V = relax_tvs(A, init_test_vectors(A.shape[0], 8, seed=0), GS, eta=10)
        _, reports = cr_coarsen(A, Partition.empty(A.shape[0]), GS, graph=strength_graph(V, A))
        rates = [r.rho_cr for r in reports]
        assert all(b <= a + 0.05 for a, b in zip(rates, rates[1:])), rates


def test_cover_interpolation_gaps():
    A, _ = fd_poisson(9, dim=1)
    graph = strength_graph(None, A)
    part = cover_interpolation_gaps(Partition.from_coarse(9, [1]), graph)
    # 0..3 are within distance 2 of point 1; 4 is promoted and covers up to 6, then 7 covers 8
    np.testing.assert_array_equal(part.C, [1, 4, 7])
    assert cover_interpolation_gaps(part, graph) is part
    full = cover_interpolation_gaps(Partition.empty(9), graph)
    np.testing.assert_array_equal(full.C, [0, 3, 6])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), density=st.floats(0.0, 0.3))
def test_covered_partitions_give_every_f_point_a_set(seed, density):
    A, _ = four_region(7)
    graph = strength_graph(None, A)
    flags = np.random.default_rng(seed).random(A.shape[0]) < density
    part = cover_interpolation_gaps(Partition(flags), graph)
    assert (part.c_flags >= flags).all()
    sets = select_interp_sets(part, graph)
    assert ((sets[part.F] >= 0).sum(axis=1) >= 1).all()
