import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bobasim import aggregation as ag
from bobasim import linalg
from bobasim.aggregation import (
    AggregationInput,
    BobaParams,
    average,
    boba_aggregate,
    bucketing,
    compute_boba_error_bound,
    coordinate_median,
    fit_subspace_alternating,
    fit_subspace_exhaustive,
    fltrust,
    geometric_median,
    krum,
    loss_rejection,
    make_lower_bound_instance,
    make_three_client_instance,
    pairwise_sq_distances,
    trimmed_mean,
    trimmed_reconstruction_loss,
)
from bobasim.linalg import InvalidInputError


def simplex_instance(rng, c=5, d=20, n=10, noise=0.0):
    verts = rng.normal(scale=2.0, size=(d, c))
    p = rng.dirichlet(np.ones(c), size=n).T
    g = verts @ p
    if noise:
        g = g + rng.normal(scale=noise, size=(d, n))
    return g, verts, p


class TestTrimmedLoss:
    def test_matches_bruteforce(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            g = rng.normal(size=(6, 8))
            sub, _, _ = linalg.truncated_svd(rng.normal(size=(6, 4)), 2)
            f = int(rng.integers(0, 4))
            loss, mask = trimmed_reconstruction_loss(sub, g, f)
            res = np.sum((g - linalg.project(sub, g)) ** 2, axis=0)
            # oracle: smallest (n - f) residuals, brute force over subsets
            best = min(sum(res[list(s)]) for s in itertools.combinations(range(8), 8 - f))
            assert loss == pytest.approx(best, abs=1e-9)
            assert mask.sum() == 8 - f

    def test_tie_break_prefers_low_index(self):
        sub = linalg.AffineSubspace(np.zeros((2, 1)) + np.array([[1.0], [0.0]]), np.zeros(2))
        g = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])  # equal residuals
        _, mask = trimmed_reconstruction_loss(sub, g, 1)
        np.testing.assert_array_equal(mask, [True, True, False])


class TestGramFitter:
    def test_gram_matches_direct_product(self):
        rng = np.random.default_rng(1)
        for d, n in [(5, 9), (9, 5), (200, 17)]:
            g = rng.normal(size=(d, n))
            fitter = ag._GramFitter(g, 3)
            np.testing.assert_allclose(fitter.K, g.T @ g, atol=1e-9)

    def test_residuals_match_explicit_subspace(self):
        rng = np.random.default_rng(2)
        g = rng.normal(size=(12, 10))
        fitter = ag._GramFitter(g, 3)
        idx = np.array([0, 2, 3, 5, 7, 8])
        res, info = fitter.fit_residuals(idx)
        sub = fitter.materialize(info)
        explicit = np.sum((g - linalg.project(sub, g)) ** 2, axis=0)
        np.testing.assert_allclose(res, explicit, atol=1e-8)

    def test_latent_coords_solve_same_simplex_weights(self):
        rng = np.random.default_rng(3)
        g, verts, p = simplex_instance(rng, c=4, d=15, n=9)
        inp = AggregationInput(g, verts, 2, 4)
        fitter, info, _, _, _, _, cross = ag._fit_alternating_latent(inp, 50)
        p_hat = linalg.solve_affine_coordinates(
            fitter.vertex_coords(info, cross), fitter.client_coords(info))
        np.testing.assert_allclose(p_hat, p, atol=1e-8)

    def test_non_finite_caught_by_diag(self):
        g = np.ones((4, 3))
        g[2, 1] = np.inf
        with pytest.raises(InvalidInputError):
            ag._GramFitter(g, 2)


class TestSubspaceFitting:
    def test_loss_trace_non_increasing(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            g, verts, _ = simplex_instance(rng, noise=0.1)
            g[:, -2:] += rng.normal(scale=5.0, size=(20, 2))
            inp = AggregationInput(g, verts + rng.normal(scale=0.05, size=verts.shape), 2, 5)
            fit = fit_subspace_alternating(inp)
            trace = fit.loss_trace
            assert all(b <= a + 1e-9 for a, b in zip(trace[1:], trace[2:]))

    def test_exhaustive_dominates_alternating(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            g, verts, _ = simplex_instance(rng, c=3, d=8, n=9, noise=0.3)
            inp = AggregationInput(g, verts, 2, 3)
            alt = fit_subspace_alternating(inp)
            es = fit_subspace_exhaustive(inp)
            assert es.trimmed_loss <= alt.trimmed_loss + 1e-9

    def test_exhaustive_counts_all_subsets(self):
        rng = np.random.default_rng(6)
        g, verts, _ = simplex_instance(rng, c=3, d=8, n=8, noise=0.1)
        inp = AggregationInput(g, verts, 2, 3)
        es = fit_subspace_exhaustive(inp)
        assert es.trsvd_calls == 28  # C(8, 6)

    def test_subset_cap_enforced(self):
        rng = np.random.default_rng(7)
        g, verts, _ = simplex_instance(rng, c=3, d=8, n=12, noise=0.1)
        inp = AggregationInput(g, verts, 4, 3)
        with pytest.raises(InvalidInputError):
            fit_subspace_exhaustive(inp, subset_cap=10)

    def test_alternating_counts_init_fit(self):
        rng = np.random.default_rng(8)
        g, verts, _ = simplex_instance(rng)
        fit = fit_subspace_alternating(AggregationInput(g, verts, 2, 5))
        assert fit.trsvd_calls >= 2  # seed fit plus at least one refit


class TestBoba:
    def test_exact_simplex_recovers_honest_average(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            g, verts, _ = simplex_instance(rng, n=12)
            res = boba_aggregate(AggregationInput(g, verts, 3, 5), BobaParams(3))
            np.testing.assert_allclose(res.aggregate, g.mean(axis=1), atol=1e-8)
            assert res.accepted.all()
            assert not res.diagnostics["fallback"]

    def test_rejects_outside_simplex_columns(self):
        rng = np.random.default_rng(10)
        g, verts, _ = simplex_instance(rng, n=9)
        byz = rng.normal(scale=30.0, size=(20, 3))
        G = np.column_stack([g, byz])
        res = boba_aggregate(AggregationInput(G, verts, 3, 5), BobaParams(3))
        np.testing.assert_array_equal(res.accepted[:9], True)
        np.testing.assert_array_equal(res.accepted[9:], False)
        np.testing.assert_allclose(res.aggregate, g.mean(axis=1), atol=1e-6)

    def test_fallback_keeps_top_n_minus_f(self):
        # p_min = 0 with mildly negative honest coordinates forces the
        # fallback path; it must keep exactly n - f clients
        rng = np.random.default_rng(11)
        g, verts, _ = simplex_instance(rng, n=8, noise=0.5)
        res = boba_aggregate(AggregationInput(g, verts, 3, 5), BobaParams(3, p_min=0.0))
        if res.diagnostics["fallback"]:
            assert res.accepted.sum() == 5
            min_p = res.diagnostics["min_p"]
            kept, dropped = min_p[res.accepted], min_p[~res.accepted]
            assert kept.min() >= dropped.max() - 1e-12

    def test_modes_agree_on_clean_data(self):
        rng = np.random.default_rng(12)
        g, verts, _ = simplex_instance(rng, c=3, d=10, n=9)
        inp = AggregationInput(g, verts, 2, 3)
        a = boba_aggregate(inp, BobaParams(2), "alternating")
        b = boba_aggregate(inp, BobaParams(2), "exhaustive")
        np.testing.assert_allclose(a.aggregate, b.aggregate, atol=1e-8)

    def test_unknown_mode(self):
        rng = np.random.default_rng(13)
        g, verts, _ = simplex_instance(rng)
        with pytest.raises(InvalidInputError):
            boba_aggregate(AggregationInput(g, verts, 2, 5), BobaParams(2), "greedy")

    def test_subspace_materialized_only_for_small_inputs(self):
        rng = np.random.default_rng(14)
        g, verts, _ = simplex_instance(rng)
        res = boba_aggregate(AggregationInput(g, verts, 2, 5), BobaParams(2))
        assert res.diagnostics["subspace"] is not None


class TestBaselines:
    def test_average_and_median(self):
        g = np.array([[1.0, 2.0, 6.0], [0.0, -1.0, 4.0]])
        np.testing.assert_allclose(average(g), [3.0, 1.0])
        np.testing.assert_allclose(coordinate_median(g), [2.0, 0.0])

    def test_trimmed_mean_oracle(self):
        g = np.array([[5.0, 1.0, 2.0, 3.0, 100.0]])
        np.testing.assert_allclose(trimmed_mean(g, 1), [(2.0 + 3.0 + 5.0) / 3])
        with pytest.raises(InvalidInputError):
            trimmed_mean(np.ones((2, 4)), 2)

    def test_krum_against_quadratic_oracle(self):
        rng = np.random.default_rng(15)
        for _ in range(10):
            g = rng.normal(size=(4, 9))
            f = 2
            k = 9 - f - 2
            # oracle: explicit double loop
            scores = []
            for i in range(9):
                dists = sorted(
                    np.sum((g[:, i] - g[:, j]) ** 2) for j in range(9) if j != i)
                scores.append(sum(dists[:k]))
            best = int(np.argmin(scores))
            res = krum(g, f, multi=1)
            np.testing.assert_allclose(res.aggregate, g[:, best])
            np.testing.assert_allclose(res.diagnostics["scores"], scores, atol=1e-9)

    def test_multi_krum_averages_best(self):
        rng = np.random.default_rng(16)
        g = rng.normal(size=(3, 8))
        res = krum(g, 2, multi=3)
        assert res.accepted.sum() == 3
        np.testing.assert_allclose(res.aggregate, g[:, res.accepted].mean(axis=1))

    def test_geometric_median_first_order_optimality(self):
        rng = np.random.default_rng(17)
        g = rng.normal(size=(5, 11))
        y = geometric_median(g)
        dirs = (g - y[:, None]) / np.linalg.norm(g - y[:, None], axis=0)
        assert np.linalg.norm(dirs.sum(axis=1)) < 1e-5

    def test_geometric_median_collinear(self):
        # 1-D with even n: every point between the middle order statistics
        # minimizes the summed distance, so compare objective values
        g = np.array([[0.0, 1.0, 2.0, 10.0]])
        y = geometric_median(g)[0]
        obj = np.abs(g[0] - y).sum()
        assert 1.0 - 1e-6 <= y <= 2.0 + 1e-6
        assert obj == pytest.approx(np.abs(g[0] - 1.5).sum(), abs=1e-6)

    def test_fltrust_clips_negative_cosine(self):
        server = np.array([[1.0], [0.0]])[:, :1] * np.ones((1, 2))
        server = np.array([[1.0, 1.0], [0.0, 0.0]])
        g = np.array([[1.0, -1.0], [0.0, 0.0]])  # second column opposes server
        out = fltrust(g, server)
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_fltrust_rescales_to_server_norm(self):
        server = np.array([[2.0], [0.0]])
        g = np.array([[10.0], [0.0]])
        np.testing.assert_allclose(fltrust(g, server), [2.0, 0.0], atol=1e-12)

    def test_fltrust_zero_server_raises(self):
        with pytest.raises(InvalidInputError):
            fltrust(np.ones((2, 3)), np.zeros((2, 1)))

    def test_loss_rejection_self_drops_worst(self):
        # quadratic loss centered at origin from w = 1: a gradient of exactly
        # 1/eta lands on the optimum, bad gradients overshoot or undershoot
        loss = lambda p: 0.5 * float(p @ p)
        w = np.array([1.0])
        g = np.array([[10.0, -5.0, 9.0, 11.0]])
        res = loss_rejection(g, loss, w, 0.1, 1, "self")
        np.testing.assert_array_equal(res.accepted, [True, False, True, True])

    def test_loss_rejection_avg_drops_harmful(self):
        loss = lambda p: 0.5 * float(p @ p)
        w = np.array([1.0])
        g = np.array([[10.0, 10.0, 10.0, -200.0]])
        res = loss_rejection(g, loss, w, 0.1, 1, "avg")
        np.testing.assert_array_equal(res.accepted, [True, True, True, False])

    def test_bucketing_identity_for_unit_buckets(self):
        rng = np.random.default_rng(18)
        g = rng.normal(size=(3, 6))
        out = bucketing(g, 1, average, np.random.default_rng(0))
        np.testing.assert_allclose(out, g.mean(axis=1), atol=1e-12)

    def test_bucketing_bucket_count(self):
        g = np.arange(10.0).reshape(1, 10)
        seen = {}

        def inner(means):
            seen["count"] = means.shape[1]
            return means.mean(axis=1)

        bucketing(g, 3, inner, np.random.default_rng(1))
        assert seen["count"] == 4  # ceil(10 / 3)


class TestErrorBound:
    def test_formula_by_hand(self):
        # independent recomputation with explicit arithmetic
        eps, eps_s, delta, delta_s, sigma = 0.1, 0.2, 0.5, 0.7, 2.0
        n, f, c, p_min, beta, h = 10, 2, 4, -0.5, 0.2, 8
        shared = 1 / 6 + 0.25 / 4.0
        amp = (1 + 4 * 0.5) ** 2
        c1 = 4 + 8 * shared * (2 * 8 + 8)
        c2 = 16 * shared * 8 + 16 * 4 * amp * 0.04
        c3 = 16 * amp
        expected = c1 * eps**2 + c2 * eps_s**2 + c3 * beta**2 * delta_s**2
        got = compute_boba_error_bound(eps, eps_s, delta, delta_s, sigma,
                                       n, f, c, p_min, beta, h)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_preconditions(self):
        with pytest.raises(InvalidInputError):
            compute_boba_error_bound(1, 1, 1, 1, 1, 4, 2, 3, -0.5, 0.1, 2)
        with pytest.raises(InvalidInputError):
            compute_boba_error_bound(1, 1, 1, 1, 0.0, 10, 2, 3, -0.5, 0.1, 8)


class TestFixtures:
    def test_lower_bound_instance_structure(self):
        values, h1, h2, t1, t2 = make_lower_bound_instance(3, 1, 2.0)
        assert values.shape == (1, 4)
        np.testing.assert_allclose(values[0], [1.5, 1.5, -1.5, -1.5])
        assert t1 == pytest.approx(0.5) and t2 == pytest.approx(-0.5)
        assert values[0, h1].mean() == pytest.approx(t1)
        assert values[0, h2].mean() == pytest.approx(t2)
        with pytest.raises(InvalidInputError):
            make_lower_bound_instance(4, 1, 1.0)  # odd total

    def test_three_client_instance_structure(self):
        g, e_mu = make_three_client_instance(1.0, 0.05, draws=(1, 0))
        np.testing.assert_allclose(e_mu, np.zeros(2))
        u = np.array([-1.0, 1.0]) / np.sqrt(2)
        # mean over the four equally likely draws is zero
        total = np.zeros(2)
        for z1 in (0, 1):
            for z2 in (0, 1):
                gg, _ = make_three_client_instance(1.0, 0.05, draws=(z1, z2))
                total += gg.mean(axis=1)
        np.testing.assert_allclose(total / 4, np.zeros(2), atol=1e-12)
        np.testing.assert_allclose(g[:, 2], -u, atol=1e-12)
        with pytest.raises(InvalidInputError):
            make_three_client_instance(0.1, 0.05, draws=(0, 0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(5, 10), st.integers(0, 3))
def test_permutation_equivariance(seed, n, f):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(4, n))
    perm = rng.permutation(n)
    gp = g[:, perm]
    np.testing.assert_allclose(average(gp), average(g), atol=1e-9)
    np.testing.assert_allclose(coordinate_median(gp), coordinate_median(g), atol=1e-9)
    if n > 2 * f:
        np.testing.assert_allclose(trimmed_mean(gp, f), trimmed_mean(g, f), atol=1e-9)
    np.testing.assert_allclose(geometric_median(gp), geometric_median(g), atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pairwise_distances_oracle(seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(3, 6))
    d2 = pairwise_sq_distances(g)
    for i in range(6):
        for j in range(6):
            assert d2[i, j] == pytest.approx(np.sum((g[:, i] - g[:, j]) ** 2), abs=1e-9)
