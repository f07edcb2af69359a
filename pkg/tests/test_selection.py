"""WAIC, held-out prediction, alignment, stability and the quotient distance."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from balm.errors import DataError, ShapeError
from balm.model import build_templates, draw_prior, pointwise_loglik
from balm.sampler import PosteriorDraws
from balm.selection import (QuotientParams, align_templates, auc, brute_force_assignment,
                            mask_edges, optimal_assignment, predict_edge_probs,
                            quotient_distance, stability_score, summarize, waic,
                            waic_from_draws)
from balm.transforms import ParamLayout, pack
from balm.types import ModelSpec, TemplateSet, n_edges

from conftest import random_dataset


def draws_from_phi(phi, spec, data):
    """Wrap flat vectors ``(chains, S, dim)`` as a draws object with a layout."""
    phi = np.asarray(phi, dtype=float)
    C, S, dim = phi.shape
    return PosteriorDraws(phi, np.zeros((C, S)), np.zeros((C, S), bool), np.zeros((C, S), int),
                          np.zeros((C, S)), np.ones(C), np.ones((C, dim)),
                          ParamLayout.build(spec, data).names(),
                          layout=ParamLayout.build(spec, data), covariates=data.covariates)


def prior_draws(rng, data, spec, chains=1, S=3):
    phi = [[pack(draw_prior(spec, data, rng), spec, data) for _ in range(S)] for _ in range(chains)]
    return draws_from_phi(phi, spec, data)


def naive_waic(ll):
    S, N = ll.shape
    lppd = p = 0.0
    for i in range(N):
        col = [ll[s, i] for s in range(S)]
        lppd += math.log(sum(math.exp(v) for v in col) / S)
        mean = sum(col) / S
        p += sum((v - mean) ** 2 for v in col) / (S - 1)
    return lppd, p, -2 * (lppd - p)


def naive_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return total / (len(pos) * len(neg))


def naive_quotient(a, b):
    M = a.templates.M
    best = np.inf
    for perm in itertools.permutations(range(M)):
        sq = 0.0
        for m in range(M):
            full = np.zeros((a.templates.n,) * 2)
            iu = np.triu_indices(a.templates.n, 1)
            full[iu] = a.templates.Q[m] - b.templates.Q[perm[m]]
            full = full + full.T
            sq += np.sum(full ** 2)
        best = min(best, math.sqrt(sq))
    return best + abs(a.a0 - b.a0) + abs(a.a1 - b.a1) + abs(a.sigma2 - b.sigma2)


class TestWAIC:
    def test_identical_rows(self, rng):
        row = rng.normal(size=6)
        out = waic(np.vstack([row, row]))
        assert out.p_waic == 0.0
        np.testing.assert_allclose(out.lppd, row.sum(), rtol=1e-14)
        np.testing.assert_allclose(out.waic, -2 * row.sum(), rtol=1e-14)

    def test_two_point(self):
        a, b = 0.3, 0.05
        out = waic(np.log([[a], [b]]))
        np.testing.assert_allclose(out.lppd, math.log((a + b) / 2), rtol=1e-14)

    @pytest.mark.parametrize("shape", [(5, 7), (10, 50), (2, 1)])
    def test_enumeration_oracle(self, rng, shape):
        ll = rng.normal(loc=-2, size=shape)
        np.testing.assert_allclose(tuple(waic(ll)), naive_waic(ll), rtol=1e-10, atol=1e-12)

    def test_extreme_values_stay_finite(self):
        out = waic(np.array([[-1000.0, 0.0], [-1001.0, 0.0]]))
        assert np.isfinite(out.lppd)

    def test_columns_decompose(self, rng):
        ll = rng.normal(size=(6, 9))
        left, right = waic(ll[:, :4]), waic(ll[:, 4:])
        np.testing.assert_allclose(waic(ll).waic, left.waic + right.waic, rtol=1e-12)

    @pytest.mark.parametrize("bad", [np.zeros((1, 3)), np.array([[0.0, np.inf], [0.0, 0.0]])])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            waic(bad)

    @pytest.mark.parametrize("chunk", [1, 2, 5, 200])
    def test_streaming_matches_full_matrix(self, rng, chunk):
        data = random_dataset(rng, n=5, L=3, mask=np.array([[0, 0], [2, 9]]))
        spec = ModelSpec(M=2, K=2)
        draws = prior_draws(rng, data, spec, chains=2, S=4)
        full = waic(pointwise_loglik(data, draws, spec))
        np.testing.assert_allclose(tuple(waic_from_draws(data, draws, spec, chunk=chunk)),
                                   tuple(full), rtol=1e-10)

    def test_only_training_entries(self, rng):
        data = random_dataset(rng, n=4, L=2, mask=np.array([[0, 0], [1, 5]]))
        spec = ModelSpec(M=2, K=2)
        ll = pointwise_loglik(data, prior_draws(rng, data, spec), spec)
        assert ll.shape[1] == 2 * n_edges(4) - 2


class TestMask:
    def test_count_for_published_size(self):
        data = random_dataset(np.random.default_rng(0), n=68, L=100, density=0.1)
        train, held = mask_edges(data, 0.15, seed=1)
        assert len(held) == 34170
        assert train.observed.sum() == 100 * 2278 - 34170

    def test_deterministic(self, rng):
        data = random_dataset(rng, n=6, L=4)
        np.testing.assert_array_equal(mask_edges(data, 0.3, 5)[1], mask_edges(data, 0.3, 5)[1])
        assert not np.array_equal(mask_edges(data, 0.3, 5)[1], mask_edges(data, 0.3, 6)[1])

    def test_partition(self, rng):
        data = random_dataset(rng, n=6, L=4)
        train, held = mask_edges(data, 0.25, 2)
        hidden = np.zeros((4, n_edges(6)), bool)
        hidden[held[:, 0], held[:, 1]] = True
        np.testing.assert_array_equal(train.observed, ~hidden)
        assert len(np.unique(held, axis=0)) == len(held)

    @pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1])
    def test_fraction_range(self, rng, fraction):
        with pytest.raises(ValueError):
            mask_edges(random_dataset(rng), fraction, 0)


class TestPrediction:
    def test_single_draw(self, rng):
        data = random_dataset(rng, n=5, L=3)
        spec = ModelSpec(M=2, K=2)
        draws = prior_draws(rng, data, spec, S=1)
        params = draws.unpack(0, 0)
        mu = params.W @ build_templates(params).Q
        held = np.array([[0, 1], [2, 7], [1, 0]])
        expected = expit(params.a0 + params.a1 * mu[held[:, 0], held[:, 1]])
        np.testing.assert_array_equal(predict_edge_probs(draws, held), expected)

    def test_decoupled_constant(self, rng):
        data = random_dataset(rng, n=5, L=3)
        draws = prior_draws(rng, data, ModelSpec(M=2, K=2, coupling="decoupled"), S=4)
        probs = predict_edge_probs(draws, np.array([[0, 1], [2, 7], [1, 3]]))
        np.testing.assert_allclose(probs, probs[0], rtol=1e-15)

    def test_three_draw_average(self, rng):
        data = random_dataset(rng, n=4, L=2)
        spec = ModelSpec(M=2, K=2)
        draws = prior_draws(rng, data, spec, S=3)
        held = np.array([[1, 4]])
        total = 0.0
        for s in range(3):
            p = draws.unpack(0, s)
            mu = float(p.W[1] @ build_templates(p).Q[:, 4])
            total += 1 / (1 + math.exp(-(p.a0 + p.a1 * mu)))
        np.testing.assert_allclose(predict_edge_probs(draws, held), [total / 3], rtol=1e-12)

    def test_out_of_range(self, rng):
        data = random_dataset(rng, n=4, L=2)
        draws = prior_draws(rng, data, ModelSpec(M=2, K=2))
        with pytest.raises(DataError):
            predict_edge_probs(draws, np.array([[2, 0]]))
        with pytest.raises(DataError):
            predict_edge_probs(draws, np.array([[0, 6]]))


class TestAUC:
    def test_separated(self):
        assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_ties(self):
        assert auc(np.ones(6), [0, 1, 0, 1, 1, 0]) == 0.5

    def test_six_point_oracle(self):
        scores = [0.3, 0.7, 0.3, 0.9, 0.1, 0.7]
        labels = [1, 0, 0, 1, 0, 1]
        assert auc(scores, labels) == naive_auc(scores, labels)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 50))
    def test_pairs_oracle_and_monotone_invariance(self, seed, N):
        rng = np.random.default_rng(seed)
        scores = np.round(rng.normal(size=N), 1)
        labels = np.arange(N) % 2
        rng.shuffle(labels)
        value = auc(scores, labels)
        assert abs(value - naive_auc(scores, labels)) < 1e-12
        assert auc(np.exp(3 * scores), labels) == value

    def test_single_class(self):
        with pytest.raises(ValueError):
            auc([0.1, 0.2], [1, 1])


class TestAssignment:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.booleans())
    def test_brute_force(self, seed, M, maximize):
        rng = np.random.default_rng(seed)
        # coarse values produce ties, exercising the lexicographic rule
        score = rng.integers(-3, 4, size=(M, M)).astype(float)
        np.testing.assert_array_equal(optimal_assignment(score, maximize),
                                      brute_force_assignment(score, maximize))

    def test_all_ties_identity(self):
        np.testing.assert_array_equal(optimal_assignment(np.zeros((4, 4))), np.arange(4))

    def test_negative_entries_not_clamped(self):
        score = np.array([[-0.9, -0.1], [-0.2, -0.95]])
        np.testing.assert_array_equal(optimal_assignment(score), [1, 0])


class TestAlignment:
    def test_identical(self, rng):
        Q = TemplateSet(rng.normal(size=(3, 10)))
        res = align_templates(Q, Q)
        np.testing.assert_array_equal(res.perm, [0, 1, 2])
        np.testing.assert_allclose(res.mean_correlation, 1.0)

    def test_swap(self, rng):
        Q = TemplateSet(rng.normal(size=(3, 10)))
        res = align_templates(Q, Q.permuted([1, 0, 2]))
        np.testing.assert_array_equal(res.perm, [1, 0, 2])
        np.testing.assert_allclose(res.mean_correlation, 1.0)

    def test_four_templates_brute_force(self, rng):
        A, B = rng.normal(size=(4, 15)), rng.normal(size=(4, 15))
        res = align_templates(A, B)
        rho = np.array([[np.corrcoef(a, b)[0, 1] for b in B] for a in A])
        np.testing.assert_allclose(res.correlation, rho, atol=1e-12)
        best = max(itertools.permutations(range(4)), key=lambda p: rho[range(4), p].sum())
        np.testing.assert_array_equal(res.perm, best)

    def test_zero_variance_template(self, rng):
        A = rng.normal(size=(2, 6))
        B = A.copy()
        B[1] = 2.0
        res = align_templates(A, B)
        assert res.flags == ["zero_variance_template"]
        assert res.correlation[0, 1] == 0.0 and res.correlation[1, 1] == 0.0

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            align_templates(rng.normal(size=(2, 6)), rng.normal(size=(3, 6)))


class TestStability:
    def test_identical_runs(self, rng):
        Q = rng.normal(size=(3, 10))
        assert stability_score([Q, Q, Q]) == pytest.approx(1.0, abs=1e-12)

    def test_permuted_run(self, rng):
        Q = TemplateSet(rng.normal(size=(3, 10)))
        assert stability_score([Q, Q.permuted([2, 0, 1])]) == pytest.approx(1.0, abs=1e-12)

    def test_pairwise_assembly(self, rng):
        runs = [rng.normal(size=(2, 10)) for _ in range(3)]
        pairs = [align_templates(a, b).mean_correlation for a, b in itertools.combinations(runs, 2)]
        np.testing.assert_allclose(stability_score(runs), np.mean(pairs), rtol=1e-14)

    def test_relabeling_within_runs(self, rng):
        runs = [TemplateSet(rng.normal(size=(3, 10))) for _ in range(3)]
        relabeled = [runs[0].permuted([1, 2, 0]), runs[1], runs[2].permuted([2, 1, 0])]
        np.testing.assert_allclose(stability_score(relabeled), stability_score(runs), rtol=1e-12)

    def test_single_run(self, rng):
        with pytest.raises(ValueError):
            stability_score([rng.normal(size=(2, 3))])


def random_eta(rng, M=3, n=5):
    return QuotientParams(TemplateSet(rng.normal(size=(M, n_edges(n))), n),
                          rng.normal(), rng.normal(), rng.gamma(2.0))


class TestQuotientDistance:
    def test_identity(self, rng):
        eta = random_eta(rng)
        assert quotient_distance(eta, eta) == 0.0

    def test_permutation_invariance(self, rng):
        eta = random_eta(rng)
        assert quotient_distance(eta, eta.permuted([2, 0, 1])) == pytest.approx(0.0, abs=1e-12)

    def test_enumeration_oracle(self, rng):
        a, b = random_eta(rng), random_eta(rng)
        np.testing.assert_allclose(quotient_distance(a, b), naive_quotient(a, b), rtol=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_metric_axioms(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = random_eta(rng), random_eta(rng), random_eta(rng)
        ab = quotient_distance(a, b)
        assert abs(ab - quotient_distance(b, a)) < 1e-10
        assert quotient_distance(a, c) <= ab + quotient_distance(b, c) + 1e-10

    def test_from_params(self, rng):
        data = random_dataset(rng, n=5)
        params = draw_prior(ModelSpec(M=2, K=2), data, rng)
        eta = QuotientParams.from_params(params)
        assert quotient_distance(eta, QuotientParams.from_params(params.permuted([1, 0]))) < 1e-12

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            quotient_distance(random_eta(rng, M=2), random_eta(rng, M=3))


class TestSummary:
    def test_label_switched_chains_align(self, rng):
        data = random_dataset(rng, n=5, L=4)
        spec = ModelSpec(M=2, K=2)
        params = draw_prior(spec, data, rng)
        phi = pack(params, spec, data)
        swapped = pack(params.permuted([1, 0]), spec, data)
        draws = draws_from_phi([[phi, phi], [swapped, swapped]], spec, data)
        summary = summarize(draws)
        np.testing.assert_allclose(summary.templates.Q, build_templates(params).Q, atol=1e-10)
        np.testing.assert_allclose(summary.W, params.W, atol=1e-10)
        np.testing.assert_allclose(summary.mu, params.W @ build_templates(params).Q, atol=1e-10)
