"""Rank-normalised R-hat and effective sample size estimators."""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from balm.diagnostics import (DegenerateDrawsWarning, derived_quantities, diagnose, ess_bulk,
                              ess_tail, rank_normalize, split_rhat)
from balm.model import build_templates
from balm.sampler import PosteriorDraws, SamplerConfig, adapt_and_sample
from balm.types import ModelSpec

from conftest import random_dataset


def ar1(rng, rho, chains, n):
    x = np.empty((chains, n))
    x[:, 0] = rng.standard_normal(chains)
    scale = np.sqrt(1 - rho * rho)
    for t in range(1, n):
        x[:, t] = rho * x[:, t - 1] + scale * rng.standard_normal(chains)
    return x


def naive_rhat(x):
    """Split R-hat written out chain by chain on already rank-normalised halves."""
    halves = []
    for chain in x:
        h = len(chain) // 2
        halves += [chain[:h], chain[len(chain) - h:]]
    z = rank_normalize(np.array(halves))
    n = z.shape[1]
    W = np.mean([np.var(row, ddof=1) for row in z])
    means = [row.mean() for row in z]
    B = n * np.var(means, ddof=1)
    return np.sqrt(((n - 1) / n * W + B / n) / W)


class TestRankNormalize:
    def test_sorted_is_monotone(self):
        out = rank_normalize(np.arange(10.0)[None, :])
        assert np.all(np.diff(out) > 0)

    def test_constant_maps_to_zero(self):
        np.testing.assert_allclose(rank_normalize(np.full((2, 5), 3.3)), 0.0, atol=1e-15)

    def test_hand_quantiles(self):
        expected = norm.ppf((np.arange(1, 5) - 0.375) / 4.25)
        np.testing.assert_allclose(rank_normalize(np.array([1.0, 2.0, 3.0, 4.0])), expected,
                                   rtol=1e-14)

    def test_ties_share_average_rank(self):
        out = rank_normalize(np.array([1.0, 2.0, 2.0, 4.0]))
        assert out[1] == out[2]
        np.testing.assert_allclose(out[1], norm.ppf((2.5 - 0.375) / 4.25))

    def test_pooled_across_chains(self):
        x = np.array([[1.0, 4.0], [2.0, 3.0]])
        expected = norm.ppf((np.array([[1, 4], [2, 3]]) - 0.375) / 4.25)
        np.testing.assert_allclose(rank_normalize(x), expected)

    def test_too_few(self):
        with pytest.raises(ValueError):
            rank_normalize([1.0])


class TestRhat:
    def test_iid_chains(self, rng):
        assert split_rhat(rng.standard_normal((4, 2000))) < 1.02

    def test_disjoint_constant_chains(self):
        with pytest.warns(DegenerateDrawsWarning):
            assert split_rhat(np.array([[0.0] * 10, [1.0] * 10])) == np.inf

    def test_shifted_chains_flagged(self, rng):
        x = rng.standard_normal((4, 500))
        x[0] += 3
        assert split_rhat(x) > 1.1

    def test_matches_written_out_formula(self, rng):
        x = ar1(rng, 0.5, 3, 101)
        np.testing.assert_allclose(split_rhat(x), naive_rhat(x), rtol=1e-12)

    def test_duplicated_chain(self, rng):
        one = ar1(rng, 0.5, 1, 400)
        np.testing.assert_allclose(split_rhat(np.vstack([one, one])), naive_rhat(np.vstack([one, one])),
                                   rtol=1e-12)
        # identical chains add no between-chain spread, so only within-chain drift shows
        assert split_rhat(np.vstack([one, one])) < 1.05

    def test_too_short(self):
        with pytest.raises(ValueError):
            split_rhat(np.zeros((2, 3)))


class TestESS:
    def test_iid_bulk(self, rng):
        assert ess_bulk(rng.standard_normal((4, 2000))) >= 4000

    def test_iid_tail(self, rng):
        assert ess_tail(rng.standard_normal((4, 2000))) >= 2000

    def test_ar1_closed_form(self, rng):
        rho, chains, n = 0.9, 4, 4000
        expected = chains * n * (1 - rho) / (1 + rho)
        value = ess_bulk(ar1(rng, rho, chains, n))
        assert expected / 2 < value < expected * 2

    def test_constant(self):
        with pytest.warns(DegenerateDrawsWarning):
            assert ess_bulk(np.ones((2, 20))) == 0.0
        with pytest.warns(DegenerateDrawsWarning):
            assert ess_tail(np.ones((2, 20))) == 0.0

    def test_bounded_by_twice_total(self, rng):
        # strongly antithetic draws would otherwise give unbounded ESS
        x = np.tile([1.0, -1.0], (2, 50)) + 1e-3 * rng.standard_normal((2, 100))
        assert 0 < ess_bulk(x) <= 2 * x.size

    def test_too_short(self):
        with pytest.raises(ValueError):
            ess_bulk(np.zeros((2, 7)))


class TestInvariances:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone_transform(self, seed):
        x = ar1(np.random.default_rng(seed), 0.3, 3, 60)
        y = x ** 3
        np.testing.assert_allclose(split_rhat(y), split_rhat(x), atol=1e-10)
        np.testing.assert_allclose(ess_bulk(y), ess_bulk(x), atol=1e-10)
        np.testing.assert_allclose(ess_tail(y), ess_tail(x), atol=1e-10)

    def test_chain_relabeling(self, rng):
        x = ar1(rng, 0.4, 4, 80)
        perm = [2, 0, 3, 1]
        for f in (split_rhat, ess_bulk, ess_tail):
            np.testing.assert_allclose(f(x[perm]), f(x), rtol=1e-12)


def pseudo_draws(rng, chains=4, S=2000, dim=3):
    return PosteriorDraws(
        phi=rng.standard_normal((chains, S, dim)), energy=np.zeros((chains, S)),
        divergent=np.zeros((chains, S), dtype=bool), depth=np.full((chains, S), 2),
        accept_stat=np.full((chains, S), 0.8), step_size=np.ones(chains),
        mass_diag=np.ones((chains, dim)), names=[f"x{i}" for i in range(dim)],
    )


class TestReport:
    def test_good_run_passes(self, rng):
        report = diagnose(pseudo_draws(rng))
        assert report.max_rhat < 1.01 and report.passed
        assert report.flags == []
        text = report.to_text()
        assert "passed = true" in text and "x2.ess_tail" in text

    def test_divergence_accounting(self, rng):
        d = pseudo_draws(rng, S=100)
        d.divergent[0, :50] = True
        d.depth[1, :7] = 10
        report = diagnose(d)
        assert report.n_divergent == 50 and report.n_max_depth == 7
        assert report.unreliable
        assert {"divergences", "unreliable", "max_tree_depth"} <= set(report.flags)

    def test_degenerate_quantity_flagged(self, rng):
        d = pseudo_draws(rng, S=50)
        d.phi[..., 1] = 0.5
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            report = diagnose(d)
        assert "degenerate_quantities" in report.flags
        assert report.quantities["x1"].ess_bulk == 0.0

    def test_derived_template_norms(self):
        data = random_dataset(np.random.default_rng(3), n=5, L=2)
        draws = adapt_and_sample(data, ModelSpec(M=2, K=2),
                                 SamplerConfig(chains=2, warmup_iters=150, sampling_iters=10,
                                               seed=1, max_tree_depth=4))
        report = diagnose(draws, include_phi=False)
        assert {"tau", "sigma2", "a0", "a1", "qnorm[1]", "qnorm[2]"} == set(report.quantities)
        Q = build_templates(draws.unpack(1, 4))
        d = derived_quantities(draws)
        np.testing.assert_allclose(d["qnorm[2]"][1, 4], np.linalg.norm(Q.Q[1]), rtol=1e-10)
