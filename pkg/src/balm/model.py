"""Templates, hurdle likelihood, priors and the unconstrained log posterior."""

from __future__ import annotations

import numpy as np
from scipy.special import expit, gammaln

from .errors import NonFiniteError, ShapeError
from .transforms import ParamLayout, qr_positive, unpack_layout
from .types import (
    STUDENT_T,
    LayerDataset,
    ModelSpec,
    ParamsConstrained,
    TemplateSet,
    vech,
)

LOG_2PI = np.log(2 * np.pi)


def score_matrices(X: np.ndarray, gamma: np.ndarray, tau: float) -> np.ndarray:
    """Dense ``tau * U_m diag(gamma_m) U_m^T`` for every template."""
    U, _ = qr_positive(X)
    return tau * (U * gamma[:, None, :]) @ U.transpose(0, 2, 1)


def build_templates(params: ParamsConstrained, spec: ModelSpec | None = None) -> TemplateSet:
    """Off-diagonal half-vectorised score matrices, one per template."""
    S = score_matrices(params.X, np.asarray(params.gamma, dtype=float), params.tau)
    return TemplateSet(vech(S), params.n)


def layer_means(W: np.ndarray, templates: TemplateSet) -> np.ndarray:
    W = np.atleast_2d(W)
    if W.shape[1] != templates.M:
        raise ShapeError(f"W has {W.shape[1]} columns but there are {templates.M} templates")
    return W @ templates.Q


_BELOW_ONE = np.nextafter(1.0, 0.0)


def edge_probabilities(a0: float, a1: float, mu: np.ndarray) -> np.ndarray:
    """Presence probabilities, kept strictly inside (0, 1).

    In double precision the logistic function rounds to 1 for arguments
    above about 37; those values are pinned to the largest double below 1.
    """
    return np.minimum(expit(a0 + a1 * np.asarray(mu)), _BELOW_ONE)


def log_sigmoid(x):
    """``log(1 / (1 + exp(-x)))`` without overflow."""
    return -np.logaddexp(0.0, -x)


def student_t_logpdf(y, mu, sigma2: float, nu: float):
    """Location-scale Student-t with scale ``sqrt(sigma2)``."""
    z2 = (y - mu) ** 2 / sigma2
    return (gammaln((nu + 1) / 2) - gammaln(nu / 2) - 0.5 * np.log(nu * np.pi)
            - 0.5 * np.log(sigma2) - (nu + 1) / 2 * np.log1p(z2 / nu))


def gaussian_logpdf(y, mu, sigma2: float):
    return -0.5 * (LOG_2PI + np.log(sigma2)) - (y - mu) ** 2 / (2 * sigma2)


def _continuous_logpdf(y, mu, params, spec):
    if spec.likelihood == STUDENT_T:
        return student_t_logpdf(y, mu, params.sigma2, spec.nu)
    return gaussian_logpdf(y, mu, params.sigma2)


def pointwise_terms(data: LayerDataset, params: ParamsConstrained, spec: ModelSpec,
                    mu: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Binary and continuous per-entry log-likelihood terms, each ``(L, P)``.

    Masked entries are exactly zero in both arrays; the continuous array is
    zero wherever ``Z == 0``.
    """
    if mu is None:
        mu = layer_means(params.W, build_templates(params, spec))
    eta = params.a0 + params.a1 * mu
    obs = data.observed
    present = data.Z == 1
    binary = np.where(present, log_sigmoid(eta), log_sigmoid(-eta))
    binary = np.where(obs, binary, 0.0)
    cont = np.where(present & obs,
                    _continuous_logpdf(data.Y_filled, mu, params, spec), 0.0)
    return binary, cont


def log_likelihood(data: LayerDataset, params: ParamsConstrained, spec: ModelSpec) -> float:
    binary, cont = pointwise_terms(data, params, spec)
    return float(binary.sum() + cont.sum())


def draw_matrix(draws) -> np.ndarray:
    phi = getattr(draws, "phi", draws)
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 3:
        phi = phi.reshape(-1, phi.shape[-1])
    if phi.ndim != 2 or phi.shape[0] == 0:
        raise ShapeError("draws must be a non-empty (S, dim) or (chains, S, dim) array")
    return phi


def pointwise_loglik(data: LayerDataset, draws, spec: ModelSpec) -> np.ndarray:
    """``(S, N)`` matrix of per-entry hurdle log-likelihood contributions.

    Columns enumerate the unmasked ``(layer, edge)`` pairs in row-major
    order, i.e. the order of ``np.nonzero(data.observed)``. ``draws`` is a
    :class:`~balm.sampler.PosteriorDraws` or a raw array of flat vectors;
    chains are concatenated in order.
    """
    phi = draw_matrix(draws)
    layout = ParamLayout.build(spec, data)
    obs = data.observed
    out = np.empty((phi.shape[0], int(obs.sum())))
    for s, row in enumerate(phi):
        params, _ = unpack_layout(row, layout, data.covariates)
        binary, cont = pointwise_terms(data, params, spec)
        out[s] = (binary + cont)[obs]
    return out


def _normal_logpdf_sum(x, scale: float) -> float:
    x = np.asarray(x, dtype=float)
    return float(-0.5 * x.size * (LOG_2PI + 2 * np.log(scale)) - np.sum(x * x) / (2 * scale**2))


def dirichlet_logpdf(W: np.ndarray, concentration: float) -> np.ndarray:
    """Symmetric Dirichlet log density of each row of ``W``."""
    W = np.atleast_2d(W)
    M = W.shape[1]
    if M == 1:
        return np.zeros(W.shape[0])
    c = concentration
    return gammaln(M * c) - M * gammaln(c) + (c - 1) * np.log(W).sum(axis=1)


def log_prior(params: ParamsConstrained, spec: ModelSpec, data: LayerDataset | None = None) -> float:
    if not params.tau > 0:
        raise ValueError("tau must be positive")
    if not params.sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    total = 0.0
    if spec.uses_covariates:
        cp = spec.covariate_prior
        total += _normal_logpdf_sum(params.beta, cp.sigma_beta)
        total += _normal_logpdf_sum(params.eps, cp.sigma_eps)
    else:
        total += float(dirichlet_logpdf(params.W, spec.alpha / spec.M).sum())
    total += _normal_logpdf_sum(params.X, 1.0)
    total += _normal_logpdf_sum(params.gamma, spec.sigma_gamma)
    total += halfnormal_logpdf(params.tau, spec.sigma_tau)
    total += _normal_logpdf_sum(params.a0, spec.sigma_a0)
    if spec.coupled:
        total += _normal_logpdf_sum(params.a1, spec.sigma_a1)
    total += invgamma_logpdf(params.sigma2, spec.a_sigma, spec.b_sigma)
    return total


def halfnormal_logpdf(x: float, scale: float) -> float:
    return float(0.5 * np.log(2 / np.pi) - np.log(scale) - x * x / (2 * scale**2))


def invgamma_logpdf(x: float, shape: float, rate: float) -> float:
    return float(shape * np.log(rate) - gammaln(shape) - (shape + 1) * np.log(x) - rate / x)


def log_posterior_unconstrained(phi: np.ndarray, data: LayerDataset, spec: ModelSpec) -> float:
    """Log posterior density of the flat vector, Jacobians included."""
    layout = ParamLayout.build(spec, data)
    params, log_jac = unpack_layout(phi, layout, data.covariates)
    scales = (params.tau, params.sigma2)
    if not all(np.isfinite(v) and v > 0 for v in scales):
        raise NonFiniteError(f"scale parameters under- or overflowed: tau, sigma2 = {scales}")
    value = log_likelihood(data, params, spec) + log_prior(params, spec, data) + log_jac
    if not np.isfinite(value):
        raise NonFiniteError(f"log posterior is {value}")
    return value


def draw_prior(spec: ModelSpec, data: LayerDataset, rng: np.random.Generator) -> ParamsConstrained:
    """One draw of every parameter from its prior."""
    L, n, M, K = data.L, data.n, spec.M, spec.K
    beta = eps = None
    if spec.uses_covariates:
        cp = spec.covariate_prior
        from .transforms import weights_from_covariates

        beta = rng.normal(0, cp.sigma_beta, size=(M - 1, data.p))
        eps = rng.normal(0, cp.sigma_eps, size=(L, M - 1))
        W, _ = weights_from_covariates(eps, beta, data.covariates)
    else:
        W = rng.dirichlet(np.full(M, spec.alpha / M), size=L)
        # keep strictly interior so the ALR map is defined
        W = np.clip(W, 1e-8, None)
        W /= W.sum(axis=1, keepdims=True)
    return ParamsConstrained(
        W=W,
        X=rng.normal(size=(M, n, K)),
        gamma=rng.normal(0, spec.sigma_gamma, size=(M, K)),
        tau=float(abs(rng.normal(0, spec.sigma_tau))) + 1e-8,
        a0=float(rng.normal(0, spec.sigma_a0)),
        a1=float(rng.normal(0, spec.sigma_a1)) if spec.coupled else 0.0,
        sigma2=float(spec.b_sigma / rng.gamma(spec.a_sigma)),
        beta=beta,
        eps=eps,
    )
