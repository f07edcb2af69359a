"""Exact gradient of the unconstrained log posterior.

The reverse pass is written out by hand: hurdle channels -> layer means ->
templates -> (Q-factor, spectral weights, scale) -> QR pullback ->
Stiefel pre-images, plus prior and Jacobian terms for every block.
"""

from __future__ import annotations

import threading
from functools import lru_cache

import numpy as np
from scipy.special import gammaln

from .errors import NonFiniteError
from .model import LOG_2PI
from .transforms import ParamLayout, qr_positive, weights_from_covariates
from .types import STUDENT_T, LayerDataset, ModelSpec, edge_index

Z_CLAMP = 1e8


@lru_cache(maxsize=32)
def _triangle_masks(K: int) -> tuple[np.ndarray, np.ndarray]:
    lower = np.tri(K)
    return lower, lower - np.eye(K)


def _copyltu(A: np.ndarray) -> np.ndarray:
    lower, strict = _triangle_masks(A.shape[-1])
    return A * lower + np.swapaxes(A * strict, -1, -2)


def qr_backward(X, U, R, U_bar):
    """Pull a cotangent on the Q-factor back to the QR input.

    Assumes the thin factorisation ``X = U R`` with ``diag(R) > 0`` and no
    cotangent on ``R``. Works on single matrices or stacks.
    """
    U = np.asarray(U, dtype=float)
    U_bar = np.asarray(U_bar, dtype=float)
    R = np.asarray(R, dtype=float)
    d = np.diagonal(R, axis1=-2, axis2=-1)
    if np.any(np.abs(d) == 0):
        raise np.linalg.LinAlgError("singular R in QR backward pass")
    M = -np.swapaxes(U_bar, -1, -2) @ U
    rhs = U_bar + U @ _copyltu(M)
    # rhs @ R^{-T}
    return np.swapaxes(np.linalg.solve(R, np.swapaxes(rhs, -1, -2)), -1, -2)


class LogPosterior:
    """Callable log posterior with gradient for one (data, spec) pair.

    Data-derived arrays are computed once; calls never mutate inputs. Work
    buffers are reused across calls and kept per thread, so concurrent calls
    on one instance are safe.
    """

    def __init__(self, data: LayerDataset, spec: ModelSpec):
        spec.check_data(data)
        self.data = data
        self.spec = spec
        self.layout = ParamLayout.build(spec, data)
        self.iu, self.ju = edge_index(data.n)
        obs = data.observed
        self.has_mask = not bool(obs.all())
        present = (data.Z == 1) & obs
        self.z_flat = data.Z.astype(float).reshape(-1)
        self.o_flat = obs.astype(float).reshape(-1)
        self.zo_flat = self.z_flat * self.o_flat
        self.present_flat = present.astype(float).reshape(-1)
        self.y_flat = data.Y_filled.reshape(-1).copy()
        self.n_present = float(present.sum())
        self.x = data.covariates
        self.student = spec.likelihood == STUDENT_T
        nu = spec.nu
        # scratch space reused across calls; avoids large-allocation churn
        self._local = threading.local()
        self.t_const = (gammaln((nu + 1) / 2) - gammaln(nu / 2) - 0.5 * np.log(nu * np.pi))
        self.prior_const = self._prior_constant()

    def _prior_constant(self) -> float:
        """Parameter-free terms of the log prior."""
        lay, spec = self.layout, self.spec
        c = -0.5 * (LOG_2PI + 2 * np.log(spec.sigma_a0))
        if lay.coupled:
            c += -0.5 * (LOG_2PI + 2 * np.log(spec.sigma_a1))
        if lay.covariate:
            cp = spec.covariate_prior
            c += _normal_const(lay.L * (lay.M - 1), cp.sigma_eps)
            c += _normal_const((lay.M - 1) * lay.p, cp.sigma_beta)
        elif lay.M > 1:
            c += lay.L * (gammaln(spec.alpha) - lay.M * gammaln(spec.alpha / lay.M))
        c += _normal_const(lay.M * lay.n * lay.K, 1.0)
        c += _normal_const(lay.M * lay.K, spec.sigma_gamma)
        c += 0.5 * np.log(2 / np.pi) - np.log(spec.sigma_tau)
        c += spec.a_sigma * np.log(spec.b_sigma) - gammaln(spec.a_sigma)
        return float(c)

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_local"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._local = threading.local()

    def _scratch(self):
        local = self._local
        if not hasattr(local, "buf"):
            local.buf = np.empty((5, self.z_flat.size))
            local.mu = np.empty((self.data.L, self.data.P))
        return local.buf, local.mu

    @property
    def dim(self) -> int:
        return self.layout.size

    def __call__(self, phi: np.ndarray) -> tuple[float, np.ndarray]:
        return self.value_and_grad(phi)

    def value_and_grad(self, phi: np.ndarray) -> tuple[float, np.ndarray]:
        lay, spec = self.layout, self.spec
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (lay.size,):
            from .errors import ShapeError

            raise ShapeError(f"expected a vector of length {lay.size}, got shape {phi.shape}")
        L, M, K, n = lay.L, lay.M, lay.K, lay.n
        grad = np.zeros(lay.size)

        # mixture weights
        if lay.covariate:
            eps = phi[lay.sl_weight].reshape(L, M - 1)
            beta = phi[lay.sl_beta].reshape(M - 1, lay.p)
            W, _ = weights_from_covariates(eps, beta, self.x)
        else:
            v = phi[lay.sl_weight].reshape(L, M - 1)
            # log-softmax with the base component pinned at zero
            shift = np.maximum(v.max(axis=1, keepdims=True), 0.0) if M > 1 else np.zeros((L, 1))
            full = np.empty((L, M))
            np.subtract(v, shift, out=full[:, :-1])
            full[:, -1:] = -shift
            full -= np.log(np.exp(full).sum(axis=1, keepdims=True))
            logW = full
            W = np.exp(logW)

        X = lay.X_from_flat(phi[lay.sl_X])
        gamma = phi[lay.sl_gamma].reshape(M, K)
        log_tau = phi[lay.i_log_tau]
        a0 = phi[lay.i_a0]
        a1 = phi[lay.i_a1] if lay.coupled else 0.0
        log_s2 = phi[lay.i_log_sigma2]
        tau = np.exp(log_tau)
        s2 = np.exp(log_s2)

        U, R = qr_positive(X)
        S = tau * (U * gamma[:, None, :]) @ U.transpose(0, 2, 1)
        Q = S[:, self.iu, self.ju]
        buf, mu_out = self._scratch()
        mu = np.matmul(W, Q, out=mu_out)

        value, G, sum_d_eta, sum_d_eta_mu, d_s2 = self._hurdle(mu, buf, a0, a1, s2, log_s2)

        grad[lay.i_a0] = sum_d_eta - a0 / spec.sigma_a0**2
        value += self.prior_const - a0 * a0 / (2 * spec.sigma_a0**2)
        if lay.coupled:
            grad[lay.i_a1] = sum_d_eta_mu - a1 / spec.sigma_a1**2
            value -= a1 * a1 / (2 * spec.sigma_a1**2)

        # back through the mixture
        W_bar = G @ Q.T
        Q_bar = W.T @ G
        B = np.zeros((M, n, n))
        B[:, self.iu, self.ju] = Q_bar
        B = B + B.transpose(0, 2, 1)
        BU = B @ U
        UBU = np.sum(U * BU, axis=1)  # (M, K): u_k^T B u_k
        U_bar = tau * BU * gamma[:, None, :]
        gamma_bar = 0.5 * tau * UBU
        tau_bar = 0.5 * float(np.sum(gamma * UBU))
        X_bar = qr_backward(X, U, R, U_bar)

        # weights: prior, Jacobian and chain rule
        if lay.covariate:
            cp = spec.covariate_prior
            psi_bar = W * (W_bar - np.sum(W_bar * W, axis=1, keepdims=True))
            grad[lay.sl_weight] = (psi_bar[:, 1:] - eps / cp.sigma_eps**2).reshape(-1)
            grad[lay.sl_beta] = (psi_bar[:, 1:].T @ self.x - beta / cp.sigma_beta**2).reshape(-1)
            value += _normal_kernel(eps, cp.sigma_eps) + _normal_kernel(beta, cp.sigma_beta)
        elif M > 1:
            c = spec.alpha / M
            v_bar = W * (W_bar - np.sum(W_bar * W, axis=1, keepdims=True))
            grad[lay.sl_weight] = (v_bar[:, :-1] + c * (1.0 - M * W[:, :-1])).reshape(-1)
            # Dirichlet density plus ALR log-Jacobian (sum log w)
            value += c * float(logW.sum())

        grad[lay.sl_X] = lay.X_to_flat(X_bar - X)
        value += _normal_kernel(phi[lay.sl_X], 1.0)
        grad[lay.sl_gamma] = (gamma_bar - gamma / spec.sigma_gamma**2).reshape(-1)
        value += _normal_kernel(gamma, spec.sigma_gamma)

        st = spec.sigma_tau
        grad[lay.i_log_tau] = tau * tau_bar - tau * tau / st**2 + 1.0
        value += log_tau - tau * tau / (2 * st**2)

        a, b = spec.a_sigma, spec.b_sigma
        grad[lay.i_log_sigma2] = s2 * d_s2 - (a + 1) + b / s2 + 1.0
        value += -a * log_s2 - b / s2

        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise NonFiniteError("non-finite log posterior or gradient")
        return float(value), grad

    def _hurdle(self, mu, buf, a0, a1, s2, log_s2):
        """Hurdle log likelihood and its partials.

        Returns ``(value, G, sum d_eta, sum d_eta * mu, d value / d sigma2)``
        where ``G`` is the cotangent on ``mu``. Reductions go through BLAS
        dot products on flattened views.
        """
        flat_mu = mu.reshape(-1)
        eta, soft, d_eta, r, aux = buf
        # binary channel; sigmoid recovered as exp(eta - softplus(eta))
        np.multiply(flat_mu, a1, out=eta)
        eta += a0
        np.abs(eta, out=soft)
        np.negative(soft, out=soft)
        np.exp(soft, out=soft)
        np.log1p(soft, out=soft)
        np.maximum(eta, 0.0, out=aux)
        soft += aux
        np.subtract(eta, soft, out=d_eta)
        np.exp(d_eta, out=d_eta)
        np.subtract(self.z_flat, d_eta, out=d_eta)
        if self.has_mask:
            value = float(self.zo_flat @ eta - self.o_flat @ soft)
            d_eta *= self.o_flat
        else:
            value = float(self.z_flat @ eta - soft.sum())

        # continuous channel, restricted to observed present entries
        np.subtract(self.y_flat, flat_mu, out=r)
        r *= self.present_flat
        if self.student:
            nu = self.spec.nu
            sd = np.sqrt(s2)
            r /= sd
            with np.errstate(over="ignore"):
                np.multiply(r, r, out=aux)
            aux /= nu
            np.log1p(aux, out=aux)
            log_kernel = float(aux.sum())
            if np.isinf(log_kernel):
                # r*r overflowed; log1p(a^2) = 2 log m + log(m^-2 + (a/m)^2) with m = max(a, 1)
                a = np.abs(r) / np.sqrt(nu)
                m = np.maximum(a, 1.0)
                log_kernel = float(np.sum(2 * np.log(m) + np.log(m ** -2 + (a / m) ** 2)))
            value += float(self.n_present * (self.t_const - 0.5 * log_s2)
                           - (nu + 1) / 2 * log_kernel)
            np.clip(r, -Z_CLAMP, Z_CLAMP, out=r)
            np.multiply(r, r, out=aux)
            aux += nu
            np.divide(nu + 1.0, aux, out=aux)
            aux *= r
            # entries outside the present set have z = 0, so only present ones add -1
            d_s2 = (float(aux @ r) - self.n_present) / (2 * s2)
            np.divide(aux, sd, out=r)
        else:
            sq = float(r @ r)
            value += -0.5 * self.n_present * (LOG_2PI + log_s2) - sq / (2 * s2)
            d_s2 = -0.5 * self.n_present / s2 + sq / (2 * s2 * s2)
            r /= s2
        G = np.multiply(d_eta, a1, out=eta)
        G += r
        return value, G.reshape(mu.shape), float(d_eta.sum()), float(d_eta @ flat_mu), d_s2

    def log_prob(self, phi: np.ndarray) -> float:
        return self.value_and_grad(phi)[0]


def _normal_const(size: int, scale: float) -> float:
    return -0.5 * size * (LOG_2PI + 2 * np.log(scale))


def _normal_kernel(x: np.ndarray, scale: float) -> float:
    flat = x.reshape(-1)
    return -float(flat @ flat) / (2 * scale * scale)


def grad_log_posterior(phi: np.ndarray, data: LayerDataset, spec: ModelSpec) -> np.ndarray:
    return LogPosterior(data, spec).value_and_grad(phi)[1]
