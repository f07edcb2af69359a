"""Bijections between the constrained parameters and the sampler's flat vector.

Flat layout (in order):

* Dirichlet mode: ALR coordinates of ``W``, ``L`` blocks of ``M-1``
  (row-major). Covariate mode: ``eps`` (``L x (M-1)``, row-major) then
  ``beta`` (``(M-1) x p``, row-major).
* ``X_1 ... X_M``, each ``n x K`` flattened column-major.
* ``gamma`` (``M x K``, row-major).
* ``log tau``, ``a0``, ``a1`` (Coupled only), ``log sigma2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import DegenerateInputError, ShapeError
from .types import LayerDataset, ModelSpec, ParamsConstrained

RANK_TOL = 1e-10


def alr_forward(w: np.ndarray) -> np.ndarray:
    """Additive log-ratio coordinates with the last component as base."""
    w = np.asarray(w, dtype=float)
    if np.any(w <= 0):
        raise ValueError("ALR requires a strictly interior simplex point")
    logw = np.log(w)
    return logw[..., :-1] - logw[..., -1:]


def alr_inverse(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map ALR coordinates back to the simplex.

    Returns ``(w, log_jacobian)`` where ``log_jacobian = sum_m log w_m`` is the
    log-determinant of ``d(w_1..w_{M-1}) / dv``.
    """
    v = np.asarray(v, dtype=float)
    full = np.concatenate([v, np.zeros(v.shape[:-1] + (1,))], axis=-1)
    logw = log_softmax(full, axis=-1)
    return np.exp(logw), logw.sum(axis=-1)


def log_forward(x):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("log transform requires a positive argument")
    return np.log(x)


def log_inverse(u):
    """``x = exp(u)``; the log-Jacobian of that map is ``u`` itself."""
    return np.exp(u), u


def softmax_weights(psi: np.ndarray) -> np.ndarray:
    """Row-wise softmax for baseline-category logits (first column is 0)."""
    psi = np.asarray(psi, dtype=float)
    return softmax(psi, axis=-1)


def qr_positive(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR with ``diag(R) > 0``; works on stacks of matrices.

    Raises :class:`DegenerateInputError` when any matrix has a smallest
    singular value below ``RANK_TOL`` times its largest.
    """
    X = np.asarray(X, dtype=float)
    if X.shape[-2] < X.shape[-1]:
        raise ShapeError(f"need n >= K, got shape {X.shape[-2:]}")
    Q, R = np.linalg.qr(X, mode="reduced")
    s = np.linalg.svd(R, compute_uv=False)
    if not np.all(np.isfinite(s)) or np.any(s[..., -1] <= RANK_TOL * s[..., 0]):
        raise DegenerateInputError("Stiefel pre-image is numerically rank deficient")
    d = np.sign(np.diagonal(R, axis1=-2, axis2=-1))
    d[d == 0] = 1.0
    Q = Q * d[..., None, :]
    R = R * d[..., :, None]
    return Q, R


def stiefel_qr(X: np.ndarray) -> np.ndarray:
    """Orthonormal Q-factor of ``X`` under the positive-diagonal convention."""
    return qr_positive(X)[0]


@dataclass(frozen=True)
class ParamLayout:
    """Slice bookkeeping for the flat unconstrained vector."""

    n: int
    L: int
    M: int
    K: int
    p: int
    coupled: bool
    covariate: bool

    @classmethod
    def build(cls, spec: ModelSpec, data: LayerDataset) -> "ParamLayout":
        return cls.from_dims(spec, data.n, data.L, data.p)

    @classmethod
    def from_dims(cls, spec: ModelSpec, n: int, L: int, p: int = 0) -> "ParamLayout":
        return cls(n=n, L=L, M=spec.M, K=spec.K, p=p if spec.uses_covariates else 0,
                   coupled=spec.coupled, covariate=spec.uses_covariates)

    @property
    def n_weight(self) -> int:
        return self.L * (self.M - 1)

    @property
    def n_beta(self) -> int:
        return (self.M - 1) * self.p if self.covariate else 0

    @cached_property
    def sl_weight(self) -> slice:
        return slice(0, self.n_weight)

    @cached_property
    def sl_beta(self) -> slice:
        return slice(self.n_weight, self.n_weight + self.n_beta)

    @cached_property
    def sl_X(self) -> slice:
        start = self.n_weight + self.n_beta
        return slice(start, start + self.M * self.n * self.K)

    @cached_property
    def sl_gamma(self) -> slice:
        start = self.sl_X.stop
        return slice(start, start + self.M * self.K)

    @cached_property
    def i_log_tau(self) -> int:
        return self.sl_gamma.stop

    @cached_property
    def i_a0(self) -> int:
        return self.i_log_tau + 1

    @cached_property
    def i_a1(self) -> Optional[int]:
        return self.i_a0 + 1 if self.coupled else None

    @cached_property
    def i_log_sigma2(self) -> int:
        return self.i_a0 + (2 if self.coupled else 1)

    @cached_property
    def size(self) -> int:
        return self.i_log_sigma2 + 1

    def X_from_flat(self, block: np.ndarray) -> np.ndarray:
        # column-major within each template
        return block.reshape(self.M, self.K, self.n).transpose(0, 2, 1)

    def X_to_flat(self, X: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(X.transpose(0, 2, 1)).reshape(-1)

    def names(self) -> list[str]:
        """Human-readable name of every coordinate, 1-based indices."""
        out = []
        wname = "eps" if self.covariate else "alr"
        for l in range(self.L):
            for m in range(self.M - 1):
                out.append(f"{wname}[{l + 1},{m + 1 + self.covariate}]")
        if self.covariate:
            for m in range(self.M - 1):
                for j in range(self.p):
                    out.append(f"beta[{m + 2},{j + 1}]")
        for m in range(self.M):
            for k in range(self.K):
                for i in range(self.n):
                    out.append(f"X{m + 1}[{i + 1},{k + 1}]")
        for m in range(self.M):
            for k in range(self.K):
                out.append(f"gamma[{m + 1},{k + 1}]")
        out.append("log_tau")
        out.append("a0")
        if self.coupled:
            out.append("a1")
        out.append("log_sigma2")
        return out


def _check_length(phi: np.ndarray, layout: ParamLayout) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 1 or phi.size != layout.size:
        raise ShapeError(f"expected a vector of length {layout.size}, got shape {phi.shape}")
    return phi


def weights_from_covariates(eps: np.ndarray, beta: np.ndarray, x: np.ndarray):
    """``W`` and the baseline-category logits ``psi`` in covariate mode."""
    L = eps.shape[0]
    psi = np.zeros((L, eps.shape[1] + 1))
    psi[:, 1:] = x @ beta.T + eps
    return softmax_weights(psi), psi


def pack(params: ParamsConstrained, spec: ModelSpec, data: LayerDataset) -> np.ndarray:
    layout = ParamLayout.build(spec, data)
    phi = np.empty(layout.size)
    if layout.covariate:
        phi[layout.sl_weight] = np.asarray(params.eps, dtype=float).reshape(-1)
        phi[layout.sl_beta] = np.asarray(params.beta, dtype=float).reshape(-1)
    else:
        phi[layout.sl_weight] = alr_forward(params.W).reshape(-1)
    X = np.asarray(params.X, dtype=float)
    if X.shape != (layout.M, layout.n, layout.K):
        raise ShapeError(f"X must have shape {(layout.M, layout.n, layout.K)}")
    phi[layout.sl_X] = layout.X_to_flat(X)
    phi[layout.sl_gamma] = np.asarray(params.gamma, dtype=float).reshape(-1)
    phi[layout.i_log_tau] = log_forward(params.tau)
    phi[layout.i_a0] = params.a0
    if layout.coupled:
        phi[layout.i_a1] = params.a1
    phi[layout.i_log_sigma2] = log_forward(params.sigma2)
    return phi


def unpack_layout(phi: np.ndarray, layout: ParamLayout, covariates=None):
    """Same as :func:`unpack` but driven by a prebuilt layout."""
    phi = _check_length(phi, layout)
    L, M = layout.L, layout.M
    beta = eps = None
    if layout.covariate:
        eps = phi[layout.sl_weight].reshape(L, M - 1)
        beta = phi[layout.sl_beta].reshape(M - 1, layout.p)
        W, _ = weights_from_covariates(eps, beta, covariates)
        log_jac = 0.0
    else:
        W, lj = alr_inverse(phi[layout.sl_weight].reshape(L, M - 1))
        log_jac = float(lj.sum())
    X = layout.X_from_flat(phi[layout.sl_X])
    gamma = phi[layout.sl_gamma].reshape(M, layout.K)
    log_tau = phi[layout.i_log_tau]
    log_s2 = phi[layout.i_log_sigma2]
    a1 = phi[layout.i_a1] if layout.coupled else 0.0
    params = ParamsConstrained(
        W=W, X=X.copy(), gamma=gamma.copy(), tau=float(np.exp(log_tau)),
        a0=float(phi[layout.i_a0]), a1=float(a1), sigma2=float(np.exp(log_s2)),
        beta=None if beta is None else beta.copy(),
        eps=None if eps is None else eps.copy(),
    )
    log_jac += float(log_tau + log_s2)
    return params, log_jac


def unpack(phi: np.ndarray, spec: ModelSpec, data: LayerDataset):
    """Inverse of :func:`pack`; returns ``(params, total_log_jacobian)``."""
    return unpack_layout(phi, ParamLayout.build(spec, data), data.covariates)
