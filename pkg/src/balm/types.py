"""Domain types: data, model specification, parameter state and templates.

Edge vectors of length ``P = n(n-1)/2`` always use the row-major
upper-triangular ordering ``(0,1), (0,2), ..., (n-2,n-1)`` returned by
:func:`edge_index`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, ShapeError

GAUSSIAN = "gaussian"
STUDENT_T = "student_t"
COUPLED = "coupled"
DECOUPLED = "decoupled"


def n_edges(n: int) -> int:
    return n * (n - 1) // 2


@lru_cache(maxsize=64)
def edge_index(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indices of the upper-triangular off-diagonal entries."""
    iu, ju = np.triu_indices(n, k=1)
    iu.setflags(write=False)
    ju.setflags(write=False)
    return iu, ju


def vech(A: np.ndarray) -> np.ndarray:
    """Half-vectorise the strict upper triangle of ``A`` (last two axes)."""
    iu, ju = edge_index(A.shape[-1])
    return A[..., iu, ju]


def unvech(q: np.ndarray, n: int) -> np.ndarray:
    """Symmetric matrix with zero diagonal from an edge vector (last axis)."""
    iu, ju = edge_index(n)
    out = np.zeros(q.shape[:-1] + (n, n))
    out[..., iu, ju] = q
    out[..., ju, iu] = q
    return out


@dataclass(frozen=True, eq=False)
class LayerDataset:
    """``L`` replicated undirected networks on ``n`` shared nodes.

    ``Z`` holds presence indicators and ``Y`` the logit-scale weights, both
    of shape ``(L, P)``. ``Y`` is only read where ``Z == 1``. ``mask`` is an
    integer array of ``(layer, edge)`` pairs excluded from the likelihood.
    """

    n: int
    L: int
    Z: np.ndarray
    Y: np.ndarray
    mask: Optional[np.ndarray] = None
    covariates: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.n < 2 or self.L < 1:
            raise DataError(f"need n >= 2 and L >= 1, got n={self.n}, L={self.L}")
        P = n_edges(self.n)
        Z = np.asarray(self.Z)
        Y = np.asarray(self.Y, dtype=float)
        if Z.shape != (self.L, P) or Y.shape != (self.L, P):
            raise ShapeError(
                f"Z and Y must have shape {(self.L, P)}, got {Z.shape} and {Y.shape}"
            )
        if not np.isin(Z, (0, 1)).all():
            raise DataError("Z must be binary")
        Z = Z.astype(np.int8)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "Y", Y)

        mask = self.mask
        if mask is not None:
            mask = np.asarray(mask, dtype=np.int64).reshape(-1, 2)
            if mask.size and (
                mask[:, 0].min() < 0
                or mask[:, 0].max() >= self.L
                or mask[:, 1].min() < 0
                or mask[:, 1].max() >= P
            ):
                raise DataError("mask index out of range")
            flat = mask[:, 0] * P + mask[:, 1]
            if np.unique(flat).size != flat.size:
                raise DataError("mask contains duplicate entries")
            object.__setattr__(self, "mask", mask)

        if self.covariates is not None:
            x = np.asarray(self.covariates, dtype=float)
            if x.ndim != 2 or x.shape[0] != self.L:
                raise ShapeError(f"covariates must be L x p, got {x.shape}")
            object.__setattr__(self, "covariates", x)

        bad = (Z == 1) & self.observed & ~np.isfinite(Y)
        if bad.any():
            raise DataError(
                f"{int(bad.sum())} observed present edges have non-finite Y"
            )

    @property
    def P(self) -> int:
        return n_edges(self.n)

    @property
    def p(self) -> int:
        return 0 if self.covariates is None else self.covariates.shape[1]

    @cached_property
    def observed(self) -> np.ndarray:
        """Boolean ``(L, P)`` array, False on masked entries."""
        obs = np.ones((self.L, self.P), dtype=bool)
        if self.mask is not None and len(self.mask):
            obs[self.mask[:, 0], self.mask[:, 1]] = False
        return obs

    @cached_property
    def Y_filled(self) -> np.ndarray:
        """``Y`` with zeros wherever it is not read by the likelihood."""
        keep = (self.Z == 1) & self.observed
        return np.where(keep, self.Y, 0.0)

    def with_mask(self, mask: Optional[np.ndarray]) -> "LayerDataset":
        return replace(self, mask=mask)

    @property
    def density(self) -> float:
        return float(self.Z.mean())


@dataclass(frozen=True)
class CovariatePrior:
    """Prior scales for the logistic-normal covariate mode."""

    sigma_beta: float = 1.0
    sigma_eps: float = 1.0

    def __post_init__(self):
        if not (self.sigma_beta > 0 and self.sigma_eps > 0):
            raise ConfigError("covariate prior scales must be positive")


@dataclass(frozen=True)
class ModelSpec:
    """Template count and rank, likelihood family, coupling mode, priors."""

    M: int
    K: int
    likelihood: str = GAUSSIAN
    nu: float = 5.0
    coupling: str = COUPLED
    alpha: float = 1.0
    sigma_gamma: float = 2.0
    sigma_tau: float = 1.0
    sigma_a0: float = 5.0
    sigma_a1: float = 5.0
    a_sigma: float = 2.0
    b_sigma: float = 1.0
    covariate_prior: Optional[CovariatePrior] = None

    def __post_init__(self):
        if self.M < 1 or self.K < 1:
            raise ConfigError(f"M and K must be >= 1, got M={self.M}, K={self.K}")
        if self.likelihood not in (GAUSSIAN, STUDENT_T):
            raise ConfigError(f"unknown likelihood {self.likelihood!r}")
        if self.likelihood == STUDENT_T and not self.nu > 2:
            raise ConfigError("Student-t requires nu > 2")
        if self.coupling not in (COUPLED, DECOUPLED):
            raise ConfigError(f"unknown coupling {self.coupling!r}")
        for name in ("alpha", "sigma_gamma", "sigma_tau", "sigma_a0", "sigma_a1",
                     "a_sigma", "b_sigma"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def coupled(self) -> bool:
        return self.coupling == COUPLED

    @property
    def uses_covariates(self) -> bool:
        return self.covariate_prior is not None

    def check_data(self, data: LayerDataset) -> None:
        if self.K > data.n:
            raise ConfigError(f"K={self.K} exceeds node count n={data.n}")
        if self.uses_covariates and data.covariates is None:
            raise DataError("covariate mode requires covariates in the dataset")


@dataclass(eq=False)
class ParamsConstrained:
    """Full parameter state on the constrained scale.

    ``X`` stacks the ``M`` unconstrained ``n x K`` Stiefel pre-images.
    ``beta`` and ``eps`` are set only in covariate mode.
    """

    W: np.ndarray
    X: np.ndarray
    gamma: np.ndarray
    tau: float
    a0: float
    a1: float
    sigma2: float
    beta: Optional[np.ndarray] = None
    eps: Optional[np.ndarray] = None

    @property
    def M(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return self.X.shape[2]

    def permuted(self, perm) -> "ParamsConstrained":
        """Relabel templates: new template ``m`` is old template ``perm[m]``.

        Only meaningful in Dirichlet mode (covariate mode pins template 1
        as the baseline category).
        """
        perm = np.asarray(perm)
        return replace(
            self, W=self.W[:, perm], X=self.X[perm], gamma=self.gamma[perm]
        )


@dataclass(eq=False)
class TemplateSet:
    """Half-vectorised off-diagonal templates, one row of ``Q`` per template."""

    Q: np.ndarray
    n: int = field(default=0)

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        P = Q.shape[1]
        n = int(round((1 + np.sqrt(1 + 8 * P)) / 2))
        if n_edges(n) != P:
            raise ShapeError(f"template length {P} is not n(n-1)/2 for any n")
        if self.n and self.n != n:
            raise ShapeError(f"template length {P} inconsistent with n={self.n}")
        self.Q = Q
        self.n = n

    @property
    def M(self) -> int:
        return self.Q.shape[0]

    @property
    def P(self) -> int:
        return self.Q.shape[1]

    def matrices(self) -> np.ndarray:
        return unvech(self.Q, self.n)

    def permuted(self, perm) -> "TemplateSet":
        return TemplateSet(self.Q[np.asarray(perm)], self.n)
