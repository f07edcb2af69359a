"""Rank-normalised split R-hat, bulk/tail ESS and divergence accounting.

All estimators take a ``(chains, draws)`` array for one scalar quantity.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

RHAT_THRESHOLD = 1.01
ESS_PER_CHAIN = 100


class DegenerateDrawsWarning(UserWarning):
    """Constant or zero-variance draws; the statistic is not informative."""


def _as_2d(draws) -> np.ndarray:
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("draws must be (chains, draws)")
    return x


def rank_normalize(draws) -> np.ndarray:
    """Pooled fractional ranks mapped through the normal quantile function."""
    x = np.asarray(draws, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two values")
    r = rankdata(x, method="average").reshape(x.shape)
    return ndtri((r - 0.375) / (x.size + 0.25))


def _split(x: np.ndarray) -> np.ndarray:
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def split_rhat(draws) -> float:
    x = _as_2d(draws)
    if x.shape[1] < 4:
        raise ValueError("split R-hat needs at least 4 draws per chain")
    z = rank_normalize(_split(x))
    n = z.shape[1]
    within = z.var(axis=1, ddof=1).mean()
    between_over_n = z.mean(axis=1).var(ddof=1)
    if not within > 1e-300:
        warnings.warn("zero within-chain variance; R-hat is infinite", DegenerateDrawsWarning)
        return float("inf")
    return float(np.sqrt(((n - 1) / n * within + between_over_n) / within))


def _autocov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row via FFT."""
    n = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, n=size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n]
    return acov / n


def _ess(x: np.ndarray) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence."""
    m, n = x.shape
    acov = _autocov(x)
    mean_var = acov[:, 0].mean() * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if not var_plus > 1e-300:
        return float("nan")
    mean_acov = acov.mean(axis=0)
    rho = np.zeros(n)
    rho[0] = 1.0
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - mean_acov[1]) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < n - 3 and rho_even + rho_odd > 0.0:
        rho_even = 1.0 - (mean_var - mean_acov[t + 1]) / var_plus
        rho_odd = 1.0 - (mean_var - mean_acov[t + 2]) / var_plus
        if rho_even + rho_odd >= 0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0:
        rho[max_t + 1] = rho_even
    # enforce a monotone sequence of paired sums
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2
    tau = -1.0 + 2.0 * rho[: max_t + 1].sum() + rho[max_t + 1: max_t + 2].sum()
    tau = max(tau, 0.5)  # caps ESS at twice the draw count
    return float(m * n / tau)


def _degenerate(x: np.ndarray) -> bool:
    return bool(np.all(x == x.flat[0]))


def ess_bulk(draws) -> float:
    x = _as_2d(draws)
    if x.shape[1] < 8:
        raise ValueError("ESS needs at least 8 draws per chain")
    if _degenerate(x):
        warnings.warn("constant draws; ESS reported as 0", DegenerateDrawsWarning)
        return 0.0
    value = _ess(rank_normalize(_split(x)))
    return 0.0 if np.isnan(value) else value


def ess_tail(draws) -> float:
    """Minimum ESS of the 5% and 95% quantile exceedance indicators."""
    x = _as_2d(draws)
    if x.shape[1] < 8:
        raise ValueError("ESS needs at least 8 draws per chain")
    if _degenerate(x):
        warnings.warn("constant draws; ESS reported as 0", DegenerateDrawsWarning)
        return 0.0
    xs = _split(x)
    out = []
    for prob in (0.05, 0.95):
        ind = (xs <= np.quantile(x, prob)).astype(float)
        value = _ess(ind)
        out.append(0.0 if np.isnan(value) else value)
    return float(min(out))


@dataclass
class QuantityDiagnostics:
    rhat: float
    ess_bulk: float
    ess_tail: float


@dataclass
class DiagnosticsReport:
    quantities: dict[str, QuantityDiagnostics]
    chains: int
    draws_per_chain: int
    n_divergent: int = 0
    n_max_depth: int = 0
    unreliable: bool = False
    flags: list[str] = field(default_factory=list)

    @property
    def max_rhat(self) -> float:
        return max(q.rhat for q in self.quantities.values())

    @property
    def min_ess_bulk(self) -> float:
        return min(q.ess_bulk for q in self.quantities.values())

    @property
    def passed(self) -> bool:
        return (self.max_rhat < RHAT_THRESHOLD
                and self.min_ess_bulk > ESS_PER_CHAIN * self.chains)

    def to_text(self) -> str:
        lines = [
            f"chains = {self.chains}",
            f"draws_per_chain = {self.draws_per_chain}",
            f"divergences = {self.n_divergent}",
            f"max_tree_depth_hits = {self.n_max_depth}",
            f"unreliable = {str(self.unreliable).lower()}",
            f"max_rhat = {self.max_rhat:.6g}",
            f"min_ess_bulk = {self.min_ess_bulk:.6g}",
            f"rhat_threshold = {RHAT_THRESHOLD}",
            f"ess_bulk_threshold = {ESS_PER_CHAIN * self.chains}",
            f"passed = {str(self.passed).lower()}",
            f"flags = {','.join(self.flags) if self.flags else 'none'}",
        ]
        for name, q in self.quantities.items():
            lines.append(f"{name}.rhat = {q.rhat:.6g}")
            lines.append(f"{name}.ess_bulk = {q.ess_bulk:.6g}")
            lines.append(f"{name}.ess_tail = {q.ess_tail:.6g}")
        return "\n".join(lines) + "\n"


def derived_quantities(draws) -> dict[str, np.ndarray]:
    """Scale parameters and per-template norms, each ``(chains, draws)``."""
    from .model import score_matrices
    from .types import edge_index

    lay = draws.layout
    if lay is None:
        return {}
    phi = draws.phi
    out = {
        "tau": np.exp(phi[..., lay.i_log_tau]),
        "sigma2": np.exp(phi[..., lay.i_log_sigma2]),
        "a0": phi[..., lay.i_a0],
    }
    if lay.coupled:
        out["a1"] = phi[..., lay.i_a1]
    iu, ju = edge_index(lay.n)
    norms = np.empty(phi.shape[:2] + (lay.M,))
    for c in range(phi.shape[0]):
        for s in range(phi.shape[1]):
            row = phi[c, s]
            S = score_matrices(lay.X_from_flat(row[lay.sl_X]),
                               row[lay.sl_gamma].reshape(lay.M, lay.K), np.exp(row[lay.i_log_tau]))
            norms[c, s] = np.linalg.norm(S[:, iu, ju], axis=1)
    for m in range(lay.M):
        out[f"qnorm[{m + 1}]"] = norms[..., m]
    return out


def diagnose(draws, include_phi: bool = True, include_derived: bool = True,
             names: Optional[list[str]] = None) -> DiagnosticsReport:
    """Diagnostics for every flat coordinate plus derived summaries."""
    quantities: dict[str, np.ndarray] = {}
    if include_derived:
        quantities.update(derived_quantities(draws))
    if include_phi:
        labels = names or draws.names
        for i, name in enumerate(labels):
            quantities[name] = draws.phi[..., i]
    flags = []
    results = {}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateDrawsWarning)
        for name, x in quantities.items():
            results[name] = QuantityDiagnostics(split_rhat(x), ess_bulk(x), ess_tail(x))
        if caught:
            flags.append("degenerate_quantities")
    n_div = int(draws.divergent.sum())
    n_depth = int((draws.depth >= draws.max_tree_depth).sum())
    unreliable = n_div > 0.10 * draws.divergent.size
    if n_div:
        flags.append("divergences")
    if unreliable:
        flags.append("unreliable")
    if n_depth:
        flags.append("max_tree_depth")
    report = DiagnosticsReport(results, draws.chains, draws.draws_per_chain,
                               n_div, n_depth, unreliable, flags)
    if results and report.max_rhat >= RHAT_THRESHOLD:
        report.flags.append("rhat")
    if results and report.min_ess_bulk <= ESS_PER_CHAIN * draws.chains:
        report.flags.append("low_ess")
    return report
