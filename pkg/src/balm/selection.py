"""Model selection across template counts and label-switching utilities.

WAIC from pointwise hurdle log likelihoods, held-out link prediction with
AUC, Hungarian template alignment, consensus stability and the
permutation-invariant parameter distance.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit, logsumexp
from scipy.stats import rankdata

from .errors import DataError, ShapeError
from .model import draw_matrix, build_templates, pointwise_loglik
from .types import LayerDataset, ParamsConstrained, TemplateSet


class WAIC(NamedTuple):
    lppd: float
    p_waic: float
    waic: float


def waic(pointwise) -> WAIC:
    """Edge-wise WAIC from an ``(S, N)`` matrix of log-likelihood terms."""
    ll = np.asarray(pointwise, dtype=float)
    if ll.ndim != 2 or ll.shape[0] < 2:
        raise ValueError("need an (S, N) matrix with S >= 2")
    if not np.all(np.isfinite(ll)):
        raise ValueError("pointwise log likelihood contains non-finite entries")
    S = ll.shape[0]
    lppd = float(np.sum(logsumexp(ll, axis=0) - np.log(S)))
    p_waic = float(np.sum(np.var(ll, axis=0, ddof=1)))
    return WAIC(lppd, p_waic, -2.0 * (lppd - p_waic))


def waic_from_draws(data: LayerDataset, draws, spec, chunk: int = 200) -> WAIC:
    """WAIC accumulated over blocks of draws, without the full ``(S, N)`` matrix."""
    phi = draw_matrix(draws)
    S = phi.shape[0]
    if S < 2:
        raise ValueError("need at least two draws")
    lse = shift = s1 = s2 = None
    for start in range(0, S, chunk):
        ll = pointwise_loglik(data, phi[start:start + chunk], spec)
        if not np.all(np.isfinite(ll)):
            raise ValueError("pointwise log likelihood contains non-finite entries")
        block = logsumexp(ll, axis=0)
        if lse is None:
            lse, shift = block, ll[0].copy()
            s1 = np.zeros_like(shift)
            s2 = np.zeros_like(shift)
        else:
            lse = np.logaddexp(lse, block)
        d = ll - shift
        s1 += d.sum(axis=0)
        s2 += (d * d).sum(axis=0)
    lppd = float(np.sum(lse - np.log(S)))
    p_waic = float(np.sum((s2 - s1 * s1 / S) / (S - 1)))
    return WAIC(lppd, p_waic, -2.0 * (lppd - p_waic))


def mask_edges(data: LayerDataset, fraction: float, seed: int):
    """Hold out ``floor(fraction * L * P)`` random entries.

    Entries already masked in ``data`` stay masked and are never drawn
    again. Returns ``(train, heldout)`` where ``heldout`` is a sorted
    ``(k, 2)`` array of ``(layer, edge)`` pairs.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    L, P = data.L, data.P
    count = int(np.floor(fraction * L * P + 1e-9))
    candidates = np.flatnonzero(data.observed.reshape(-1))
    if count > candidates.size:
        raise ValueError("not enough unmasked entries to hold out")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(candidates, size=count, replace=False))
    heldout = np.stack([chosen // P, chosen % P], axis=1)
    mask = heldout if data.mask is None else np.concatenate([data.mask, heldout])
    return data.with_mask(mask), heldout


def draw_params(draws) -> list[ParamsConstrained]:
    return [draws.unpack(c, s)
            for c in range(draws.chains) for s in range(draws.draws_per_chain)]


def predict_edge_probs(draws, heldout, spec=None) -> np.ndarray:
    """Posterior mean presence probability for each held-out pair."""
    heldout = np.asarray(heldout, dtype=np.int64).reshape(-1, 2)
    lay = draws.layout
    if heldout.size and (heldout[:, 0].max() >= lay.L or heldout[:, 1].max() >= lay.n * (lay.n - 1) // 2
                         or heldout.min() < 0):
        raise DataError("held-out index out of range")
    rows, cols = heldout[:, 0], heldout[:, 1]
    total = np.zeros(len(heldout))
    count = 0
    for params in _iter_params(draws):
        Q = build_templates(params).Q
        mu = np.einsum("km,mk->k", params.W[rows], Q[:, cols])
        total += expit(params.a0 + params.a1 * mu)
        count += 1
    if count == 0:
        raise ValueError("no draws")
    return total / count


def _iter_params(draws):
    for c in range(draws.chains):
        for s in range(draws.draws_per_chain):
            yield draws.unpack(c, s)


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n1 = int(labels.sum())
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("labels must contain both classes")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


# ---------------------------------------------------------------------------
# assignment


def optimal_assignment(score: np.ndarray, maximize: bool = True, rtol: float = 1e-12) -> np.ndarray:
    """Exact optimal permutation for a square score matrix.

    ``perm[i]`` is the column assigned to row ``i``. Among optimal
    permutations the lexicographically smallest is returned.
    """
    score = np.asarray(score, dtype=float)
    M = score.shape[0]
    if score.shape != (M, M):
        raise ShapeError("assignment needs a square matrix")
    cost = -score if maximize else score
    r, c = linear_sum_assignment(cost)
    best = cost[r, c].sum()
    tol = rtol * max(1.0, np.abs(cost).sum())
    perm = np.empty(M, dtype=np.int64)
    used = np.zeros(M, dtype=bool)
    fixed = 0.0
    for i in range(M):
        rest_rows = np.arange(i + 1, M)
        for j in range(M):
            if used[j]:
                continue
            rest_cols = np.flatnonzero(~used & (np.arange(M) != j))
            sub = cost[np.ix_(rest_rows, rest_cols)]
            if sub.size:
                rr, cc = linear_sum_assignment(sub)
                rest = sub[rr, cc].sum()
            else:
                rest = 0.0
            if fixed + cost[i, j] + rest <= best + tol:
                perm[i] = j
                used[j] = True
                fixed += cost[i, j]
                break
    return perm


def brute_force_assignment(score: np.ndarray, maximize: bool = True) -> np.ndarray:
    """Enumerate every permutation; first optimum in lexicographic order."""
    score = np.asarray(score, dtype=float)
    M = score.shape[0]
    best, best_perm = None, None
    for perm in itertools.permutations(range(M)):
        total = score[np.arange(M), perm].sum()
        if best is None or (total > best if maximize else total < best):
            best, best_perm = total, perm
    return np.array(best_perm)


# ---------------------------------------------------------------------------
# template alignment


def _as_templates(t) -> TemplateSet:
    return t if isinstance(t, TemplateSet) else TemplateSet(np.asarray(t))


def template_correlations(Qa, Qb) -> tuple[np.ndarray, bool]:
    """Pearson correlation between every pair of template vectors.

    Zero-variance templates get correlation 0; the flag reports that case.
    """
    A = _as_templates(Qa).Q
    B = _as_templates(Qb).Q
    Ac = A - A.mean(axis=1, keepdims=True)
    Bc = B - B.mean(axis=1, keepdims=True)
    na = np.sqrt((Ac * Ac).sum(axis=1))
    nb = np.sqrt((Bc * Bc).sum(axis=1))
    flat = (na == 0)[:, None] | (nb == 0)[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = (Ac @ Bc.T) / np.outer(na, nb)
    rho = np.where(flat, 0.0, np.clip(rho, -1.0, 1.0))
    return rho, bool(flat.any())


@dataclass
class AlignmentResult:
    """``perm[m]`` is the template of the second set matched to template ``m``."""

    perm: np.ndarray
    correlation: np.ndarray
    mean_correlation: float
    flags: list[str] = field(default_factory=list)


def align_templates(Qa, Qb) -> AlignmentResult:
    Qa, Qb = _as_templates(Qa), _as_templates(Qb)
    if Qa.Q.shape != Qb.Q.shape:
        raise ShapeError(f"template sets differ in shape: {Qa.Q.shape} vs {Qb.Q.shape}")
    rho, degenerate = template_correlations(Qa, Qb)
    perm = optimal_assignment(rho, maximize=True)
    mean = float(rho[np.arange(Qa.M), perm].mean())
    return AlignmentResult(perm, rho, mean, ["zero_variance_template"] if degenerate else [])


def stability_score(runs: Sequence) -> float:
    """Mean aligned template correlation over all pairs of runs."""
    runs = [_as_templates(r) for r in runs]
    if len(runs) < 2:
        raise ValueError("stability needs at least two runs")
    scores = [align_templates(a, b).mean_correlation
              for a, b in itertools.combinations(runs, 2)]
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# quotient distance


@dataclass
class QuotientParams:
    """Identifiable global parameters: templates plus sparsity and noise."""

    templates: TemplateSet
    a0: float
    a1: float
    sigma2: float

    @classmethod
    def from_params(cls, params: ParamsConstrained) -> "QuotientParams":
        return cls(build_templates(params), params.a0, params.a1, params.sigma2)

    def permuted(self, perm) -> "QuotientParams":
        return QuotientParams(self.templates.permuted(perm), self.a0, self.a1, self.sigma2)


def frobenius_costs(Qa, Qb) -> np.ndarray:
    """``C[m, m'] = ||Q_a,m - Q_b,m'||_F^2`` on the full symmetric matrices."""
    A = _as_templates(Qa).Q
    B = _as_templates(Qb).Q
    diff = A[:, None, :] - B[None, :, :]
    # each off-diagonal pair appears twice in the full matrix
    return 2.0 * np.sum(diff * diff, axis=-1)


def quotient_distance(eta_a: QuotientParams, eta_b: QuotientParams) -> float:
    if eta_a.templates.Q.shape != eta_b.templates.Q.shape:
        raise ShapeError("parameter sets differ in shape")
    cost = frobenius_costs(eta_a.templates, eta_b.templates)
    perm = optimal_assignment(cost, maximize=False)
    frob = np.sqrt(max(cost[np.arange(len(perm)), perm].sum(), 0.0))
    return float(frob + abs(eta_a.a0 - eta_b.a0) + abs(eta_a.a1 - eta_b.a1)
                 + abs(eta_a.sigma2 - eta_b.sigma2))


# ---------------------------------------------------------------------------
# posterior summaries under label switching


@dataclass
class PosteriorSummary:
    templates: TemplateSet      # aligned posterior mean templates
    W: np.ndarray               # aligned posterior mean weights (L, M)
    mu: np.ndarray              # posterior mean latent means (L, P)
    a0: float
    a1: float
    sigma2: float


def summarize(draws, n_iter: int = 3, reference: Optional[TemplateSet] = None) -> PosteriorSummary:
    """Posterior means with every draw's templates aligned to a reference.

    The reference starts as the first draw of chain 0 (or ``reference``) and
    is replaced by the aligned mean on each pass.
    """
    params = draw_params(draws)
    Qs = [build_templates(p).Q for p in params]
    ref = reference.Q if reference is not None else Qs[0]
    for _ in range(max(n_iter, 1)):
        perms = [align_templates(ref, Q).perm for Q in Qs]
        new_ref = np.mean([Q[perm] for Q, perm in zip(Qs, perms)], axis=0)
        if np.allclose(new_ref, ref, rtol=0, atol=1e-12):
            ref = new_ref
            break
        ref = new_ref
    W = np.mean([p.W[:, perm] for p, perm in zip(params, perms)], axis=0)
    mu = np.mean([p.W @ Q for p, Q in zip(params, Qs)], axis=0)
    return PosteriorSummary(
        templates=TemplateSet(ref),
        W=W,
        mu=mu,
        a0=float(np.mean([p.a0 for p in params])),
        a1=float(np.mean([p.a1 for p in params])),
        sigma2=float(np.mean([p.sigma2 for p in params])),
    )
