"""Multinomial No-U-Turn sampler with windowed warm-up adaptation.

The sampler works on any target exposing ``value_and_grad(phi)`` (or a plain
callable returning ``(log_density, gradient)``). Step size is tuned by dual
averaging, the diagonal metric from windowed variance estimates.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import BalmError, ConfigError
from .transforms import ParamLayout, pack, unpack_layout
from .types import LayerDataset, ModelSpec

logger = logging.getLogger(__name__)

INIT_BUFFER = 75
TERM_BUFFER = 50
BASE_WINDOW = 25


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup_iters: int = 1000
    sampling_iters: int = 1000
    target_accept: float = 0.80
    max_tree_depth: int = 10
    divergence_energy_threshold: float = 1000.0
    seed: int = 0
    init_jitter_scale: float = 0.1

    def __post_init__(self):
        if self.chains < 1:
            raise ConfigError("chains must be >= 1")
        if not 0 < self.target_accept < 1:
            raise ConfigError("target_accept must lie in (0, 1)")
        if self.warmup_iters < 150:
            raise ConfigError("warmup_iters must be >= 150")
        if self.sampling_iters < 1:
            raise ConfigError("sampling_iters must be >= 1")
        if self.max_tree_depth < 1:
            raise ConfigError("max_tree_depth must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")


@dataclass
class PosteriorDraws:
    """Post-warm-up draws, one leading axis entry per chain."""

    phi: np.ndarray            # (chains, S, dim)
    energy: np.ndarray         # (chains, S)
    divergent: np.ndarray      # (chains, S) bool
    depth: np.ndarray          # (chains, S) int
    accept_stat: np.ndarray    # (chains, S)
    step_size: np.ndarray      # (chains,)
    mass_diag: np.ndarray      # (chains, dim)
    names: list[str]
    max_tree_depth: int = 10
    layout: Optional[ParamLayout] = None
    covariates: Optional[np.ndarray] = None

    @property
    def chains(self) -> int:
        return self.phi.shape[0]

    @property
    def draws_per_chain(self) -> int:
        return self.phi.shape[1]

    @property
    def n_divergent(self) -> int:
        return int(self.divergent.sum())

    @property
    def divergence_fraction(self) -> float:
        return self.n_divergent / self.divergent.size

    @property
    def unreliable(self) -> bool:
        return self.divergence_fraction > 0.10

    def flat(self) -> np.ndarray:
        return self.phi.reshape(-1, self.phi.shape[-1])

    def unpack(self, chain: int, it: int):
        if self.layout is None:
            raise BalmError("draws carry no parameter layout")
        return unpack_layout(self.phi[chain, it], self.layout, self.covariates)[0]

    def select_chains(self, idx) -> "PosteriorDraws":
        idx = list(idx)
        return PosteriorDraws(
            self.phi[idx], self.energy[idx], self.divergent[idx], self.depth[idx],
            self.accept_stat[idx], self.step_size[idx], self.mass_diag[idx],
            self.names, self.max_tree_depth, self.layout, self.covariates,
        )


# ---------------------------------------------------------------------------
# integrator


class _State:
    __slots__ = ("z", "p", "logp", "grad")

    def __init__(self, z, p, logp, grad):
        self.z = z
        self.p = p
        self.logp = logp
        self.grad = grad


def _as_fn(target) -> Callable:
    return getattr(target, "value_and_grad", target)


def _evaluate(fn, z):
    try:
        with np.errstate(all="ignore"):
            logp, grad = fn(z)
    except (BalmError, FloatingPointError, np.linalg.LinAlgError, ValueError):
        return -np.inf, None
    if not np.isfinite(logp) or not np.all(np.isfinite(grad)):
        return -np.inf, None
    return float(logp), grad


def _leapfrog_state(state: _State, step: float, inv_mass: np.ndarray, fn):
    """One velocity-Verlet step; returns None when the target fails."""
    p_half = state.p + 0.5 * step * state.grad
    z = state.z + step * inv_mass * p_half
    logp, grad = _evaluate(fn, z)
    if grad is None:
        return None
    p = p_half + 0.5 * step * grad
    return _State(z, p, logp, grad)


def _hamiltonian(state: _State, inv_mass: np.ndarray) -> float:
    return -state.logp + 0.5 * float(np.dot(state.p, inv_mass * state.p))


def leapfrog(phi, momentum, step, mass_diag, grad_fn):
    """Single leapfrog step under a diagonal metric.

    ``grad_fn`` returns ``(log_density, gradient)``. Returns
    ``(phi', momentum', energy_error)``; a failed or non-finite evaluation
    yields ``energy_error = inf`` (a divergence).
    """
    fn = _as_fn(grad_fn)
    inv_mass = 1.0 / np.asarray(mass_diag, dtype=float)
    logp, grad = _evaluate(fn, np.asarray(phi, dtype=float))
    if grad is None:
        return np.asarray(phi), np.asarray(momentum), np.inf
    start = _State(np.asarray(phi, dtype=float), np.asarray(momentum, dtype=float), logp, grad)
    new = _leapfrog_state(start, step, inv_mass, fn)
    if new is None:
        return start.z, start.p, np.inf
    err = _hamiltonian(new, inv_mass) - _hamiltonian(start, inv_mass)
    if not np.isfinite(err):
        err = np.inf
    return new.z, new.p, err


# ---------------------------------------------------------------------------
# NUTS


class _Tree:
    __slots__ = ("left", "right", "proposal", "log_w", "rho",
                 "turning", "diverging", "sum_acc", "n_steps")


def _no_uturn(p_sharp_minus, p_sharp_plus, rho) -> bool:
    return float(np.dot(p_sharp_plus, rho)) > 0 and float(np.dot(p_sharp_minus, rho)) > 0


class _Nuts:
    def __init__(self, fn, inv_mass, step, H0, rng, threshold):
        self.fn = fn
        self.inv_mass = inv_mass
        self.step = step
        self.H0 = H0
        self.rng = rng
        self.threshold = threshold

    def leaf(self, start: _State, direction: int) -> _Tree:
        t = _Tree()
        t.n_steps = 1
        t.turning = False
        new = _leapfrog_state(start, direction * self.step, self.inv_mass, self.fn)
        dH = np.inf if new is None else _hamiltonian(new, self.inv_mass) - self.H0
        if not np.isfinite(dH):
            dH = np.inf
        t.diverging = dH > self.threshold
        t.sum_acc = 0.0 if dH == np.inf else min(1.0, math.exp(-dH)) if dH > 0 else 1.0
        if new is None:
            new = start
        t.left = t.right = t.proposal = new
        t.log_w = -dH
        t.rho = new.p.copy()
        return t

    def build(self, start: _State, direction: int, depth: int) -> _Tree:
        if depth == 0:
            return self.leaf(start, direction)
        first = self.build(start, direction, depth - 1)
        if first.turning or first.diverging:
            return first
        edge = first.right if direction > 0 else first.left
        second = self.build(edge, direction, depth - 1)
        first.n_steps += second.n_steps
        first.sum_acc += second.sum_acc
        if second.turning or second.diverging:
            first.turning = second.turning
            first.diverging = second.diverging
            return first
        log_w = np.logaddexp(first.log_w, second.log_w)
        if self.rng.uniform() < math.exp(second.log_w - log_w):
            first.proposal = second.proposal
        first.log_w = log_w
        self.join(first, second, direction)
        return first

    def join(self, tree: _Tree, new: _Tree, direction: int) -> None:
        """Merge ``new`` into ``tree`` in place and run the U-turn checks."""
        lo, hi = (tree, new) if direction > 0 else (new, tree)
        lo_left, lo_right, hi_left, hi_right = lo.left, lo.right, hi.left, hi.right
        rho_lo, rho_hi = lo.rho, hi.rho
        im = self.inv_mass
        rho = rho_lo + rho_hi
        ok = _no_uturn(im * lo_left.p, im * hi_right.p, rho)
        ok = ok and _no_uturn(im * lo_left.p, im * hi_left.p, rho_lo + hi_left.p)
        ok = ok and _no_uturn(im * lo_right.p, im * hi_right.p, rho_hi + lo_right.p)
        tree.left, tree.right = lo_left, hi_right
        tree.rho = rho
        tree.turning = not ok


def nuts_transition(phi, step, mass_diag, rng, grad_fn, config: SamplerConfig):
    """One multinomial NUTS transition.

    Returns ``(phi_next, stats)`` with ``stats`` keys ``accept_stat``,
    ``depth``, ``divergent``, ``n_steps``, ``energy``.
    """
    fn = _as_fn(grad_fn)
    z = np.asarray(phi, dtype=float)
    logp, grad = _evaluate(fn, z)
    if grad is None:
        raise BalmError("initial point has non-finite log density")
    state, stats = _transition(_State(z, None, logp, grad), step,
                               np.asarray(mass_diag, dtype=float), rng, fn, config)
    return state.z, stats


def _transition(_start: _State, step, mass, rng, fn, config):
    inv_mass = 1.0 / mass
    p0 = rng.standard_normal(mass.size) * np.sqrt(mass)
    current = _State(_start.z, p0, _start.logp, _start.grad)
    H0 = _hamiltonian(current, inv_mass)
    nuts = _Nuts(fn, inv_mass, step, H0, rng, config.divergence_energy_threshold)

    tree = _Tree()
    tree.left = tree.right = tree.proposal = current
    tree.log_w = 0.0
    tree.rho = p0.copy()
    n_steps = 0
    sum_acc = 0.0
    depth = 0
    divergent = False
    while depth < config.max_tree_depth:
        direction = 1 if rng.uniform() < 0.5 else -1
        edge = tree.right if direction > 0 else tree.left
        new = nuts.build(edge, direction, depth)
        depth += 1
        n_steps += new.n_steps
        sum_acc += new.sum_acc
        if new.diverging:
            divergent = True
            break
        if new.turning:
            break
        # biased progressive sampling favours the newer subtree
        if rng.uniform() < math.exp(min(0.0, new.log_w - tree.log_w)):
            tree.proposal = new.proposal
        tree.log_w = np.logaddexp(tree.log_w, new.log_w)
        nuts.join(tree, new, direction)
        if tree.turning:
            break
    chosen = tree.proposal
    stats = {
        "accept_stat": sum_acc / max(n_steps, 1),
        "depth": depth,
        "divergent": divergent,
        "n_steps": n_steps,
        "energy": _hamiltonian(chosen, inv_mass),
    }
    return _State(chosen.z, None, chosen.logp, chosen.grad), stats


# ---------------------------------------------------------------------------
# adaptation


class DualAveraging:
    """Nesterov dual averaging on ``log(step)``."""

    def __init__(self, step0: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.restart(step0)

    def restart(self, step0: float) -> None:
        self.mu = math.log(10 * step0)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0
        self.step = step0

    def update(self, accept_stat: float) -> float:
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1 - eta) * self.s_bar + eta * (self.target - accept_stat)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        w = self.counter ** (-self.kappa)
        self.x_bar = w * x + (1 - w) * self.x_bar
        self.step = math.exp(x)
        return self.step

    @property
    def final_step(self) -> float:
        return math.exp(self.x_bar)


def slow_windows(warmup: int) -> list[tuple[int, int]]:
    """Metric-adaptation windows ``[start, end)`` inside the warm-up phase."""
    end_slow = warmup - TERM_BUFFER
    out = []
    start, size = INIT_BUFFER, BASE_WINDOW
    while start < end_slow:
        end = start + size
        if end + 2 * size > end_slow:
            end = end_slow
        out.append((start, end))
        start = end
        size *= 2
    return out


def find_reasonable_step(state: _State, mass: np.ndarray, fn, rng, step: float = 1.0) -> float:
    """Double or halve ``step`` until one leapfrog step crosses acceptance 0.5."""
    inv_mass = 1.0 / mass

    def log_accept(eps):
        p = rng.standard_normal(mass.size) * np.sqrt(mass)
        start = _State(state.z, p, state.logp, state.grad)
        new = _leapfrog_state(start, eps, inv_mass, fn)
        if new is None:
            return -np.inf
        d = _hamiltonian(start, inv_mass) - _hamiltonian(new, inv_mass)
        return d if np.isfinite(d) else -np.inf

    la = log_accept(step)
    direction = 1 if la > math.log(0.5) else -1
    for _ in range(100):
        if direction == 1 and not la > math.log(0.5):
            break
        if direction == -1 and not la < math.log(0.5):
            break
        step = step * 2.0 if direction == 1 else step / 2.0
        if step > 1e7 or step < 1e-12:
            break
        la = log_accept(step)
    return step


def _regularized_variance(samples: np.ndarray) -> np.ndarray:
    n = samples.shape[0]
    var = samples.var(axis=0, ddof=1)
    return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


@dataclass
class ChainResult:
    phi: np.ndarray
    energy: np.ndarray
    divergent: np.ndarray
    depth: np.ndarray
    accept_stat: np.ndarray
    step_size: float
    mass_diag: np.ndarray
    warmup_divergences: int = 0


def run_chain(target, init_phi: np.ndarray, config: SamplerConfig, rng: np.random.Generator) -> ChainResult:
    """Warm up and sample a single chain from ``init_phi``."""
    fn = _as_fn(target)
    z = np.array(init_phi, dtype=float)
    logp, grad = _evaluate(fn, z)
    if grad is None:
        raise BalmError("initial point has non-finite log density")
    state = _State(z, None, logp, grad)
    dim = z.size
    mass = np.ones(dim)
    step = find_reasonable_step(state, mass, fn, rng)
    da = DualAveraging(step, config.target_accept)
    windows = slow_windows(config.warmup_iters)
    window_ends = {end: start for start, end in windows}
    buffer = []
    warm_div = 0

    for it in range(config.warmup_iters):
        state, stats = _transition(state, step, mass, rng, fn, config)
        warm_div += stats["divergent"]
        step = da.update(stats["accept_stat"])
        if any(s <= it < e for s, e in windows):
            buffer.append(state.z)
        if it + 1 in window_ends:
            # one dual-averaging run spans the whole warm-up; restarting it
            # here leaves too few terminal iterations for x_bar to settle
            mass = 1.0 / _regularized_variance(np.asarray(buffer))
            buffer = []
    step = da.final_step

    S = config.sampling_iters
    out = ChainResult(
        phi=np.empty((S, dim)), energy=np.empty(S), divergent=np.zeros(S, dtype=bool),
        depth=np.zeros(S, dtype=np.int64), accept_stat=np.empty(S),
        step_size=step, mass_diag=mass, warmup_divergences=warm_div,
    )
    for it in range(S):
        state, stats = _transition(state, step, mass, rng, fn, config)
        out.phi[it] = state.z
        out.energy[it] = stats["energy"]
        out.divergent[it] = stats["divergent"]
        out.depth[it] = stats["depth"]
        out.accept_stat[it] = stats["accept_stat"]
    return out


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    """Independent stream per ``(seed, chain)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, chain])))


def _chain_job(args):
    target, init_fn, config, chain = args
    rng = chain_rng(config.seed, chain)
    init = init_fn(rng)
    return run_chain(target, init, config, rng)


def sample(target, init_fn, config: SamplerConfig, names: Optional[list[str]] = None,
           threads: int = 1, chain_ids: Optional[list[int]] = None) -> PosteriorDraws:
    """Run ``config.chains`` chains on a generic target.

    ``init_fn(rng)`` returns a starting vector. Chain ``c`` depends only on
    ``(config.seed, c)``, not on other chains or on ``threads``.
    """
    ids = list(range(config.chains)) if chain_ids is None else list(chain_ids)
    jobs = [(target, init_fn, config, c) for c in ids]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_chain_job, jobs))
    else:
        results = [_chain_job(j) for j in jobs]
    dim = results[0].phi.shape[1]
    return PosteriorDraws(
        phi=np.stack([r.phi for r in results]),
        energy=np.stack([r.energy for r in results]),
        divergent=np.stack([r.divergent for r in results]),
        depth=np.stack([r.depth for r in results]),
        accept_stat=np.stack([r.accept_stat for r in results]),
        step_size=np.array([r.step_size for r in results]),
        mass_diag=np.stack([r.mass_diag for r in results]),
        names=names if names is not None else [f"phi[{i + 1}]" for i in range(dim)],
        max_tree_depth=config.max_tree_depth,
    )


class PriorInit:
    """Prior draw packed to the flat scale plus Gaussian jitter."""

    def __init__(self, data: LayerDataset, spec: ModelSpec, jitter: float, target=None):
        self.data = data
        self.spec = spec
        self.jitter = jitter
        self.target = target

    def __call__(self, rng: np.random.Generator) -> np.ndarray:
        from .model import draw_prior

        fn = _as_fn(self.target) if self.target is not None else None
        for _ in range(100):
            phi = pack(draw_prior(self.spec, self.data, rng), self.spec, self.data)
            phi = phi + self.jitter * rng.standard_normal(phi.size)
            if fn is None or _evaluate(fn, phi)[1] is not None:
                return phi
        raise BalmError("could not find a finite initial point in 100 prior draws")


def adapt_and_sample(data: LayerDataset, spec: ModelSpec, config: SamplerConfig,
                     threads: int = 1) -> PosteriorDraws:
    """Fit the model by NUTS; see :func:`sample` for the determinism contract."""
    from .gradients import LogPosterior

    target = LogPosterior(data, spec)
    init = PriorInit(data, spec, config.init_jitter_scale, target)
    draws = sample(target, init, config, names=target.layout.names(), threads=threads)
    draws.layout = target.layout
    draws.covariates = data.covariates
    if draws.unreliable:
        logger.warning("%.1f%% post-warm-up divergences; run marked unreliable",
                       100 * draws.divergence_fraction)
    return draws
