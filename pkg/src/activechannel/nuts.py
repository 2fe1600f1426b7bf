"""No-U-Turn Hamiltonian Monte Carlo with dual-averaging step-size adaptation.

Identity mass matrix, multinomial trajectory sampling (biased progressive
sampling at the top level, uniform within subtrees) and the generalized
U-turn criterion with the extra cross-subtree checks.

The target is given as ``logdensity_with_grad(q) -> (logp, grad)``.

References
----------
M. D. Hoffman and A. Gelman (2014). The No-U-Turn Sampler. JMLR 15.
M. Betancourt (2017). A Conceptual Introduction to Hamiltonian Monte Carlo.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
import math

import numpy as np

from .errors import InvalidConfigError, NumericError
from .seeding import derive_rng

logger = logging.getLogger(__name__)

MAX_DELTA_H = 1000.0


@dataclass(frozen=True)
class HmcConfig:
    warmup_steps: int = 2000
    samples: int = 2000
    chains: int = 1
    target_accept: float = 0.8
    max_tree_depth: int = 8
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.warmup_steps < 1 or self.samples < 1 or self.chains < 1:
            raise InvalidConfigError("warmup_steps, samples and chains must all be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise InvalidConfigError(f"target_accept must lie in (0, 1), got {self.target_accept}")
        if not 1 <= self.max_tree_depth <= 12:
            raise InvalidConfigError(f"max_tree_depth must lie in [1, 12], got {self.max_tree_depth}")


@dataclass
class SampleSet:
    """Post-warmup draws, chain-major."""

    draws: np.ndarray          # [S x P]
    logp: np.ndarray           # [S]
    accept_stat: np.ndarray    # [S]
    tree_depth: np.ndarray     # [S]
    n_leapfrog: np.ndarray     # [S]
    divergent: np.ndarray      # [S] bool
    step_size: np.ndarray      # [chains]
    chains: int = 1
    warmup_divergences: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def n_divergent(self):
        return int(self.divergent.sum())

    @property
    def divergence_warning(self):
        return self.n_divergent > 0.1 * len(self.divergent)

    @property
    def mean_accept(self):
        return float(self.accept_stat.mean())

    def by_chain(self):
        """Draws reshaped to ``[chains x samples x P]``."""
        return self.draws.reshape(self.chains, -1, self.draws.shape[1])


def leapfrog(q, p, step_size, grad_fn, grad_q=None):
    """One velocity-Verlet step for unit mass.

    ``grad_fn(q)`` returns ``(logp, grad logp)``. ``grad_q`` is the gradient
    at ``q`` if already known. Returns ``(q', p', logp', grad')``; a
    non-finite gradient anywhere yields non-finite outputs, which callers
    treat as a divergence.
    """
    if grad_q is None:
        _, grad_q = grad_fn(q)
    p_half = p + (0.5 * step_size) * grad_q
    q_new = q + step_size * p_half
    logp_new, grad_new = grad_fn(q_new)
    p_new = p_half + (0.5 * step_size) * grad_new
    return q_new, p_new, logp_new, grad_new


class _Tree:
    __slots__ = ("q_minus", "p_minus", "g_minus", "q_plus", "p_plus", "g_plus",
                 "q_prop", "logp_prop", "g_prop", "log_w", "rho", "turning",
                 "diverging", "sum_accept", "n_leapfrog")


def _no_turn(rho, p_start, p_end):
    return float(rho @ p_start) > 0.0 and float(rho @ p_end) > 0.0


def _logaddexp(a, b):
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    m = a if a > b else b
    return m + math.log(math.exp(a - m) + math.exp(b - m))


class _Nuts:
    def __init__(self, fn, max_depth, rng):
        self.fn = fn
        self.max_depth = max_depth
        self.rng = rng

    def _leaf(self, q, p, g, eps, H0):
        q1, p1, logp1, g1 = leapfrog(q, p, eps, self.fn, g)
        H = 0.5 * float(p1 @ p1) - logp1
        t = _Tree()
        t.q_minus = t.q_plus = t.q_prop = q1
        t.p_minus = t.p_plus = p1
        t.g_minus = t.g_plus = t.g_prop = g1
        t.logp_prop = logp1
        t.rho = p1
        t.n_leapfrog = 1
        t.turning = False
        if math.isfinite(H):
            delta = H - H0
            t.diverging = delta > MAX_DELTA_H
            t.log_w = -delta
            t.sum_accept = math.exp(-delta) if delta > 0 else 1.0
        else:
            t.diverging = True
            t.log_w = -math.inf
            t.sum_accept = 0.0
        return t

    def _merge(self, left, right, new, biased):
        """Join ``left``/``right`` (time order); ``new`` is the freshly built one."""
        old = right if new is left else left
        t = _Tree()
        t.q_minus, t.p_minus, t.g_minus = left.q_minus, left.p_minus, left.g_minus
        t.q_plus, t.p_plus, t.g_plus = right.q_plus, right.p_plus, right.g_plus
        t.log_w = _logaddexp(left.log_w, right.log_w)
        accept_log = new.log_w - (old.log_w if biased else t.log_w)
        if new.log_w > -math.inf and (accept_log >= 0 or self.rng.random() < math.exp(accept_log)):
            src = new
        else:
            src = old
        t.q_prop, t.logp_prop, t.g_prop = src.q_prop, src.logp_prop, src.g_prop
        t.rho = left.rho + right.rho
        t.sum_accept = left.sum_accept + right.sum_accept
        t.n_leapfrog = left.n_leapfrog + right.n_leapfrog
        t.diverging = left.diverging or right.diverging
        turning = left.turning or right.turning or not _no_turn(t.rho, t.p_minus, t.p_plus)
        if not turning:
            # cross-subtree checks catch U-turns hidden by the merge
            turning = (not _no_turn(left.rho + right.p_minus, left.p_minus, right.p_minus)
                       or not _no_turn(right.rho + left.p_plus, left.p_plus, right.p_plus))
        t.turning = turning
        return t

    def _build(self, q, p, g, direction, depth, eps, H0):
        if depth == 0:
            return self._leaf(q, p, g, direction * eps, H0)
        first = self._build(q, p, g, direction, depth - 1, eps, H0)
        if first.turning or first.diverging:
            return first
        if direction > 0:
            second = self._build(first.q_plus, first.p_plus, first.g_plus, direction, depth - 1, eps, H0)
            left, right = first, second
        else:
            second = self._build(first.q_minus, first.p_minus, first.g_minus, direction, depth - 1, eps, H0)
            left, right = second, first
        return self._merge(left, right, second, biased=False)

    def transition(self, q, logp, g, eps):
        p0 = self.rng.standard_normal(q.shape[0])
        H0 = -logp + 0.5 * p0 @ p0
        tree = _Tree()
        tree.q_minus = tree.q_plus = tree.q_prop = q
        tree.p_minus = tree.p_plus = p0
        tree.g_minus = tree.g_plus = tree.g_prop = g
        tree.logp_prop = logp
        tree.log_w = 0.0
        tree.rho = p0
        tree.turning = tree.diverging = False
        tree.sum_accept = 0.0
        tree.n_leapfrog = 0
        depth = 0
        while depth < self.max_depth:
            direction = 1 if self.rng.random() < 0.5 else -1
            if direction > 0:
                new = self._build(tree.q_plus, tree.p_plus, tree.g_plus, 1, depth, eps, H0)
                left, right = tree, new
            else:
                new = self._build(tree.q_minus, tree.p_minus, tree.g_minus, -1, depth, eps, H0)
                left, right = new, tree
            depth += 1
            if new.turning or new.diverging:
                # rejected subtree: keep proposal, only account for work done
                tree.sum_accept += new.sum_accept
                tree.n_leapfrog += new.n_leapfrog
                tree.diverging = tree.diverging or new.diverging
                break
            tree = self._merge(left, right, new, biased=True)
            if tree.turning:
                break
        accept = tree.sum_accept / max(tree.n_leapfrog, 1)
        return tree.q_prop, tree.logp_prop, tree.g_prop, accept, depth, tree.n_leapfrog, tree.diverging


def _find_reasonable_step(fn, q, logp, g, rng):
    eps = 1.0
    p = rng.standard_normal(q.shape[0])
    H0 = -logp + 0.5 * p @ p

    def log_ratio(e):
        _, p1, logp1, _ = leapfrog(q, p, e, fn, g)
        H1 = -logp1 + 0.5 * p1 @ p1
        return H0 - H1 if np.isfinite(H1) else -np.inf

    r = log_ratio(eps)
    a = 1.0 if r > math.log(0.5) else -1.0
    for _ in range(100):
        if not a * r > -a * math.log(2.0):
            break
        eps *= 2.0 ** a
        r = log_ratio(eps)
    return eps


class _DualAveraging:
    def __init__(self, eps0, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * eps0)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.h_bar = 0.0
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0
        self.t = 0

    def update(self, accept):
        self.t += 1
        w = 1.0 / (self.t + self.t0)
        self.h_bar = (1 - w) * self.h_bar + w * (self.target - accept)
        self.log_eps = self.mu - math.sqrt(self.t) / self.gamma * self.h_bar
        eta = self.t ** (-self.kappa)
        self.log_eps_bar = eta * self.log_eps + (1 - eta) * self.log_eps_bar
        return math.exp(self.log_eps)

    @property
    def final(self):
        return math.exp(self.log_eps_bar)


def _run_chain(fn, init, config, chain):
    rng = derive_rng(config.seed, "nuts-chain", chain)
    q = np.array(init, dtype=float)
    logp, g = fn(q)
    if not np.isfinite(logp) or not np.all(np.isfinite(g)):
        raise NumericError("log-density or gradient not finite at the initial point", chain=chain)
    nuts = _Nuts(fn, config.max_tree_depth, rng)
    eps = _find_reasonable_step(fn, q, logp, g, rng)
    adapt = _DualAveraging(eps, config.target_accept)
    warm_div = 0
    for _ in range(config.warmup_steps):
        q, logp, g, acc, _, _, div = nuts.transition(q, logp, g, eps)
        warm_div += div
        eps = adapt.update(acc)
    eps = adapt.final
    S = config.samples
    out = {
        "draws": np.empty((S, q.shape[0])),
        "logp": np.empty(S),
        "accept_stat": np.empty(S),
        "tree_depth": np.empty(S, dtype=int),
        "n_leapfrog": np.empty(S, dtype=int),
        "divergent": np.zeros(S, dtype=bool),
    }
    for i in range(S):
        q, logp, g, acc, depth, nleap, div = nuts.transition(q, logp, g, eps)
        out["draws"][i] = q
        out["logp"][i] = logp
        out["accept_stat"][i] = acc
        out["tree_depth"][i] = depth
        out["n_leapfrog"][i] = nleap
        out["divergent"][i] = div
    return out, eps, warm_div


def nuts_sample(logdensity_with_grad, init, config):
    """Draw ``config.chains * config.samples`` post-warmup samples.

    Each chain uses its own stream derived from ``(config.seed, chain)``, so
    output is identical whether chains run serially or on worker threads.

    Parameters
    ----------
    logdensity_with_grad : callable
        ``q -> (logp, grad)`` for a flat float vector ``q``.
    init : array_like
        Starting point, ``[P]`` shared by all chains or ``[chains x P]``.
    config : HmcConfig
    """
    init = np.asarray(init, dtype=float)
    inits = np.broadcast_to(init, (config.chains, init.shape[-1]))
    if config.workers > 1 and config.chains > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(lambda c: _run_chain(logdensity_with_grad, inits[c], config, c),
                                    range(config.chains)))
    else:
        results = [_run_chain(logdensity_with_grad, inits[c], config, c) for c in range(config.chains)]
    cat = {k: np.concatenate([r[0][k] for r in results]) for k in results[0][0]}
    samples = SampleSet(
        draws=cat["draws"], logp=cat["logp"], accept_stat=cat["accept_stat"],
        tree_depth=cat["tree_depth"], n_leapfrog=cat["n_leapfrog"], divergent=cat["divergent"],
        step_size=np.array([r[1] for r in results]), chains=config.chains,
        warmup_divergences=int(sum(r[2] for r in results)),
    )
    if not np.all(np.isfinite(samples.draws)):
        raise NumericError("non-finite draws")
    if samples.divergence_warning:
        logger.warning("%d of %d transitions diverged", samples.n_divergent, len(samples.divergent))
    return samples


def split_rhat(chains):
    """Split-R-hat per parameter for draws shaped ``[chains x samples x P]``."""
    chains = np.asarray(chains, dtype=float)
    if chains.ndim == 2:
        chains = chains[..., None]
    half = chains.shape[1] // 2
    split = np.concatenate([chains[:, :half], chains[:, half:2 * half]], axis=0)
    m, n = split.shape[:2]
    means = split.mean(axis=1)
    W = split.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    var_hat = (n - 1) / n * W + B / n
    return np.sqrt(var_hat / W)
