"""Active channel learning: warm-up, epsilon-greedy exploration, max-variance
acquisition, and the static channel-identification benchmark.

The loop talks to models only through a *predictor*: a callable

    predictor(channel, X_train, y_train, X_star, seed) -> PosteriorPredictive

returning predictions in original target units. :class:`DklPredictor`
wraps the three deep-kernel backends; tests inject fixed-variance mocks.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
import csv
import io
import json
import logging
from typing import Callable, Optional

import numpy as np

from . import dkl
from .errors import ExperimentComplete, InvalidConfigError, NumericError
from .gp import PosteriorPredictive
from .nuts import HmcConfig
from .seeding import as_seed, derive_rng
from .transforms import SCHEMES, AffineTransform

logger = logging.getLogger(__name__)

LOOP_BACKENDS = ("mle", "ensemble", "hmc")


@dataclass(frozen=True)
class LoopConfig:
    """Everything that shapes a run. Unknown keys are rejected by
    :meth:`from_dict`."""

    backend: str = "hmc"
    seed: int = 0
    init_fraction: Optional[float] = 0.02
    init_count: Optional[int] = None
    warmup_steps: int = 5
    explore_steps: int = 20
    eps_start: float = 0.4
    eps_end: float = 0.1
    input_norm: str = "standardize"
    target_norm: str = "standardize"
    hidden: tuple = (64, 32)
    latent: int = 2
    train_steps: int = 500
    lr: float = 1e-3
    init_noise: float = 0.1
    ensemble_size: int = 5
    hmc_warmup: int = 500
    hmc_samples: int = 500
    hmc_chains: int = 1
    hmc_max_tree_depth: int = 8
    hmc_target_accept: float = 0.8
    hmc_warm_start_steps: int = 100
    predict_thin: Optional[int] = 100
    warmup_counts_all: bool = True
    warm_start: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.backend not in LOOP_BACKENDS:
            raise InvalidConfigError(f"unknown backend {self.backend!r}; expected one of {LOOP_BACKENDS}")
        if self.init_count is None and self.init_fraction is None:
            raise InvalidConfigError("set init_fraction or init_count")
        if self.init_fraction is not None and not 0 < self.init_fraction < 1:
            raise InvalidConfigError("init_fraction must lie in (0, 1)")
        if self.warmup_steps < 0 or self.explore_steps < 0:
            raise InvalidConfigError("step counts must be non-negative")
        for name in ("eps_start", "eps_end"):
            if not 0 <= getattr(self, name) <= 1:
                raise InvalidConfigError(f"{name} must lie in [0, 1]")
        for name in ("input_norm", "target_norm"):
            if getattr(self, name) not in SCHEMES:
                raise InvalidConfigError(f"{name} must be one of {SCHEMES}")
        if self.ensemble_size < 2:
            raise InvalidConfigError("ensemble_size must be >= 2")
        if self.workers < 1:
            raise InvalidConfigError("workers must be >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        self.hmc_config()
        self.train_config()

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfigError(str(exc)) from exc

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def arch(self):
        return dkl.Architecture(self.hidden, self.latent)

    def train_config(self):
        return dkl.TrainConfig(steps=self.train_steps, lr=self.lr, init_noise=self.init_noise,
                               target_norm=self.target_norm)

    def hmc_config(self):
        return HmcConfig(self.hmc_warmup, self.hmc_samples, self.hmc_chains,
                         self.hmc_target_accept, self.hmc_max_tree_depth, 0, self.workers)


class DklPredictor:
    """Fits a fresh deep-kernel model per call and predicts on ``X_star``.

    With ``warm_start`` the previous fit of the same channel seeds the next
    one (MLE backends) instead of a fresh random initialisation.
    """

    def __init__(self, config):
        self.config = config
        self._last = {}

    def fit(self, channel, X, y, seed):
        c = self.config
        if c.backend == "mle":
            init = self._last.get(channel) if c.warm_start else None
            model = dkl.fit_mle(X, y, c.arch(), c.train_config(), seed, init=init)
            self._last[channel] = dkl.pack(*model.members[0])
        elif c.backend == "ensemble":
            model = dkl.fit_ensemble(X, y, c.arch(), c.train_config(), c.ensemble_size, seed,
                                     workers=c.workers)
        else:
            model = dkl.fit_hmc(X, y, c.arch(), dkl.DklPriors(), c.hmc_config(), seed,
                                c.train_config(), c.hmc_warm_start_steps)
        return model

    def __call__(self, channel, X, y, X_star, seed):
        model = self.fit(channel, X, y, seed)
        return dkl.predict(model, X_star, thin=self.config.predict_thin)


@dataclass
class ChannelDataset:
    """Co-registered channels over one index set plus a measurement oracle.

    ``measured`` keeps the order in which rows were measured.
    """

    channels: list
    oracle: Callable[[int], float]
    measured: list = field(default_factory=list)
    names: Optional[list] = None
    correct_channel: Optional[int] = None

    def __post_init__(self):
        self.channels = [np.asarray(c, dtype=float) for c in self.channels]
        if not self.channels:
            raise InvalidConfigError("need at least one channel")
        rows = {c.shape[0] for c in self.channels}
        if len(rows) != 1:
            raise InvalidConfigError(f"channels disagree on row count: {sorted(rows)}")
        if self.names is None:
            self.names = [f"channel{i + 1}" for i in range(len(self.channels))]
        self.measured = [int(i) for i in self.measured]
        if len(set(self.measured)) != len(self.measured):
            raise InvalidConfigError("a row is listed as measured twice")
        self._values = {}

    @classmethod
    def from_targets(cls, channels, targets, **kw):
        targets = np.asarray(targets, dtype=float)
        return cls(channels, lambda i: float(targets[i]), **kw)

    @property
    def n_rows(self):
        return self.channels[0].shape[0]

    @property
    def n_channels(self):
        return len(self.channels)

    @property
    def unmeasured(self):
        mask = np.ones(self.n_rows, dtype=bool)
        mask[self.measured] = False
        return np.flatnonzero(mask)

    def measure(self, row):
        row = int(row)
        if row in self._values:
            raise InvalidConfigError(f"row {row} already measured")
        self._values[row] = float(self.oracle(row))
        if row not in self.measured:
            self.measured.append(row)
        return self._values[row]

    def targets(self):
        return np.array([self._values[i] for i in self.measured])

    def copy(self):
        ds = ChannelDataset(self.channels, self.oracle, list(self.measured), list(self.names),
                            self.correct_channel)
        ds._values = dict(self._values)
        return ds


@dataclass
class ChannelRewards:
    cumulative: np.ndarray
    counts: np.ndarray

    @classmethod
    def zeros(cls, n_channels):
        return cls(np.zeros(n_channels), np.zeros(n_channels, dtype=int))

    @property
    def average(self):
        out = np.zeros_like(self.cumulative)
        seen = self.counts > 0
        out[seen] = self.cumulative[seen] / self.counts[seen]
        return out

    def to_dict(self):
        return {"cumulative": self.cumulative.tolist(), "counts": self.counts.tolist(),
                "average": self.average.tolist()}


@dataclass
class ExperimentTrace:
    records: list
    config: dict
    rewards: ChannelRewards
    channel_names: list
    initial_measured: list
    status: str = "running"

    def to_dict(self):
        return {
            "status": self.status,
            "channel_names": list(self.channel_names),
            "initial_measured": [int(i) for i in self.initial_measured],
            "config": self.config,
            "records": self.records,
            "final_rewards": self.rewards.to_dict(),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=False) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "phase", "channel", "V_m", "reward", "point", "epsilon"])
        for r in self.records:
            ch = r["chosen_channel"]
            eps = "" if r["epsilon"] is None else repr(r["epsilon"])
            w.writerow([r["step"], r["phase"], ch, repr(r["vm"][ch]), r["reward_deltas"][ch],
                        r["point"], eps])
        return buf.getvalue()

    def save(self, json_path, csv_path=None):
        with open(json_path, "w", encoding="utf-8") as f:
            f.write(self.to_json())
        if csv_path is not None:
            with open(csv_path, "w", encoding="utf-8", newline="") as f:
                f.write(self.to_csv())

    @classmethod
    def from_dict(cls, d):
        fr = d["final_rewards"]
        rewards = ChannelRewards(np.asarray(fr["cumulative"], dtype=float),
                                 np.asarray(fr["counts"], dtype=int))
        return cls(d["records"], d["config"], rewards, d["channel_names"], d["initial_measured"],
                   d["status"])


def acquisition_max_variance(pred):
    """Position of the largest predictive variance (first one on ties)."""
    var = pred.variance if isinstance(pred, PosteriorPredictive) else np.asarray(pred, dtype=float)
    if var.size == 0:
        raise ExperimentComplete("no unmeasured points left")
    return int(np.argmax(var))


def anneal_epsilon(step, total_steps, eps_start, eps_end):
    """Linear schedule from ``eps_start`` (step 0) to ``eps_end`` (last step)."""
    if total_steps < 1:
        raise InvalidConfigError("total_steps must be >= 1")
    if not 0 <= step < total_steps:
        raise InvalidConfigError(f"step {step} outside [0, {total_steps})")
    if total_steps == 1:
        return float(eps_start)
    return float(eps_start + (eps_end - eps_start) * step / (total_steps - 1))


def epsilon_greedy_select(rewards, eps, rng):
    """Uniform channel with probability ``eps``, else the best average reward
    (lowest index on ties). Always consumes exactly one uniform draw, plus one
    integer draw when exploring."""
    avg = rewards.average if isinstance(rewards, ChannelRewards) else np.asarray(rewards, dtype=float)
    if avg.size < 1:
        raise InvalidConfigError("need at least one channel")
    if not 0 <= eps <= 1:
        raise InvalidConfigError(f"epsilon must lie in [0, 1], got {eps}")
    if rng.random() < eps:
        return int(rng.integers(avg.size))
    return int(np.argmax(avg))


class LoopState:
    """Mutable bookkeeping for one run."""

    def __init__(self, dataset, config, predictor, features):
        self.dataset = dataset
        self.config = config
        self.predictor = predictor
        self.features = features
        self.rewards = ChannelRewards.zeros(dataset.n_channels)
        self.last_vm = [None] * dataset.n_channels
        self.records = []
        self.seed = config.seed

    @property
    def step(self):
        return len(self.records)

    def _predict(self, channel):
        ds = self.dataset
        X = self.features[channel]
        star = ds.unmeasured
        if star.size == 0:
            raise ExperimentComplete("no unmeasured points left")
        seed = as_seed(derive_rng(self.seed, "model", self.step, channel))
        try:
            pred = self.predictor(channel, X[ds.measured], ds.targets(), X[star], seed)
        except NumericError as exc:
            raise NumericError(str(exc), step=self.step, channel=channel) from exc
        return pred, star

    def _measure(self, pred, star):
        row = int(star[acquisition_max_variance(pred)])
        return row, self.dataset.measure(row)


def _record(step, phase, evaluated, vm, deltas, chosen, row, value, eps):
    return {
        "step": step,
        "phase": phase,
        "channels_evaluated": evaluated,
        "vm": vm,
        "reward_deltas": deltas,
        "chosen_channel": chosen,
        "point": row,
        "target": value,
        "epsilon": eps,
    }


def warmup_step(state):
    """Fit every channel, reward the lowest mean uncertainty, measure where
    the winner is least certain."""
    n_ch = state.dataset.n_channels
    workers = state.config.workers
    if workers > 1 and n_ch > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(state._predict, range(n_ch)))
    else:
        results = [state._predict(c) for c in range(n_ch)]
    vms = [dkl.mean_uncertainty(pred) for pred, _ in results]
    winner = int(np.argmin(vms))
    deltas = [0] * n_ch
    deltas[winner] = 1
    state.rewards.cumulative[winner] += 1
    if state.config.warmup_counts_all:
        state.rewards.counts += 1
    else:
        state.rewards.counts[winner] += 1
    state.last_vm = list(vms)
    pred, star = results[winner]
    row, value = state._measure(pred, star)
    rec = _record(state.step, "warmup", list(range(n_ch)), vms, deltas, winner, row, value, None)
    state.records.append(rec)
    return rec


def explore_step(state, eps):
    """Pick one channel epsilon-greedily, fit it, reward +1 if its mean
    uncertainty dropped since its last evaluation (-1 otherwise), measure."""
    n_ch = state.dataset.n_channels
    rng = derive_rng(state.seed, "epsilon", state.step)
    channel = epsilon_greedy_select(state.rewards, eps, rng)
    pred, star = state._predict(channel)
    vm = dkl.mean_uncertainty(pred)
    prev = state.last_vm[channel]
    reward = 1 if prev is not None and vm < prev else -1
    deltas = [0] * n_ch
    deltas[channel] = reward
    state.rewards.cumulative[channel] += reward
    state.rewards.counts[channel] += 1
    state.last_vm[channel] = vm
    vms = [None] * n_ch
    vms[channel] = vm
    row, value = state._measure(pred, star)
    rec = _record(state.step, "explore", [channel], vms, deltas, channel, row, value, eps)
    state.records.append(rec)
    return rec


def normalize_channels(channels, scheme):
    """Per-column normalisation fitted once on each full (unlabelled) channel."""
    return [AffineTransform.fit(c, scheme).apply(c) for c in channels]


def initial_indices(n_rows, config):
    count = config.init_count if config.init_count is not None else int(round(config.init_fraction * n_rows))
    if count < 2 or count >= n_rows:
        raise InvalidConfigError(f"initial training set of {count} points is unusable for {n_rows} rows")
    rng = derive_rng(config.seed, "init-split")
    return sorted(int(i) for i in rng.choice(n_rows, size=count, replace=False))


def run_active_learning(dataset, config, predictor=None):
    """Run warm-up then exploration and return the full trace.

    When ``dataset.measured`` is empty the initial set is drawn from
    ``config``. If the unmeasured pool runs dry the trace is returned early
    with status ``"exhausted"``. A numerical failure re-raises with the
    partial trace attached as ``exc.trace``.
    """
    ds = dataset.copy()
    if not ds.measured:
        ds.measured = initial_indices(ds.n_rows, config)
    for row in list(ds.measured):
        if row not in ds._values:
            ds._values[row] = float(ds.oracle(row))
    initial = list(ds.measured)
    predictor = predictor if predictor is not None else DklPredictor(config)
    state = LoopState(ds, config, predictor, normalize_channels(ds.channels, config.input_norm))
    trace = ExperimentTrace(state.records, config.to_dict(), state.rewards, list(ds.names), initial)
    try:
        for _ in range(config.warmup_steps):
            warmup_step(state)
        for i in range(config.explore_steps):
            explore_step(state, anneal_epsilon(i, config.explore_steps, config.eps_start, config.eps_end))
        trace.status = "complete"
    except ExperimentComplete:
        trace.status = "exhausted"
    except Exception as exc:
        trace.status = "failed"
        exc.trace = trace
        raise
    return trace


def _split_train(n_rows, fraction, rng):
    n_train = int(round(fraction * n_rows))
    if n_train < 2 or n_train >= n_rows:
        raise InvalidConfigError(f"fraction {fraction} gives {n_train} training points out of {n_rows}")
    perm = rng.permutation(n_rows)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def static_channel_benchmark(dataset, config, train_fractions, trials, predictor=None):
    """How often the designated correct channel has the strictly lowest mean
    predictive uncertainty, over ``trials`` random splits per fraction.

    ``dataset`` is a :class:`ChannelDataset` with ``correct_channel`` set;
    its oracle is evaluated on every row. Returns one dict per fraction.
    """
    if dataset.correct_channel is None:
        raise InvalidConfigError("benchmark needs a dataset with a correct-channel label")
    if trials < 1:
        raise InvalidConfigError("trials must be >= 1")
    predictor = predictor if predictor is not None else DklPredictor(config)
    features = normalize_channels(dataset.channels, config.input_norm)
    y = np.array([dataset.oracle(i) for i in range(dataset.n_rows)])
    truth = dataset.correct_channel
    for frac in train_fractions:
        _split_train(dataset.n_rows, frac, np.random.default_rng(0))  # validate before any fitting
    rows = []
    for fi, frac in enumerate(train_fractions):
        hits = 0
        vms_all = []
        for t in range(trials):
            tr, te = _split_train(dataset.n_rows, frac, derive_rng(config.seed, "bench-split", fi, t))
            vms = []
            for c, X in enumerate(features):
                seed = as_seed(derive_rng(config.seed, "bench-model", fi, t, c))
                vms.append(dkl.mean_uncertainty(predictor(c, X[tr], y[tr], X[te], seed)))
            others = [v for c, v in enumerate(vms) if c != truth]
            hits += int(all(vms[truth] < v for v in others))
            vms_all.append(vms)
        rows.append({"fraction": float(frac), "accuracy": hits / trials, "trials": trials,
                     "correct": hits, "vm": vms_all})
        logger.info("fraction %.3f: accuracy %.3f", frac, hits / trials)
    return rows
