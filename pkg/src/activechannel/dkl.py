"""Deep kernel learning: an RBF GP on top of an MLP embedding.

Three ways of fitting the same model:

* ``single``   -- joint Adam ascent on the log marginal likelihood,
* ``ensemble`` -- several independently initialised ``single`` fits,
* ``bayes``    -- NUTS over network weights and log-hyperparameters.

All of them predict through the same exact-GP posterior; multi-member
models combine members by the law of total variance.

The flat parameter vector used for optimisation and sampling is
``[mlp weights (layer by layer, W then b), log alpha, log l, log noise]``.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from . import gp
from ._kernels import joint_lml_kernel
from .container import read_container, read_manifest, write_container
from .errors import IngestionError, InvalidConfigError, NumericError, ShapeError
from .nn import (AdamState, MlpParams, adam_update, layer_sizes, mlp_backward, mlp_forward, mlp_init,
                 n_params)
from .nuts import HmcConfig, SampleSet, nuts_sample
from .seeding import as_seed, derive_rng
from .transforms import ScalarTransform

BACKENDS = ("single", "ensemble", "bayes")
LOG_2PI = np.log(2 * np.pi)
FUSED_MAX_POINTS = 160


@dataclass(frozen=True)
class Architecture:
    hidden: tuple = (64, 32)
    latent: int = 2

    def sizes(self, in_dim):
        return layer_sizes(in_dim, self.hidden, self.latent)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    lr: float = 1e-3
    init_alpha: float = 1.0
    init_lengthscale: float = 1.0
    init_noise: float = 0.1
    target_norm: str = "standardize"

    def __post_init__(self):
        if self.steps < 0 or self.lr <= 0:
            raise InvalidConfigError("train steps must be >= 0 and lr > 0")
        if self.target_norm not in ScalarTransform.SCHEMES:
            raise InvalidConfigError(f"unknown target normalisation {self.target_norm!r}")


@dataclass(frozen=True)
class DklPriors:
    """Standard normal on every weight; LogNormal(0, 1) on alpha, l and noise.

    In log-space the LogNormal(0, 1) prior plus its Jacobian is exactly a
    standard normal, so the full log-prior is ``-0.5 * |theta|^2`` up to a
    constant. ``likelihood=False`` drops the data term (prior-only test hook).
    """

    weight_scale: float = 1.0
    log_hyper_scale: float = 1.0
    likelihood: bool = True

    def logpdf(self, theta, n_weights):
        scale = np.full(theta.size, self.log_hyper_scale)
        scale[:n_weights] = self.weight_scale
        w = theta / scale
        lp = -0.5 * (w @ w) - 0.5 * theta.size * LOG_2PI - np.log(scale).sum()
        return lp, -w / scale


@dataclass
class DklModel:
    backend: str
    sizes: list
    X_train: np.ndarray
    y_train: np.ndarray            # normalised targets the GP was fit on
    y_transform: ScalarTransform
    members: list = field(default_factory=list)   # [(MlpParams, GpHyperparams)]
    samples: Optional[SampleSet] = None
    history: list = field(default_factory=list)   # LML per Adam step (single only)

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise InvalidConfigError(f"unknown backend {self.backend!r}")
        if len(self.y_train) == 0:
            raise ShapeError("model has no training data")
        if self.backend == "single" and len(self.members) != 1:
            raise ShapeError("single backend holds exactly one member")
        if self.backend == "ensemble" and len(self.members) < 2:
            raise ShapeError("ensemble backend needs at least two members")
        if self.backend == "bayes" and self.samples is None:
            raise ShapeError("bayes backend needs a sample set")

    @property
    def n_weights(self):
        return n_params(self.sizes)

    def draw_members(self, thin=100):
        """Members to predict with; for ``bayes`` an evenly spaced subset of
        ``thin`` draws (all draws when ``thin`` is None)."""
        if self.backend != "bayes":
            return self.members
        draws = self.samples.draws
        if thin is not None and thin < len(draws):
            idx = np.linspace(0, len(draws) - 1, thin).round().astype(int)
            draws = draws[idx]
        return [unpack(self.sizes, th) for th in draws]


def pack(params, hyper):
    return np.concatenate([params.flatten(), hyper.to_log()])


def unpack(sizes, theta):
    nw = n_params(sizes)
    params = MlpParams.from_flat(sizes, np.array(theta[:nw]))
    return params, gp.GpHyperparams.from_log(theta[nw:])


def joint_lml_modular(theta, X, y, sizes, grad=True):
    """Same quantity as :func:`joint_lml`, composed from :mod:`gp` and
    :mod:`nn` with LAPACK factorisations."""
    params, hyper = unpack(sizes, theta)
    if not grad:
        return gp.log_marginal_likelihood(mlp_forward(params, X), y, hyper, grad=False)
    Z, cache = mlp_forward(params, X, return_cache=True)
    value, dZ, dlog = gp.log_marginal_likelihood(Z, y, hyper)
    gw = mlp_backward(params, X, dZ, cache)
    return value, np.concatenate([gw.flatten(), dlog])


def joint_lml(theta, X, y, sizes, grad=True):
    """Log marginal likelihood of the deep kernel and its gradient w.r.t. the
    flat parameter vector.

    Small problems run the compiled fused kernel. From
    ``FUSED_MAX_POINTS`` training points on, LAPACK's blocked Cholesky wins
    and the modular route is used.
    """
    if len(y) > FUSED_MAX_POINTS:
        return joint_lml_modular(theta, X, y, sizes, grad)
    theta = np.ascontiguousarray(theta, dtype=float)
    out = np.empty_like(theta)
    status, value = joint_lml_kernel(theta, np.ascontiguousarray(X, dtype=float),
                                     np.ascontiguousarray(y, dtype=float),
                                     np.asarray(sizes, dtype=np.int64), grad, out)
    if status != 0:
        raise NumericError("deep-kernel Cholesky failed after jitter escalation", max_jitter=gp.JITTER_MAX)
    if not grad:
        return value
    return value, out


def _init_theta(sizes, cfg, rng):
    params = mlp_init(sizes, rng)
    hyper = gp.GpHyperparams(cfg.init_alpha, cfg.init_lengthscale, cfg.init_noise)
    return pack(params, hyper)


def _adam_ascent(theta, X, y, sizes, steps, lr):
    state = AdamState.zeros(theta.size, lr=lr, maximize=True)
    history = []
    for step in range(steps):
        try:
            value, g = joint_lml(theta, X, y, sizes)
            theta, state = adam_update(state, theta, g)
        except NumericError as exc:
            raise NumericError(str(exc), step=step) from exc
        history.append(float(value))
    return theta, history


def _prepare(X, y, target_norm):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ShapeError(f"inputs {X.shape} and targets {y.shape} disagree")
    if X.shape[0] < 2:
        raise ShapeError("need at least two training points")
    yt = ScalarTransform.fit(y, target_norm)
    return X, yt.apply(y), yt


def fit_mle(X, y, arch=Architecture(), train=TrainConfig(), rng=0, init=None):
    """Single deep-kernel model by full-batch Adam ascent on the LML.

    ``init`` optionally gives a flat starting vector (warm start) in place of
    the seeded random initialisation.
    """
    X, yn, yt = _prepare(X, y, train.target_norm)
    sizes = arch.sizes(X.shape[1])
    seed = as_seed(rng)
    if init is None:
        theta = _init_theta(sizes, train, derive_rng(seed, "mle-init"))
    else:
        theta = np.array(init, dtype=float)
        if theta.shape != (n_params(sizes) + 3,):
            raise ShapeError(f"warm-start vector has {theta.size} entries, model needs {n_params(sizes) + 3}")
    theta, history = _adam_ascent(theta, X, yn, sizes, train.steps, train.lr)
    return DklModel("single", sizes, X, yn, yt, members=[unpack(sizes, theta)], history=history)


def fit_ensemble(X, y, arch=Architecture(), train=TrainConfig(), n_models=5, rng=0,
                 workers=1, member_seeds=None):
    """``n_models`` independent :func:`fit_mle` runs combined into one model.

    Member ``i`` is seeded from ``(seed, "ensemble-member", i)`` unless
    ``member_seeds`` overrides it.
    """
    if n_models < 2:
        raise InvalidConfigError("an ensemble needs n_models >= 2")
    seed = as_seed(rng)
    if member_seeds is None:
        member_seeds = [as_seed(derive_rng(seed, "ensemble-member", i)) for i in range(n_models)]
    elif len(member_seeds) != n_models:
        raise InvalidConfigError("member_seeds length must equal n_models")

    def one(i):
        try:
            return fit_mle(X, y, arch, train, member_seeds[i])
        except NumericError as exc:
            raise NumericError(str(exc), member=i) from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fits = list(pool.map(one, range(n_models)))
    else:
        fits = [one(i) for i in range(n_models)]
    first = fits[0]
    return DklModel("ensemble", first.sizes, first.X_train, first.y_train, first.y_transform,
                    members=[f.members[0] for f in fits])


def make_log_posterior(X, y, sizes, priors):
    """Closure ``theta -> (log posterior, gradient)`` for :func:`nuts_sample`.

    Numerical failure of the likelihood maps to ``-inf`` so the sampler
    treats it as a divergence.
    """
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    sz = np.asarray(sizes, dtype=np.int64)
    nw = n_params(sizes)
    P = nw + 3
    scale = np.full(P, priors.log_hyper_scale)
    scale[:nw] = priors.weight_scale
    prec = 1.0 / scale ** 2
    const = -0.5 * P * LOG_2PI - np.log(scale).sum()
    use_lik = priors.likelihood

    def fn(theta):
        pt = prec * theta
        lp = const - 0.5 * (pt @ theta)
        if not use_lik:
            return lp, -pt
        g = np.empty(P)
        status, ll = joint_lml_kernel(theta, X, y, sz, True, g)
        if status != 0:
            return -np.inf, np.full(P, np.nan)
        g -= pt
        return lp + ll, g

    return fn


def fit_hmc(X, y, arch=Architecture(), priors=DklPriors(), hmc=HmcConfig(), rng=0,
            train=TrainConfig(), warm_start_steps=100):
    """Fully Bayesian deep kernel: NUTS over weights and log-hyperparameters.

    Chains start from a short MLE warm start of ``warm_start_steps`` Adam
    steps.
    """
    X, yn, yt = _prepare(X, y, train.target_norm)
    sizes = arch.sizes(X.shape[1])
    seed = as_seed(rng)
    theta0 = _init_theta(sizes, train, derive_rng(seed, "hmc-init"))
    if priors.likelihood and warm_start_steps:
        theta0, _ = _adam_ascent(theta0, X, yn, sizes, warm_start_steps, train.lr)
    fn = make_log_posterior(X, yn, sizes, priors)
    samples = nuts_sample(fn, theta0, replace(hmc, seed=as_seed(derive_rng(seed, "hmc-nuts"))))
    return DklModel("bayes", sizes, X, yn, yt, samples=samples)


def _check_xstar(model, Xstar):
    Xstar = np.asarray(Xstar, dtype=float)
    if Xstar.ndim != 2 or Xstar.shape[1] != model.sizes[0] or Xstar.shape[0] == 0:
        raise ShapeError(f"prediction inputs {Xstar.shape} incompatible with input width {model.sizes[0]}")
    return Xstar


def combine_predictions(preds):
    """Law of total variance over members (population variance of means)."""
    means = np.stack([p.mean for p in preds])
    variances = np.stack([p.variance for p in preds])
    return gp.PosteriorPredictive(means.mean(axis=0), variances.mean(axis=0) + means.var(axis=0))


def predict(model, Xstar, thin=100, units="original"):
    """Posterior predictive at ``Xstar``.

    ``thin`` applies to the bayes backend only (``None`` uses every draw).
    ``units="original"`` undoes the target normalisation; ``"model"`` keeps
    the normalised scale.
    """
    Xstar = _check_xstar(model, Xstar)
    preds = []
    for params, hyper in model.draw_members(thin):
        Ztr = mlp_forward(params, model.X_train)
        Zs = mlp_forward(params, Xstar)
        preds.append(gp.posterior_predictive(Ztr, model.y_train, Zs, hyper))
    pred = preds[0] if len(preds) == 1 else combine_predictions(preds)
    if units == "original":
        yt = model.y_transform
        pred = gp.PosteriorPredictive(yt.invert(pred.mean), pred.variance * yt.scale ** 2)
    elif units != "model":
        raise InvalidConfigError(f"unknown units {units!r}")
    return pred


class Embedding(NamedTuple):
    z: np.ndarray
    source: str


def embed(model, X, mode="first"):
    """Latent coordinates ``g(X)``.

    For multi-member models ``mode`` picks the network: ``"first"`` member
    (or first retained draw) or ``"mean"`` of the member weights.
    """
    X = _check_xstar(model, X)
    members = model.draw_members(None)
    if model.backend == "single" or mode == "first":
        params = members[0][0]
        source = "single" if model.backend == "single" else "first-member"
    elif mode == "mean":
        flat = np.mean([m[0].flatten() for m in members], axis=0)
        params = MlpParams.from_flat(model.sizes, flat)
        source = "mean-weights"
    else:
        raise InvalidConfigError(f"unknown embedding mode {mode!r}")
    return Embedding(mlp_forward(params, X), source)


def mean_uncertainty(pred):
    """Average predictive variance over all points."""
    var = pred.variance if isinstance(pred, gp.PosteriorPredictive) else np.asarray(pred, dtype=float)
    if var.size == 0:
        raise ValueError("empty prediction")
    return float(var.mean())


# -- persistence -------------------------------------------------------------

def save_model(path, model):
    """Write a fitted model as a container (see :mod:`activechannel.container`).

    Bayes models keep only the draws and their log densities; the sampler
    diagnostics are not persisted.
    """
    yt = model.y_transform
    if model.backend == "bayes":
        thetas = model.samples.draws
        arrays = {"theta": thetas, "logp": model.samples.logp}
    else:
        thetas = np.stack([pack(p, h) for p, h in model.members])
        arrays = {"theta": thetas}
    arrays.update({"X_train": model.X_train, "y_train": model.y_train})
    fields = {"kind": "dkl-model", "backend": model.backend, "sizes": [int(s) for s in model.sizes],
              "y_transform": {"scheme": yt.scheme, "shift": float(yt.shift), "scale": float(yt.scale),
                              "constant": bool(yt.constant)}}
    if model.backend == "bayes":
        fields["chains"] = int(model.samples.chains)
    return write_container(path, fields, arrays)


def load_model(path):
    """Inverse of :func:`save_model`."""
    manifest = read_manifest(path)
    if manifest.get("kind") != "dkl-model":
        raise IngestionError(f"expected a model, got kind {manifest.get('kind')!r}", field="kind")
    try:
        backend = manifest["backend"]
        sizes = [int(s) for s in manifest["sizes"]]
        t = manifest["y_transform"]
        yt = ScalarTransform(t["scheme"], float(t["shift"]), float(t["scale"]), bool(t["constant"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestionError(f"missing or malformed field: {exc}", field="manifest") from exc
    P = n_params(sizes) + 3
    manifest, arrays = read_container(path)
    for name in ("theta", "X_train", "y_train"):
        if name not in arrays:
            raise IngestionError("array missing", field=name)
    theta = arrays["theta"]
    if theta.ndim != 2 or theta.shape[1] != P:
        raise IngestionError(f"parameter rows need {P} entries, got shape {theta.shape}", field="theta")
    if arrays["X_train"].shape[1:] != (sizes[0],):
        raise IngestionError("training inputs do not match the input width", field="X_train")
    if backend == "bayes":
        S = theta.shape[0]
        logp = arrays.get("logp", np.full(S, np.nan))
        samples = SampleSet(theta, logp, np.full(S, np.nan), np.zeros(S, int), np.zeros(S, int),
                            np.zeros(S, bool), np.full(1, np.nan), int(manifest.get("chains", 1)))
        return DklModel(backend, sizes, arrays["X_train"], arrays["y_train"], yt, samples=samples)
    members = [unpack(sizes, th) for th in theta]
    return DklModel(backend, sizes, arrays["X_train"], arrays["y_train"], yt, members=members)
