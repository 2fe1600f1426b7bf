"""Small tanh multilayer perceptron with hand-written backprop, plus Adam.

The network is the feature extractor of the deep kernel. Weight matrices are
stored ``[out x in]`` and applied as ``h @ W.T + b``; every layer except the
last is followed by ``tanh``.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigError, NumericError, ShapeError

DEFAULT_HIDDEN = (64, 32)
DEFAULT_LATENT = 2


@dataclass
class MlpParams:
    """Ordered ``(W, b)`` pairs; ``W`` is ``[out x in]``, ``b`` is ``[out]``."""

    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("an MLP needs at least one layer")
        prev = None
        for k, (W, b) in enumerate(self.layers):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ShapeError(f"layer {k}: weight {W.shape} / bias {b.shape} mismatch")
            if prev is not None and W.shape[1] != prev:
                raise ShapeError(f"layer {k}: expects {W.shape[1]} inputs, previous layer gives {prev}")
            prev = W.shape[0]

    @property
    def sizes(self):
        return [self.layers[0][0].shape[1]] + [W.shape[0] for W, _ in self.layers]

    @property
    def in_dim(self):
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self):
        return self.layers[-1][0].shape[0]

    @property
    def size(self):
        return sum(W.size + b.size for W, b in self.layers)

    def flatten(self):
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    @classmethod
    def from_flat(cls, sizes, vec):
        """Rebuild from a flat vector. The arrays are views into ``vec``."""
        vec = np.asarray(vec, dtype=float)
        layers = []
        pos = 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            W = vec[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in)
            pos += fan_in * fan_out
            b = vec[pos:pos + fan_out]
            pos += fan_out
            layers.append((W, b))
        if pos != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, layout needs {pos}")
        return cls(layers)

    def copy(self):
        return MlpParams([(W.copy(), b.copy()) for W, b in self.layers])

    def is_finite(self):
        return all(np.all(np.isfinite(W)) and np.all(np.isfinite(b)) for W, b in self.layers)


def n_params(sizes):
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def layer_sizes(in_dim, hidden=DEFAULT_HIDDEN, latent=DEFAULT_LATENT):
    return [int(in_dim), *[int(h) for h in hidden], int(latent)]


def mlp_init(sizes, rng):
    """Scaled-normal init: ``W ~ N(0, 1/fan_in)``, zero biases."""
    sizes = list(sizes)
    if len(sizes) < 2 or any(int(s) != s or s <= 0 for s in sizes):
        raise InvalidConfigError(f"layer sizes must be >= 2 positive integers, got {sizes}")
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = rng.standard_normal((fan_out, fan_in)) * np.sqrt(1.0 / fan_in)
        layers.append((W, np.zeros(fan_out)))
    return MlpParams(layers)


def _check_input(params, X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != params.in_dim:
        raise ShapeError(f"input of shape {X.shape} does not match first layer width {params.in_dim}")
    return X


def mlp_forward(params, X, return_cache=False):
    """Map ``X [n x d]`` to the latent space ``[n x latent]``.

    With ``return_cache`` also returns the list of layer inputs needed by
    :func:`mlp_backward`.
    """
    h = _check_input(params, X)
    cache = [h]
    last = len(params.layers) - 1
    for k, (W, b) in enumerate(params.layers):
        h = h @ W.T + b
        if k < last:
            h = np.tanh(h)
            cache.append(h)
    if return_cache:
        return h, cache
    return h


def mlp_backward(params, X, upstream, cache=None):
    """Vector-Jacobian product of :func:`mlp_forward` w.r.t. the parameters.

    Returns an :class:`MlpParams` holding ``d(sum(upstream * g(X))) / d params``.
    """
    X = _check_input(params, X)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (X.shape[0], params.out_dim):
        raise ShapeError(f"upstream shape {upstream.shape} != output shape {(X.shape[0], params.out_dim)}")
    if cache is None:
        _, cache = mlp_forward(params, X, return_cache=True)
    grads = [None] * len(params.layers)
    delta = upstream
    for k in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[k]
        h_in = cache[k]
        grads[k] = (delta.T @ h_in, delta.sum(axis=0))
        if k > 0:
            # cache[k] is tanh output of layer k-1
            delta = (delta @ W) * (1.0 - h_in * h_in)
    return MlpParams(grads)


@dataclass
class AdamState:
    """Adam moment accumulators over a flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    maximize: bool = field(default=False)

    @classmethod
    def zeros(cls, n, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, maximize=False):
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps, maximize)


def adam_update(state, params, grads):
    """One Adam step with bias correction.

    ``params`` and ``grads`` are flat arrays. Descends by default; a state
    built with ``maximize=True`` ascends. Returns ``(new_params, new_state)``
    without touching the inputs.
    """
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ShapeError(f"params {params.shape}, grads {grads.shape}, state {state.m.shape} disagree")
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise NumericError("non-finite gradient", component=int(bad[0]), value=float(grads[bad[0]]))
    g = -grads if state.maximize else grads
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps, state.maximize)
