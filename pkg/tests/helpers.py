"""Shared oracles and mocks for the test suite."""
import numpy as np

from activechannel.gp import PosteriorPredictive


def central_difference(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at flat ``x``."""
    x = np.array(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


class ScriptedPredictor:
    """Mock predictor with hand-set variance levels.

    ``table[channel]`` is a constant level or a list indexed by how many
    times that channel has been fitted so far. The returned variance is
    flat at that level plus a tiny bump at position ``spike`` of ``X_star``,
    so the acquisition choice is known in advance.
    """

    BUMP = 1e-9

    def __init__(self, table, spike=0):
        self.table = table
        self.spike = spike
        self.calls = []

    def __call__(self, channel, X, y, X_star, seed):
        k = sum(1 for c, *_ in self.calls if c == channel)
        self.calls.append((channel, len(y), len(X_star), seed))
        level = self.table[channel]
        if isinstance(level, (list, tuple)):
            level = level[k]
        var = np.full(len(X_star), float(level))
        var[min(self.spike, len(X_star) - 1)] += self.BUMP
        return PosteriorPredictive(np.zeros(len(X_star)), var)


def kahan_triangle_area(p, q, r):
    """Triangle area from side lengths (numerically stable Heron form)."""
    a, b, c = sorted((np.hypot(*(q - r)), np.hypot(*(p - r)), np.hypot(*(p - q))), reverse=True)
    s = (a + (b + c)) * (c - (a - b)) * (c + (a - b)) * (a + (b - c))
    return 0.25 * np.sqrt(max(s, 0.0))


def random_star_polygon(rng, k):
    """Simple polygon whose vertices are sorted by angle around the origin,
    which lies in its kernel, so the fan from the origin triangulates it."""
    ang = np.sort(rng.uniform(0, 2 * np.pi, k))
    # keep every angular gap below pi so the origin stays inside
    while np.max(np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))) >= np.pi:
        ang = np.sort(rng.uniform(0, 2 * np.pi, k))
    rad = rng.uniform(0.2, 2.0, k)
    return np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])


def fan_area(poly):
    """Brute-force area: sum of the triangles (origin, v_i, v_i+1)."""
    o = np.zeros(2)
    k = len(poly)
    return float(np.sum([kahan_triangle_area(o, poly[i], poly[(i + 1) % k]) for i in range(k)]))
