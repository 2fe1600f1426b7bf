"""Toy 1-D peak data with a nonlinear target and a shifted decoy channel.

Each curve is a noisy Gaussian peak with latent centre ``mu``, width
``sigma`` and amplitude ``A``. The target depends on ``mu`` and ``sigma``
only. Channel 1 observes the peak as is; channel 2 observes the same peak
moved by a small random offset, so it carries a corrupted view of ``mu``.
"""
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, read_manifest, write_container
from .errors import IngestionError, InvalidConfigError
from .seeding import as_seed, derive_rng
from .transforms import normalize01, standardize

__all__ = [
    "PeakLatents", "ToyDataset", "ToyRanges", "peak_curve", "target_fn",
    "generate_toy", "standardize", "normalize01",
]


@dataclass(frozen=True)
class ToyRanges:
    mu: tuple = (0.25, 0.75)
    sigma: tuple = (0.03, 0.10)
    amplitude: tuple = (0.5, 2.0)
    grid: tuple = (0.0, 1.0)

    def __post_init__(self):
        for name in ("mu", "sigma", "amplitude", "grid"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise InvalidConfigError(f"degenerate {name} range ({lo}, {hi})")
        if self.sigma[0] <= 0 or self.amplitude[0] <= 0:
            raise InvalidConfigError("sigma and amplitude ranges must be positive")


DEFAULT_NOISE = 0.1 * float(np.mean(ToyRanges().amplitude))


@dataclass
class PeakLatents:
    mu: np.ndarray
    sigma: np.ndarray
    amplitude: np.ndarray


@dataclass
class ToyDataset:
    grid: np.ndarray
    channel1: np.ndarray
    channel2: np.ndarray
    latents: PeakLatents
    shifts: np.ndarray
    targets: np.ndarray
    correct_channel: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def channels(self):
        return [self.channel1, self.channel2]

    def __len__(self):
        return len(self.targets)


def peak_curve(mu, sigma, A, grid):
    """``A * exp(-(t - mu)^2 / (2 sigma^2))`` on ``grid``.

    Broadcasts: array-valued ``mu``/``sigma``/``A`` of length ``n`` give an
    ``[n x d]`` array.
    """
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("peak width must be positive")
    grid = np.asarray(grid, dtype=float)
    mu = np.asarray(mu, dtype=float)[..., None]
    return np.asarray(A, dtype=float)[..., None] * np.exp(-(grid - mu) ** 2 / (2 * sigma[..., None] ** 2))


def target_fn(mu, sigma):
    return 0.5 * np.asarray(mu) ** 3 + 4 * np.asarray(sigma) ** 2


def generate_toy(n=1000, d=64, noise_std=DEFAULT_NOISE, shift_range=0.1, ranges=ToyRanges(), rng=0):
    """Draw ``n`` noisy peak curves on a ``d``-point grid plus their targets.

    Latents, shifts and each channel's noise come from separate derived
    streams, so e.g. changing ``noise_std`` leaves the latents untouched.
    """
    if n < 1 or d < 2 or noise_std < 0 or shift_range < 0:
        raise InvalidConfigError("need n >= 1, d >= 2, noise_std >= 0, shift_range >= 0")
    seed = as_seed(rng)
    lat_rng = derive_rng(seed, "toy-latents")
    mu = lat_rng.uniform(*ranges.mu, size=n)
    sigma = lat_rng.uniform(*ranges.sigma, size=n)
    amp = lat_rng.uniform(*ranges.amplitude, size=n)
    shifts = derive_rng(seed, "toy-shift").uniform(-shift_range, shift_range, size=n)
    grid = np.linspace(*ranges.grid, d)
    ch1 = peak_curve(mu, sigma, amp, grid)
    ch2 = peak_curve(mu + shifts, sigma, amp, grid)
    if noise_std > 0:
        ch1 = ch1 + derive_rng(seed, "toy-noise", 1).normal(0.0, noise_std, size=ch1.shape)
        ch2 = ch2 + derive_rng(seed, "toy-noise", 2).normal(0.0, noise_std, size=ch2.shape)
    meta = {"seed": seed, "noise_std": noise_std, "shift_range": shift_range,
            "ranges": {k: list(getattr(ranges, k)) for k in ("mu", "sigma", "amplitude", "grid")}}
    return ToyDataset(grid, ch1, ch2, PeakLatents(mu, sigma, amp), shifts, target_fn(mu, sigma), 0, meta)


def save_toy(path, ds):
    """Write a toy dataset as a container (``kind="toy"``)."""
    n, d = ds.channel1.shape
    arrays = {"grid": ds.grid, "channel_0": ds.channel1, "channel_1": ds.channel2,
              "mu": ds.latents.mu, "sigma": ds.latents.sigma, "amplitude": ds.latents.amplitude,
              "shifts": ds.shifts, "targets": ds.targets}
    fields = {"kind": "toy", "n": int(n), "d": int(d), "channels": ["channel1", "channel2"],
              "correct_channel": int(ds.correct_channel), "meta": ds.meta}
    return write_container(path, fields, arrays)


def load_toy(path):
    """Inverse of :func:`save_toy`."""
    manifest = read_manifest(path)
    if manifest.get("kind") != "toy":
        raise IngestionError(f"expected a toy dataset, got kind {manifest.get('kind')!r}", field="kind")
    try:
        n, d = int(manifest["n"]), int(manifest["d"])
        correct = int(manifest["correct_channel"])
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestionError(f"missing or malformed field: {exc}", field="manifest") from exc
    shapes = {"grid": (d,), "channel_0": (n, d), "channel_1": (n, d), "mu": (n,), "sigma": (n,),
              "amplitude": (n,), "shifts": (n,), "targets": (n,)}
    manifest, a = read_container(path, shapes)
    lat = PeakLatents(a["mu"], a["sigma"], a["amplitude"])
    return ToyDataset(a["grid"], a["channel_0"], a["channel_1"], lat, a["shifts"], a["targets"],
                      correct, manifest.get("meta", {}))
