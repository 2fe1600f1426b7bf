"""Structure-property active learning over multichannel images.

Image patches of every channel become the candidate feature sets; a
physics scalarizer (e.g. hysteresis loop area) turns the spectrum measured
at a patch centre into the regression target. Also holds the on-disk image
dataset format and a synthetic stand-in generator.
"""
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter

from .active import ChannelDataset, run_active_learning
from .container import read_container, read_manifest, write_container
from .errors import IngestionError, InvalidConfigError, ShapeError
from .seeding import as_seed, derive_rng


@dataclass
class MultiChannelImage:
    channels: list          # C arrays, each [m x n]
    names: list

    def __post_init__(self):
        self.channels = [np.asarray(c, dtype=float) for c in self.channels]
        if not self.channels:
            raise ShapeError("image needs at least one channel")
        if len(self.names) != len(self.channels):
            raise ShapeError("one name per channel required")
        shapes = {c.shape for c in self.channels}
        if len(shapes) != 1 or len(self.channels[0].shape) != 2:
            raise ShapeError(f"channels must share one 2-D shape, got {sorted(shapes)}")

    @property
    def shape(self):
        return self.channels[0].shape


@dataclass
class SpectralGrid:
    voltage: np.ndarray                              # [v]
    signals: dict = field(default_factory=dict)      # name -> [m x n x v]

    def __post_init__(self):
        self.voltage = np.asarray(self.voltage, dtype=float)
        if self.voltage.ndim != 1 or (self.signals and self.voltage.size < 3):
            raise ShapeError("voltage axis must be 1-D with at least 3 points")
        for name, cube in self.signals.items():
            cube = np.asarray(cube, dtype=float)
            if cube.ndim != 3 or cube.shape[2] != self.voltage.size:
                raise ShapeError(f"signal {name!r} has shape {cube.shape}, voltage axis {self.voltage.size}")
            self.signals[name] = cube


@dataclass
class PatchStack:
    features: list          # per channel, [G x p*p]
    grid_index: np.ndarray  # [G x 2] top-left (k, l) of each window
    centers: np.ndarray     # [G x 2] pixel addressed by each window
    patch_size: int
    image_shape: tuple

    def row_of(self, k, l):
        m, n = self.image_shape
        return k * (n - self.patch_size + 1) + l


def extract_patches(image, p):
    """Every fully contained ``p x p`` window, row-major over ``(k, l)``.

    Returns one feature matrix per channel, all aligned on the same rows.
    """
    m, n = image.shape
    if not 1 <= p <= min(m, n):
        raise InvalidConfigError(f"patch size {p} outside [1, {min(m, n)}]")
    feats = [sliding_window_view(c, (p, p)).reshape(-1, p * p).copy() for c in image.channels]
    kk, ll = np.meshgrid(np.arange(m - p + 1), np.arange(n - p + 1), indexing="ij")
    grid = np.column_stack([kk.ravel(), ll.ravel()])
    return PatchStack(feats, grid, grid + p // 2, p, (m, n))


def patches_to_image(stack, channel=0):
    """Average overlapping patches back onto the pixel grid (uncovered pixels
    are NaN)."""
    m, n = stack.image_shape
    p = stack.patch_size
    acc = np.zeros((m, n))
    cnt = np.zeros((m, n))
    for row, (k, l) in enumerate(stack.grid_index):
        acc[k:k + p, l:l + p] += stack.features[channel][row].reshape(p, p)
        cnt[k:k + p, l:l + p] += 1
    with np.errstate(invalid="ignore"):
        return np.where(cnt > 0, acc / np.maximum(cnt, 1), np.nan)


def loop_area(voltage, response):
    """Absolute area enclosed by the closed polygon ``(V_i, R_i)`` (shoelace).

    The loop is closed from the last point back to the first. For a
    self-intersecting loop this is the magnitude of the net signed area.
    """
    V = np.asarray(voltage, dtype=float)
    R = np.asarray(response, dtype=float)
    if V.shape != R.shape or V.ndim != 1:
        raise ShapeError("voltage and response must be 1-D arrays of equal length")
    if V.size < 3:
        raise ValueError("a loop needs at least 3 points")
    V1 = np.roll(V, -1)
    R1 = np.roll(R, -1)
    return float(0.5 * abs(np.sum(V * R1 - V1 * R)))


SCALARIZERS = {
    "polarization_loop_area": ("polarization", loop_area),
    "frequency_loop_area": ("frequency", loop_area),
}


def register_scalarizer(name, signal, fn):
    """Make ``fn(voltage, response) -> float`` on ``signal`` available by name."""
    SCALARIZERS[name] = (signal, fn)


def structure_property_dataset(image, spectra, scalarizer, p):
    """Patch features per channel plus an oracle that applies the scalarizer
    to the spectrum at each patch centre."""
    if scalarizer not in SCALARIZERS:
        raise InvalidConfigError(f"unknown scalarizer {scalarizer!r}; known: {sorted(SCALARIZERS)}")
    signal, fn = SCALARIZERS[scalarizer]
    if not spectra.signals:
        raise InvalidConfigError("dataset carries no spectroscopic signals")
    if signal not in spectra.signals:
        raise InvalidConfigError(f"scalarizer {scalarizer!r} needs signal {signal!r}")
    cube = spectra.signals[signal]
    if cube.shape[:2] != image.shape:
        raise ShapeError(f"spectra grid {cube.shape[:2]} does not match image {image.shape}")
    stack = extract_patches(image, p)
    centers = stack.centers

    def oracle(row):
        i, j = centers[row]
        return fn(spectra.voltage, cube[i, j])

    return ChannelDataset(stack.features, oracle, names=list(image.names)), stack


def run_structure_property(image, spectra, scalarizer, p, config, predictor=None):
    """Patch the image, scalarize spectra at patch centres and run the active
    loop with one channel per image channel.

    The initial measurements are ``config.init_fraction`` (or
    ``init_count``) random patches.
    """
    ds, _ = structure_property_dataset(image, spectra, scalarizer, p)
    return run_active_learning(ds, config, predictor)


# -- on-disk format ---------------------------------------------------------

def save_dataset(path, image, spectra=None, extra=None):
    """Write an image dataset (plus optional spectra) as a container."""
    spectra = spectra if spectra is not None else SpectralGrid(np.zeros(0))
    m, n = image.shape
    arrays = {f"channel_{i}": c for i, c in enumerate(image.channels)}
    sig_names = list(spectra.signals)
    for i, name in enumerate(sig_names):
        arrays[f"spectrum_{i}"] = spectra.signals[name]
    arrays["voltage"] = spectra.voltage
    fields = {"kind": "image", "m": m, "n": n, "channels": list(image.names),
              "spectral_signals": sig_names, "v": int(spectra.voltage.size), **(extra or {})}
    return write_container(path, fields, arrays)


def _image_shapes(manifest):
    try:
        m, n, v = int(manifest["m"]), int(manifest["n"]), int(manifest["v"])
        names = list(manifest["channels"])
        signals = list(manifest["spectral_signals"])
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestionError(f"missing or malformed field: {exc}", field="manifest") from exc
    shapes = {f"channel_{i}": (m, n) for i in range(len(names))}
    shapes.update({f"spectrum_{i}": (m, n, v) for i in range(len(signals))})
    shapes["voltage"] = (v,)
    return names, signals, shapes


def load_dataset(path):
    """Inverse of :func:`save_dataset`. Returns ``(image, spectra, manifest)``."""
    manifest = read_manifest(path)
    if manifest.get("kind") != "image":
        raise IngestionError(f"expected an image dataset, got kind {manifest.get('kind')!r}", field="kind")
    names, signals, shapes = _image_shapes(manifest)
    manifest, arrays = read_container(path, shapes)
    image = MultiChannelImage([arrays[f"channel_{i}"] for i in range(len(names))], names)
    spectra = SpectralGrid(arrays["voltage"], {s: arrays[f"spectrum_{i}"] for i, s in enumerate(signals)})
    return image, spectra, manifest


def load_csv_channel(path):
    """Read a small 2-D array from a comma-separated text file."""
    return np.loadtxt(path, delimiter=",", ndmin=2)


# -- synthetic stand-in -----------------------------------------------------

def hysteresis_loop(voltage_amp, v, coercive, width=0.15, saturation=1.0, offset=0.0):
    """Closed bipolar sweep: up branch switching at ``+coercive``, down branch
    at ``-coercive``. Returns ``(voltage [v], response [v])``."""
    half = v // 2
    up = np.linspace(-voltage_amp, voltage_amp, half)
    down = np.linspace(voltage_amp, -voltage_amp, v - half)
    V = np.concatenate([up, down])
    R = np.concatenate([np.tanh((up - coercive) / width), np.tanh((down + coercive) / width)])
    return V, offset + saturation * R


def _smooth_field(rng, shape, sigma):
    f = gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    return (f - f.mean()) / f.std()


def generate_synthetic_image(m=32, n=32, n_channels=4, informative=None, v=64, smooth=2.0,
                             pixel_noise=0.05, spectral_noise=0.01, rng=0):
    """Independent smooth random channels and spectra whose loop areas depend
    on exactly one channel each.

    ``informative`` maps signal name -> channel index; the default mimics
    the ferroelectric setup (polarization from channel 2, frequency from
    channel 3, zero-based 1 and 2). The coercive voltage at a pixel is a
    smooth monotone function of the informative channel averaged over a
    small neighbourhood, so loop area is predictable from that channel's
    patches alone.
    """
    if informative is None:
        informative = {"polarization": min(1, n_channels - 1), "frequency": min(2, n_channels - 1)}
    for sig, ch in informative.items():
        if not 0 <= ch < n_channels:
            raise InvalidConfigError(f"informative channel {ch} for {sig!r} out of range")
    seed = as_seed(rng)
    chans = []
    for c in range(n_channels):
        base = _smooth_field(derive_rng(seed, "image-channel", c), (m, n), smooth)
        noise = derive_rng(seed, "image-noise", c).normal(0.0, pixel_noise, (m, n))
        chans.append(base + noise)
    names = [f"channel{c + 1}" for c in range(n_channels)]
    voltage = None
    signals = {}
    for s_idx, (sig, ch) in enumerate(sorted(informative.items())):
        local = gaussian_filter(chans[ch], 1.0, mode="reflect")
        coercive = 0.5 + 0.3 * np.tanh(local)
        cube = np.empty((m, n, v))
        for i in range(m):
            for j in range(n):
                voltage, cube[i, j] = hysteresis_loop(1.5, v, coercive[i, j])
        cube += derive_rng(seed, "spectral-noise", s_idx).normal(0.0, spectral_noise, cube.shape)
        signals[sig] = cube
    extra = {"informative": {k: int(v_) for k, v_ in informative.items()}, "seed": seed}
    return MultiChannelImage(chans, names), SpectralGrid(voltage, signals), extra
