"""Invertible affine normalisations for features (per column) and targets."""
from dataclasses import dataclass

import numpy as np

SCHEMES = ("standardize", "minmax01", "none")


@dataclass(frozen=True)
class AffineTransform:
    """``x' = (x - shift) / scale``. ``constant`` flags zero-spread columns,
    which pass through unchanged."""

    scheme: str
    shift: np.ndarray
    scale: np.ndarray
    constant: np.ndarray

    SCHEMES = SCHEMES

    @classmethod
    def fit(cls, X, scheme="standardize", axis=0):
        if scheme not in SCHEMES:
            raise ValueError(f"unknown normalisation scheme {scheme!r}")
        X = np.asarray(X, dtype=float)
        if X.size == 0:
            raise ValueError("cannot fit a normalisation on empty data")
        if scheme == "standardize":
            shift = X.mean(axis=axis)
            scale = X.std(axis=axis)
        elif scheme == "minmax01":
            shift = X.min(axis=axis)
            scale = X.max(axis=axis) - shift
        else:
            shift = np.zeros_like(X.mean(axis=axis))
            scale = np.ones_like(shift)
        constant = ~(scale > 0)
        shift = np.where(constant, 0.0, shift)
        scale = np.where(constant, 1.0, scale)
        return cls(scheme, shift, scale, constant)

    def apply(self, X):
        return (np.asarray(X, dtype=float) - self.shift) / self.scale

    def invert(self, X):
        return np.asarray(X, dtype=float) * self.scale + self.shift


class ScalarTransform(AffineTransform):
    """Single shift/scale pair applied to a whole target vector."""

    @classmethod
    def fit(cls, y, scheme="standardize"):
        t = AffineTransform.fit(np.asarray(y, dtype=float).ravel(), scheme, axis=None)
        return cls(t.scheme, float(t.shift), float(t.scale), bool(t.constant))


def standardize(X, axis=0):
    """Zero mean, unit standard deviation along ``axis`` (``None``: scalar-wise).

    Returns ``(X', transform)``; ``transform.invert`` undoes it.
    """
    t = AffineTransform.fit(X, "standardize", axis)
    return t.apply(X), t


def normalize01(X, axis=0):
    """Min-max scale to ``[0, 1]`` along ``axis``. Returns ``(X', transform)``."""
    t = AffineTransform.fit(X, "minmax01", axis)
    return t.apply(X), t
