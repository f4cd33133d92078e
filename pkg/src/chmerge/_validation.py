"""Input validation helpers shared by the estimators and free functions."""

from __future__ import annotations

import math
import numbers

import numpy as np

from .exceptions import InvalidParameterError, ShapeMismatchError

SEED_MASK = (1 << 64) - 1


def check_ratio(p, name="p"):
    """Return ``p`` as a float in ``[0, 1)``."""
    if isinstance(p, bool) or not isinstance(p, numbers.Real):
        raise InvalidParameterError(f"{name} must be a real number, got {p!r}")
    p = float(p)
    if not math.isfinite(p) or p < 0.0 or p >= 1.0:
        raise InvalidParameterError(f"{name} must lie in [0, 1), got {p}")
    return p


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise InvalidParameterError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise InvalidParameterError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_seed(seed):
    """Coerce ``seed`` to an unsigned 64-bit integer."""
    if isinstance(seed, bool) or not isinstance(seed, numbers.Integral):
        raise InvalidParameterError(f"seed must be an integer, got {seed!r}")
    return int(seed) & SEED_MASK


def check_choice(value, name, choices):
    if value not in choices:
        raise InvalidParameterError(
            f"{name} must be one of {sorted(choices)}, got {value!r}"
        )
    return value


def check_finite_scalar(value, name):
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise InvalidParameterError(f"{name} must be a real number, got {value!r}")
    if not math.isfinite(float(value)):
        raise InvalidParameterError(f"{name} must be finite, got {value}")
    return float(value)


def check_rows(rows, name="rows"):
    """Return ``rows`` as a 2-D float array of shape (N, D) with N, D >= 1."""
    arr = np.asarray(rows)
    if arr.ndim != 2:
        raise InvalidParameterError(f"{name} must be 2-D (N, D), got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise InvalidParameterError(f"{name} must contain at least one row")
    if arr.shape[1] == 0:
        raise InvalidParameterError(f"{name} must have D >= 1 columns")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def check_aligned(reference, other, other_name="checkpoint"):
    """Raise unless ``other`` has exactly the layer names and shapes of ``reference``."""
    for layer in reference.names:
        if layer not in other.layers:
            raise ShapeMismatchError(f"{other_name} is missing layer {layer!r}")
        if other.layers[layer].shape != reference.layers[layer].shape:
            raise ShapeMismatchError(
                f"{other_name} layer {layer!r} has shape {other.layers[layer].shape}, "
                f"expected {reference.layers[layer].shape}"
            )
    extra = sorted(set(other.layers) - set(reference.layers))
    if extra:
        raise ShapeMismatchError(f"{other_name} has unexpected layer {extra[0]!r}")
