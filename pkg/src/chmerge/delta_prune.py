"""Delta parameters and the DARE / TIES pruning applied to them before merging."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._rng import generator, stream_seed
from ._validation import check_aligned, check_choice, check_ratio, check_seed
from .exceptions import InvalidParameterError, ShapeMismatchError
from .tensor_io import Checkpoint

__all__ = [
    "PruneSpec",
    "DeltaSet",
    "compute_delta",
    "make_delta_set",
    "dare_prune",
    "ties_prune",
    "keep_count",
    "apply_prune",
    "DeltaPruner",
]

PRUNE_KINDS = ("none", "dare", "ties")


@dataclass(frozen=True)
class PruneSpec:
    kind: str = "none"
    ratio: float = 0.0
    rescale: bool = True

    def __post_init__(self):
        check_choice(self.kind, "prune kind", PRUNE_KINDS)
        object.__setattr__(self, "ratio", check_ratio(self.ratio, "prune ratio"))
        object.__setattr__(self, "rescale", bool(self.rescale))

    def to_dict(self):
        return {"kind": self.kind, "ratio": self.ratio, "rescale": self.rescale}


@dataclass
class DeltaSet:
    """Base checkpoint plus one shape-aligned delta checkpoint per expert.

    ``deltas`` preserves insertion order; that order is the summation order
    used when merging.
    """

    base: Checkpoint
    deltas: dict
    prune: PruneSpec = field(default_factory=PruneSpec)

    def __post_init__(self):
        if not self.deltas:
            raise InvalidParameterError("a DeltaSet needs at least one expert")
        for name, delta in self.deltas.items():
            check_aligned(self.base, delta, f"delta of expert {name!r}")

    @property
    def experts(self):
        return list(self.deltas)

    @property
    def layers(self):
        return self.base.names

    def stacked(self, layer):
        """Deltas of ``layer`` for all experts, shape (N, O, I)."""
        return np.stack([d.layers[layer] for d in self.deltas.values()])


def compute_delta(base: Checkpoint, expert: Checkpoint) -> Checkpoint:
    """``expert - base`` layer by layer, in float64.

    The difference of two float32 values is exact in float64 (barring extreme
    exponent gaps), so ``base + delta`` recovers the expert bit for bit.
    """
    name = expert.name or "expert"
    check_aligned(base, expert, name)
    return base.like(
        {
            layer: expert.layers[layer].astype(np.float64) - base.layers[layer]
            for layer in base.names
        },
        name=expert.name,
        dtype=np.float64,
    )


def make_delta_set(base: Checkpoint, experts, prune=None) -> DeltaSet:
    """Build a :class:`DeltaSet` from a name -> expert checkpoint mapping."""
    deltas = {}
    for name, expert in experts.items():
        try:
            deltas[name] = compute_delta(base, expert)
        except ShapeMismatchError as exc:
            raise ShapeMismatchError(f"expert {name!r}: {exc}") from None
    return DeltaSet(base=base, deltas=deltas, prune=prune or PruneSpec())


def dare_prune(delta: Checkpoint, p, rescale=True, seed=0) -> Checkpoint:
    """Drop each delta element independently with probability ``p``.

    Every layer draws from its own stream keyed by ``seed`` and the layer name,
    so the result does not depend on the order in which layers are visited.
    Survivors are multiplied by ``1 / (1 - p)`` when ``rescale`` is set.
    """
    p = check_ratio(p)
    seed = check_seed(seed)
    dtype = delta.dtype
    if p == 0.0:
        return delta.like({k: v.copy() for k, v in delta.items()}, dtype=dtype)
    scale = dtype.type(1.0 / (1.0 - p))
    out = {}
    for layer, values in delta.items():
        rng = generator(stream_seed(seed, layer))
        keep = rng.random(values.shape) >= p
        pruned = np.where(keep, values, dtype.type(0.0))
        if rescale:
            pruned *= scale
        out[layer] = pruned
    return delta.like(out, dtype=dtype)


def keep_count(p, size):
    """Number of elements kept by the magnitude trim: ceil((1 - p) * size).

    Evaluated in exact rational arithmetic on the decimal value of ``p`` so
    that e.g. p=0.3, size=10 keeps 7 rather than 8.
    """
    frac = (1 - Fraction(repr(float(p)))) * size
    return min(size, math.ceil(frac))


def _trim(values, p):
    flat = values.reshape(-1)
    n_keep = keep_count(p, flat.size)
    if n_keep >= flat.size:
        return values.copy()
    # stable sort on -|x|: equal magnitudes keep row-major order, lower index wins
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    kept = order[:n_keep]
    out[kept] = flat[kept]
    return out.reshape(values.shape)


def ties_prune(deltas: DeltaSet, p) -> DeltaSet:
    """Magnitude trim per expert layer, then per-coordinate sign election.

    The elected sign is the sign of the sum of trimmed deltas over experts;
    trimmed elements of the opposite sign are zeroed. A zero elected sign
    keeps every element at that coordinate.
    """
    p = check_ratio(p)
    trimmed = {name: {} for name in deltas.deltas}
    for layer in deltas.layers:
        stack = np.stack([_trim(d.layers[layer], p) for d in deltas.deltas.values()])
        total = np.zeros(stack.shape[1:], dtype=stack.dtype)
        for row in stack:
            total += row
        elected = np.sign(total)
        agree = (elected == 0) | (np.sign(stack) == elected)
        stack = np.where(agree, stack, stack.dtype.type(0.0))
        for name, values in zip(deltas.deltas, stack):
            trimmed[name][layer] = values
    out = {
        name: deltas.deltas[name].like(layers, dtype=deltas.deltas[name].dtype)
        for name, layers in trimmed.items()
    }
    return DeltaSet(base=deltas.base, deltas=out, prune=PruneSpec("ties", p, deltas.prune.rescale))


def apply_prune(deltas: DeltaSet, spec: PruneSpec, seed=0) -> DeltaSet:
    """Apply ``spec`` to every expert's delta.

    DARE streams are additionally keyed by expert name so that experts do not
    share drop masks.
    """
    seed = check_seed(seed)
    if spec.kind == "none":
        return DeltaSet(deltas.base, dict(deltas.deltas), spec)
    if spec.kind == "ties":
        out = ties_prune(deltas, spec.ratio)
        return DeltaSet(out.base, out.deltas, spec)
    pruned = {
        name: dare_prune(delta, spec.ratio, spec.rescale, stream_seed(seed, name))
        for name, delta in deltas.deltas.items()
    }
    return DeltaSet(deltas.base, pruned, spec)


class DeltaPruner(BaseEstimator, TransformerMixin):
    """Transformer wrapper around :func:`apply_prune`.

    ``fit`` is a no-op kept for pipeline compatibility; ``transform`` takes a
    :class:`DeltaSet` and returns the pruned one.
    """

    def __init__(self, kind="dare", ratio=0.3, rescale=True, seed=0):
        self.kind = kind
        self.ratio = ratio
        self.rescale = rescale
        self.seed = seed

    def fit(self, X, y=None):
        self.spec_ = PruneSpec(self.kind, self.ratio, self.rescale)
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        return apply_prune(X, self.spec_, self.seed)
