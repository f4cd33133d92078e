"""Merging clustered deltas into K group checkpoints and instant expert lookup."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_finite_scalar
from .cluster import AssignmentTable, ClusterSpec, build_assignments
from .delta_prune import DeltaSet, PruneSpec, apply_prune, make_delta_set
from .exceptions import CorruptBundleError, InvalidParameterError, ShapeMismatchError
from .tensor_io import Checkpoint, Manifest, MergedBundle, checkpoint_sha256

__all__ = [
    "MergeSpec",
    "LookupStats",
    "StorageReport",
    "merge",
    "reconstruct",
    "storage_report",
    "identity_assignments",
    "ChannelMerger",
]


@dataclass(frozen=True)
class MergeSpec:
    lambda_: float = 0.5
    cluster: ClusterSpec = field(default_factory=ClusterSpec)
    prune: PruneSpec = field(default_factory=PruneSpec)
    normalize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "lambda_", check_finite_scalar(self.lambda_, "lambda"))


@dataclass
class LookupStats:
    lookup_seconds: float
    layer_count: int
    param_count: int
    element_copies: int
    weight_flops: int = 0

    def format_line(self):
        return (
            f"lookup_seconds={self.lookup_seconds:.6f} "
            f"layer_count={self.layer_count} param_count={self.param_count}"
        )


@dataclass
class StorageReport:
    weight_params: int
    index_entries: int
    ensemble_params: int
    weight_ratio: float
    total_ratio: float
    index_bytes: int

    def lines(self):
        return [f"{key}={value}" for key, value in self.__dict__.items()]


def identity_assignments(deltas: DeltaSet) -> AssignmentTable:
    """Expert n -> group n at every channel (K = N)."""
    n = len(deltas.deltas)
    table = AssignmentTable("model", n, deltas.experts)
    table.table[None] = np.arange(n, dtype=np.int64)
    return table


def _merge_layer(base, stack, assign, k, lam, normalize):
    # stack: (N, O, I) float64 deltas, assign: (O, N) groups
    rows, n = assign.shape
    sums = np.zeros((k,) + base.shape, dtype=np.float64)
    counts = np.zeros((k, rows), dtype=np.int64)
    channel = np.arange(rows)
    for e in range(n):
        groups = assign[:, e]
        sums[groups, channel] += stack[e]
        counts[groups, channel] += 1
    out = []
    for g in range(k):
        theta = base.copy()
        filled = counts[g] > 0
        if filled.any():
            scale = np.full(rows, lam)
            if normalize:
                scale = lam / counts[g].clip(1)
            merged = base[filled].astype(np.float64) + scale[filled, None] * sums[g, filled]
            theta[filled] = merged.astype(np.float32)
        out.append(theta)
    return out


def merge(deltas: DeltaSet, assignments: AssignmentTable, spec: MergeSpec = None, n_jobs=1, inputs=None) -> MergedBundle:
    """Group-wise task arithmetic: ``group_k row = base row + lambda * sum(member deltas)``.

    Member deltas are summed in expert order in float64 and the result is
    rounded to float32 once; rows of an empty group are the base rows
    unchanged.
    """
    spec = spec or MergeSpec()
    experts = deltas.experts
    if list(assignments.experts) != experts:
        raise ShapeMismatchError(
            f"assignment experts {list(assignments.experts)} do not match deltas {experts}"
        )
    k = assignments.k
    if k < 1 or k > len(experts):
        raise InvalidParameterError(f"K={k} must lie in [1, {len(experts)}]")
    lam = float(spec.lambda_)

    def per_layer(layer):
        base = deltas.base.layers[layer]
        assign = np.asarray(assignments.channel_matrix(layer, base.shape[0]))
        if assign.shape != (base.shape[0], len(experts)):
            raise ShapeMismatchError(
                f"layer {layer!r}: assignment shape {assign.shape} != {(base.shape[0], len(experts))}"
            )
        if assign.size and (assign.min() < 0 or assign.max() >= k):
            raise InvalidParameterError(f"layer {layer!r}: assignment index outside [0, {k})")
        return _merge_layer(base, deltas.stacked(layer), assign, k, lam, spec.normalize), assign

    with ThreadPoolExecutor(max_workers=max(1, n_jobs)) as pool:
        results = list(pool.map(per_layer, deltas.layers))

    groups = [
        deltas.base.like({layer: res[0][g] for layer, res in zip(deltas.layers, results)}, name=f"group_{g}")
        for g in range(k)
    ]
    indices = {
        expert: {
            layer: np.ascontiguousarray(res[1][:, e], dtype=np.uint32)
            for layer, res in zip(deltas.layers, results)
        }
        for e, expert in enumerate(experts)
    }
    cluster = spec.cluster.to_dict()
    cluster["granularity"] = assignments.granularity
    manifest = Manifest(
        experts=experts,
        k=k,
        lambda_=spec.lambda_,
        prune=deltas.prune.to_dict(),
        cluster=cluster,
        seed=spec.cluster.seed,
        base_sha256=checkpoint_sha256(deltas.base),
        normalize=spec.normalize,
        inputs=inputs,
    )
    return MergedBundle(groups=groups, indices=indices, manifest=manifest)


def reconstruct(bundle: MergedBundle, expert, return_stats=False):
    """Gather an expert's rows from the groups named by its index tensors.

    Row ``i`` of every layer is copied verbatim from group ``S_i``; no
    arithmetic touches the weights. With ``return_stats`` a
    :class:`LookupStats` record is returned alongside the checkpoint.
    """
    if expert not in bundle.indices:
        raise KeyError(f"unknown expert {expert!r}; bundle holds {bundle.experts}")
    start = time.perf_counter()
    table = bundle.indices[expert]
    k = len(bundle.groups)
    layers = {}
    copies = 0
    for layer, template in bundle.groups[0].items():
        idx = np.asarray(table[layer])
        if idx.size and int(idx.max()) >= k:
            raise CorruptBundleError(f"index {expert}/{layer} references group {int(idx.max())} >= k={k}")
        out = np.empty_like(template)
        for g, group in enumerate(bundle.groups):
            rows = idx == g
            out[rows] = group.layers[layer][rows]
            copies += int(rows.sum()) * template.shape[1]
        layers[layer] = out
    ckpt = bundle.groups[0].like(layers, name=expert)
    elapsed = time.perf_counter() - start
    if not return_stats:
        return ckpt
    stats = LookupStats(elapsed, len(layers), ckpt.num_params, copies)
    return ckpt, stats


def storage_report(bundle: MergedBundle) -> StorageReport:
    """Parameter and byte accounting against keeping all N experts.

    Index entries are counted at their on-disk width of 4 bytes (u32).
    """
    k = len(bundle.groups)
    n = len(bundle.manifest.experts)
    psi = bundle.groups[0].num_params
    channels = bundle.groups[0].num_channels
    index_entries = n * channels
    index_bytes = 4 * index_entries
    return StorageReport(
        weight_params=k * psi,
        index_entries=index_entries,
        ensemble_params=n * psi,
        weight_ratio=k / n,
        total_ratio=(k * psi * 4 + index_bytes) / (n * psi * 4),
        index_bytes=index_bytes,
    )


class ChannelMerger(BaseEstimator, TransformerMixin):
    """Estimator front-end for the delta -> prune -> cluster -> merge pipeline.

    ``fit(experts, base=...)`` takes a mapping of expert name to checkpoint and
    stores the merged bundle in ``bundle_``; ``transform(names)`` reconstructs
    the named experts from it.
    """

    def __init__(
        self,
        k=2,
        lambda_=0.5,
        prune="dare",
        prune_ratio=0.3,
        rescale=True,
        strategy="kmeans",
        metric="cosine",
        granularity="channel",
        restarts=8,
        max_iters=100,
        normalize=False,
        seed=0,
        n_jobs=1,
    ):
        self.k = k
        self.lambda_ = lambda_
        self.prune = prune
        self.prune_ratio = prune_ratio
        self.rescale = rescale
        self.strategy = strategy
        self.metric = metric
        self.granularity = granularity
        self.restarts = restarts
        self.max_iters = max_iters
        self.normalize = normalize
        self.seed = seed
        self.n_jobs = n_jobs

    def merge_spec(self):
        cluster = ClusterSpec(
            k=self.k,
            strategy=self.strategy,
            metric=self.metric,
            granularity=self.granularity,
            restarts=self.restarts,
            max_iters=self.max_iters,
            seed=self.seed,
        )
        prune = PruneSpec(self.prune, self.prune_ratio if self.prune != "none" else 0.0, self.rescale)
        return MergeSpec(self.lambda_, cluster, prune, self.normalize)

    def fit(self, X, y=None, base=None, inputs=None):
        if base is None:
            raise InvalidParameterError("ChannelMerger.fit requires the base checkpoint")
        if not X:
            raise InvalidParameterError("no experts given")
        if self.k > len(X):
            raise InvalidParameterError(f"K={self.k} exceeds the number of experts N={len(X)}")
        spec = self.merge_spec()
        deltas = make_delta_set(base, X)
        deltas = apply_prune(deltas, spec.prune, spec.cluster.seed)
        self.assignments_ = build_assignments(deltas, spec.cluster, n_jobs=self.n_jobs)
        self.bundle_ = merge(deltas, self.assignments_, spec, n_jobs=self.n_jobs, inputs=inputs)
        return self

    def transform(self, X):
        check_is_fitted(self, "bundle_")
        names = [X] if isinstance(X, str) else list(X)
        return [reconstruct(self.bundle_, name) for name in names]
