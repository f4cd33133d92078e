"""Grouping of expert deltas into K clusters per channel, per layer, or per model."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from ._rng import generator, stream_seed
from ._validation import check_choice, check_positive_int, check_rows, check_seed
from .exceptions import InvalidParameterError

__all__ = [
    "ClusterSpec",
    "AssignmentTable",
    "KMeansResult",
    "ChannelKMeans",
    "canonical_labels",
    "kmeans",
    "cluster_rows",
    "assign_random",
    "assign_sign",
    "model_gram",
    "build_assignments",
]

STRATEGIES = ("kmeans", "random", "sign")
METRICS = ("cosine", "euclidean", "manhattan")
GRANULARITIES = ("channel", "layer", "model")


@dataclass(frozen=True)
class ClusterSpec:
    k: int = 2
    strategy: str = "kmeans"
    metric: str = "cosine"
    granularity: str = "channel"
    restarts: int = 8
    max_iters: int = 100
    seed: int = 0

    def __post_init__(self):
        check_positive_int(self.k, "k")
        check_choice(self.strategy, "strategy", STRATEGIES)
        check_choice(self.metric, "metric", METRICS)
        check_choice(self.granularity, "granularity", GRANULARITIES)
        check_positive_int(self.restarts, "restarts")
        check_positive_int(self.max_iters, "max_iters")
        object.__setattr__(self, "seed", check_seed(self.seed))
        if self.strategy == "sign" and self.k != 2:
            raise InvalidParameterError("sign strategy defined only for two groups")

    def to_dict(self):
        return {
            "strategy": self.strategy,
            "metric": self.metric,
            "granularity": self.granularity,
            "restarts": self.restarts,
            "max_iters": self.max_iters,
        }


@dataclass
class AssignmentTable:
    """Group index of every expert, per channel, per layer, or once per model.

    ``table[layer]`` is (O, N) for channel granularity and (N,) for layer
    granularity; for model granularity the single (N,) vector lives in
    ``table[None]``.
    """

    granularity: str
    k: int
    experts: list
    table: dict = field(default_factory=dict)

    def channel_matrix(self, layer, rows):
        """(O, N) matrix for ``layer``, broadcasting coarser granularities."""
        if self.granularity == "channel":
            return self.table[layer]
        vec = self.table[None] if self.granularity == "model" else self.table[layer]
        return np.broadcast_to(vec, (rows, len(vec)))


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    objective: float
    history: list
    n_iter: int


def canonical_labels(labels, centers=None):
    """Renumber groups by order of first occurrence.

    Returns the new labels, or ``(labels, centers)`` with centers permuted to
    match when ``centers`` is given. Unused centers are appended after the
    used ones in their original order.
    """
    labels = np.asarray(labels)
    mapping = {}
    for lab in labels.tolist():
        if lab not in mapping:
            mapping[lab] = len(mapping)
    out = np.array([mapping[lab] for lab in labels.tolist()], dtype=np.int64)
    if centers is None:
        return out
    order = sorted(mapping, key=mapping.get)
    order += [c for c in range(len(centers)) if c not in mapping]
    return out, centers[order]


# --------------------------------------------------------------------------- #
# Lloyd / k-means++ on dense rows


def _lower_median(values):
    ordered = np.sort(values, axis=0)
    return ordered[(len(ordered) - 1) // 2]


class _DenseRows:
    """Rows held in memory. Distances are squared L2, or L1 for manhattan."""

    def __init__(self, X, metric):
        self.X = X
        self.metric = metric
        self.n = len(X)
        self.scale = float(self.distances(np.zeros((1, X.shape[1])))[:, 0].max())

    def distances(self, centers):
        diff = self.X[:, None, :] - centers[None, :, :]
        if self.metric == "manhattan":
            return np.abs(diff).sum(axis=2)
        return np.einsum("nkd,nkd->nk", diff, diff)

    def point(self, idx):
        return self.X[idx]

    def center_of(self, members):
        if self.metric == "manhattan":
            return _lower_median(self.X[members])
        return self.X[members].mean(axis=0)

    def stack(self, centers):
        return np.stack(centers)


class _LayerStreamRows:
    """Concatenated per-expert delta vectors, visited one layer at a time.

    Centers are lists of per-layer arrays; no expert's full flattened vector
    is ever assembled. ``rows`` selects a subset of experts and ``row_scale``
    multiplies each expert's vector (used for cosine normalisation).
    """

    def __init__(self, deltas, metric, rows=None, row_scale=None):
        self.deltas = deltas
        self.metric = metric
        self.rows = np.arange(len(deltas.deltas)) if rows is None else np.flatnonzero(rows)
        self.row_scale = None if row_scale is None else np.asarray(row_scale)[self.rows, None]
        self.n = len(self.rows)
        self.layers = deltas.layers
        zero = [np.zeros(deltas.base.layers[l].size) for l in self.layers]
        self.scale = float(self.distances([zero])[:, 0].max())

    def _block(self, layer):
        block = deltas_block(self.deltas, layer)[self.rows]
        if self.row_scale is not None:
            block *= self.row_scale
        return block

    def distances(self, centers):
        out = np.zeros((self.n, len(centers)))
        for j, layer in enumerate(self.layers):
            X = self._block(layer)
            C = np.stack([c[j] for c in centers])
            diff = X[:, None, :] - C[None, :, :]
            if self.metric == "manhattan":
                out += np.abs(diff).sum(axis=2)
            else:
                out += np.einsum("nkd,nkd->nk", diff, diff)
        return out

    def point(self, idx):
        return [self._block(layer)[idx].copy() for layer in self.layers]

    def center_of(self, members):
        blocks = [self._block(layer)[members] for layer in self.layers]
        if self.metric == "manhattan":
            return [_lower_median(b) for b in blocks]
        return [b.mean(axis=0) for b in blocks]

    def stack(self, centers):
        return centers


def deltas_block(deltas, layer):
    """(N, O*I) float64 view of one layer's deltas across experts."""
    return deltas.stacked(layer).reshape(len(deltas.deltas), -1).astype(np.float64)


# costs below this fraction of the largest row norm are treated as zero
_REPAIR_RTOL = 1e-12


def _kmeanspp(src, k, rng):
    n = src.n
    chosen = [int(rng.integers(n))]
    centers = [src.point(chosen[0])]
    nearest = src.distances(src.stack(centers))[:, 0]
    while len(centers) < k:
        total = nearest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=nearest / total))
        else:
            # every point coincides with a chosen center
            free = [i for i in range(n) if i not in chosen]
            idx = int(free[rng.integers(len(free))])
        chosen.append(idx)
        centers.append(src.point(idx))
        dist = src.distances(src.stack([centers[-1]]))[:, 0]
        nearest = np.minimum(nearest, dist)
    return centers


def _repair_empty(src, labels, centers, k):
    """Move the point farthest from its center into each empty cluster.

    Only points in a cluster of size > 1 whose cost exceeds a rounding-level
    tolerance may move; when none exists the empty cluster is left empty,
    since no move can lower the objective.
    """
    tol = _REPAIR_RTOL * src.scale
    while True:
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if len(empty) == 0:
            return labels, centers
        dist = src.distances(src.stack(centers))
        cost = dist[np.arange(src.n), labels]
        movable = (counts[labels] > 1) & (cost > tol)
        if not movable.any():
            return labels, centers
        cost = np.where(movable, cost, -1.0)
        idx = int(np.argmax(cost))
        donor = labels[idx]
        target = int(empty[0])
        labels = labels.copy()
        labels[idx] = target
        centers = list(centers)
        centers[target] = src.point(idx)
        centers[donor] = src.center_of(labels == donor)


def _lloyd(src, k, max_iters, rng):
    centers = _kmeanspp(src, k, rng)
    dist = src.distances(src.stack(centers))
    labels = np.argmin(dist, axis=1)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        centers = [
            src.center_of(labels == c) if np.any(labels == c) else centers[c]
            for c in range(k)
        ]
        labels, centers = _repair_empty(src, labels, centers, k)
        dist = src.distances(src.stack(centers))
        history.append(float(dist[np.arange(src.n), labels].sum()))
        new_labels = np.argmin(dist, axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels, centers, history, n_iter


def _run_restarts(src, k, restarts, max_iters, rng):
    best = None
    for _ in range(restarts):
        labels, centers, history, n_iter = _lloyd(src, k, max_iters, rng)
        if best is None or history[-1] < best[2][-1]:
            best = (labels, centers, history, n_iter)
    return best


def kmeans(X, k, metric="euclidean", restarts=8, max_iters=100, seed=0):
    """Lloyd's algorithm with k-means++ seeding and ``restarts`` restarts.

    ``metric`` selects the geometry: ``euclidean`` uses mean centers and the
    squared-L2 objective, ``manhattan`` uses lower-median centers and the L1
    objective, ``cosine`` L2-normalises the rows first and then behaves like
    ``euclidean``. Under cosine, zero rows have no direction and are placed in
    group 0 without taking part in the fit. The best restart is returned with
    labels renumbered by first occurrence.
    """
    X = np.asarray(check_rows(X), dtype=np.float64)
    k = check_positive_int(k, "k")
    check_choice(metric, "metric", METRICS)
    n = len(X)
    if k > n:
        raise InvalidParameterError(f"K={k} exceeds the number of rows N={n}")
    rng = generator(check_seed(seed))

    active = np.ones(n, dtype=bool)
    if metric == "cosine":
        norms = np.linalg.norm(X, axis=1)
        active = norms > 0
        X = np.divide(X, norms[:, None], out=np.zeros_like(X), where=active[:, None])
    labels = np.zeros(n, dtype=np.int64)
    n_active = int(active.sum())
    if n_active == 0:
        return KMeansResult(labels, np.zeros((1, X.shape[1])), 0.0, [0.0], 0)

    src = _DenseRows(X[active], "manhattan" if metric == "manhattan" else "euclidean")
    k_fit = min(k, n_active)
    fit_labels, centers, history, n_iter = _run_restarts(
        src, k_fit, restarts, max_iters, rng
    )
    fit_labels, centers = canonical_labels(fit_labels, np.stack(centers))
    labels[active] = fit_labels
    return KMeansResult(labels, centers, history[-1], history, n_iter)


class ChannelKMeans(BaseEstimator, ClusterMixin):
    """K-means / k-medians over the rows of a small matrix.

    Parameters mirror :func:`kmeans`. After ``fit`` the estimator exposes
    ``labels_``, ``cluster_centers_``, ``inertia_`` (final objective),
    ``objective_history_`` and ``n_iter_``.
    """

    def __init__(self, n_clusters=2, metric="cosine", n_init=8, max_iter=100, random_state=0):
        self.n_clusters = n_clusters
        self.metric = metric
        self.n_init = n_init
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        res = kmeans(
            X,
            self.n_clusters,
            metric=self.metric,
            restarts=self.n_init,
            max_iters=self.max_iter,
            seed=self.random_state,
        )
        self.labels_ = res.labels
        self.cluster_centers_ = res.centers
        self.inertia_ = res.objective
        self.objective_history_ = res.history
        self.n_iter_ = res.n_iter
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = np.asarray(check_rows(X), dtype=np.float64)
        zero = np.zeros(len(X), dtype=bool)
        if self.metric == "cosine":
            norms = np.linalg.norm(X, axis=1)
            zero = norms == 0
            X = np.divide(X, norms[:, None], out=np.zeros_like(X), where=~zero[:, None])
        src = _DenseRows(X, "manhattan" if self.metric == "manhattan" else "euclidean")
        labels = np.argmin(src.distances(self.cluster_centers_), axis=1)
        labels[zero] = 0
        return labels


# --------------------------------------------------------------------------- #
# strategies


def assign_random(n, k, seed=0):
    """``n`` independent uniform draws from ``[0, k)``; empty groups allowed."""
    n = check_positive_int(n, "n", minimum=0)
    k = check_positive_int(k, "k")
    return generator(check_seed(seed)).integers(0, k, size=n).astype(np.int64)


def assign_sign(rows, seed=0, k=2):
    """Split rows by agreement with the elected sign vector.

    The elected sign is ``sign(sum of rows)``; a row whose dot product with it
    is non-negative goes to group 0, otherwise group 1. ``seed`` is accepted
    for signature parity with the other strategies and not used.
    """
    if k != 2:
        raise InvalidParameterError("sign strategy defined only for two groups")
    X = np.asarray(check_rows(rows), dtype=np.float64)
    elected = np.sign(X.sum(axis=0))
    return np.where(X @ elected >= 0, 0, 1).astype(np.int64)


def cluster_rows(rows, spec: ClusterSpec, seed=0):
    """Group N row vectors into ``spec.k`` clusters using ``spec.strategy``."""
    X = check_rows(rows)
    if spec.k > len(X):
        raise InvalidParameterError(f"K={spec.k} exceeds the number of experts N={len(X)}")
    if spec.strategy == "random":
        return assign_random(len(X), spec.k, seed)
    if spec.strategy == "sign":
        return assign_sign(X, seed, spec.k)
    return kmeans(X, spec.k, spec.metric, spec.restarts, spec.max_iters, seed).labels


# --------------------------------------------------------------------------- #
# whole-model statistics


def model_gram(deltas, n_jobs=1):
    """N x N matrix of inner products of the experts' full delta vectors.

    Accumulated layer by layer in layer-name order; its diagonal gives the
    squared norms used for cosine normalisation at model granularity.
    """
    def one(layer):
        X = deltas_block(deltas, layer)
        return X @ X.T

    with ThreadPoolExecutor(max_workers=max(1, n_jobs)) as pool:
        parts = list(pool.map(one, deltas.layers))
    gram = np.zeros((len(deltas.deltas),) * 2)
    for part in parts:
        gram += part
    return gram


def _model_assignments(deltas, spec, n_jobs):
    n = len(deltas.deltas)
    if spec.strategy == "random":
        return assign_random(n, spec.k, spec.seed)
    if spec.strategy == "sign":
        dots = np.zeros(n)
        for layer in deltas.layers:
            X = deltas_block(deltas, layer)
            dots += X @ np.sign(X.sum(axis=0))
        return np.where(dots >= 0, 0, 1).astype(np.int64)
    labels = np.zeros(n, dtype=np.int64)
    if spec.metric == "cosine":
        norms = np.sqrt(np.diag(model_gram(deltas, n_jobs)))
        active = norms > 0
        if not active.any():
            return labels
        scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=active)
        src = _LayerStreamRows(deltas, "euclidean", rows=active, row_scale=scale)
    else:
        active = np.ones(n, dtype=bool)
        src = _LayerStreamRows(deltas, spec.metric)
    fit, _, _, _ = _run_restarts(
        src, min(spec.k, src.n), spec.restarts, spec.max_iters, generator(spec.seed)
    )
    labels[active] = canonical_labels(fit)
    return labels


def build_assignments(deltas, spec: ClusterSpec, n_jobs=1) -> AssignmentTable:
    """Cluster every channel (or layer, or the whole model) across experts.

    Each channel draws from a stream keyed by the seed, the layer name and
    the channel index, so the table does not depend on ``n_jobs``.
    """
    n = len(deltas.deltas)
    if spec.k > n:
        raise InvalidParameterError(f"K={spec.k} exceeds the number of experts N={n}")
    out = AssignmentTable(spec.granularity, spec.k, deltas.experts)
    if spec.granularity == "model":
        out.table[None] = _model_assignments(deltas, spec, n_jobs)
        return out

    def per_layer(layer):
        stack = deltas.stacked(layer)
        if spec.granularity == "layer":
            return cluster_rows(stack.reshape(n, -1), spec, stream_seed(spec.seed, layer))
        rows = stack.shape[1]
        table = np.empty((rows, n), dtype=np.int64)
        for i in range(rows):
            table[i] = cluster_rows(stack[:, i, :], spec, stream_seed(spec.seed, layer, i))
        return table

    with ThreadPoolExecutor(max_workers=max(1, n_jobs)) as pool:
        results = list(pool.map(per_layer, deltas.layers))
    out.table.update(zip(deltas.layers, results))
    return out
