"""Brute-force reference computations, written independently of the package code paths."""

import itertools

import numpy as np


def partition_objective(X, labels, metric):
    """Best objective for a fixed partition: mean centers (L2^2) or medians (L1)."""
    X = np.asarray(X, dtype=np.float64)
    if metric == "cosine":
        norms = np.sqrt((X * X).sum(axis=1))
        X = X / norms[:, None]
    total = 0.0
    for g in set(labels):
        members = X[np.asarray(labels) == g]
        if metric == "manhattan":
            total += np.abs(members - np.median(members, axis=0)).sum()
        else:
            total += ((members - members.mean(axis=0)) ** 2).sum()
    return total


def exhaustive_best(X, k, metric):
    """Minimum objective and argmin labelling over all assignments of rows to k groups."""
    n = len(X)
    best, best_labels = np.inf, None
    for labels in itertools.product(range(k), repeat=n):
        if labels[0] != 0:
            continue
        obj = partition_objective(X, labels, metric)
        if obj < best - 1e-12:
            best, best_labels = obj, labels
    return best, best_labels


def first_occurrence(labels):
    seen = {}
    return [seen.setdefault(l, len(seen)) for l in labels]


def gather(groups, index):
    """Row-by-row gather in plain Python loops."""
    rows = []
    for i, g in enumerate(index):
        rows.append(groups[int(g)][i].copy())
    return np.stack(rows)


def direct_task_arithmetic(base, experts, lam):
    """base + lam * ((e1 - base) + (e2 - base) + ...): float64, left to right, one final rounding."""
    b = np.asarray(base, dtype=np.float64)
    acc = np.zeros_like(b)
    for e in experts:
        acc = acc + (np.asarray(e, dtype=np.float64) - b)
    return (b + lam * acc).astype(np.float32)


def overlap_recount(index_by_expert, experts, layers):
    n = len(experts)
    out = np.zeros((n, n))
    total = sum(len(index_by_expert[experts[0]][l]) for l in layers)
    for a in range(n):
        for b in range(n):
            match = 0
            for l in layers:
                for x, y in zip(index_by_expert[experts[a]][l], index_by_expert[experts[b]][l]):
                    match += int(x == y)
            out[a, b] = match / total
    return out


def nearest_centroid_accuracy(X, y):
    """Training accuracy of a nearest-class-mean classifier on dense features."""
    classes = sorted(set(y))
    y = np.asarray(y)
    cents = np.stack([X[y == c].mean(axis=0) for c in classes])
    d = ((X[:, None, :] - cents[None]) ** 2).sum(axis=2)
    pred = np.array(classes)[d.argmin(axis=1)]
    return float((pred == y).mean())


def planted_family(seed, layers=4, rows=100, cols=64, frac=0.7, noise=0.0):
    """Base, two candidates and a reference whose delta rows copy candidate A on
    ``frac`` of the channels and candidate B on the rest, plus optional noise
    with per-element std ``noise * ||row||``. Returns float32 arrays per layer
    and the planted labels."""
    rng = np.random.default_rng(seed)
    out = {"base": {}, "ref": {}, "a": {}, "b": {}}
    planted = {}
    n_a = int(round(frac * rows))
    for l in range(layers):
        name = f"l{l}"
        base = rng.standard_normal((rows, cols)).astype(np.float32)
        da = rng.standard_normal((rows, cols))
        db = rng.standard_normal((rows, cols))
        labels = np.array([0] * n_a + [1] * (rows - n_a))
        rng.shuffle(labels)
        dr = np.where(labels[:, None] == 0, da, db)
        if noise:
            norms = np.sqrt((dr * dr).sum(axis=1, keepdims=True))
            dr = dr + noise * norms * rng.standard_normal(dr.shape)
        out["base"][name] = base
        out["a"][name] = (base + da).astype(np.float32)
        out["b"][name] = (base + db).astype(np.float32)
        out["ref"][name] = (base + dr).astype(np.float32)
        planted[name] = labels
    return out, planted


def winner_recount(base, ref, cands):
    """Per-row argmax of cosine with explicit Python loops; ties to lowest index."""
    counts = [0] * len(cands)
    for i in range(base.shape[0]):
        r = [float(x) - float(y) for x, y in zip(ref[i], base[i])]
        best, best_c = None, 0
        for c, cand in enumerate(cands):
            d = [float(x) - float(y) for x, y in zip(cand[i], base[i])]
            num = sum(p * q for p, q in zip(r, d))
            den = (sum(p * p for p in r) ** 0.5) * (sum(q * q for q in d) ** 0.5)
            s = num / den if den > 0 else 0.0
            if best is None or s > best:
                best, best_c = s, c
        counts[best_c] += 1
    return counts
