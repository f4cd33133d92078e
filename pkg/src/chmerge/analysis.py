"""Diagnostics: per-layer channel similarity proportions and post-merge expert overlap."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_aligned
from .exceptions import InvalidParameterError, ShapeMismatchError
from .tensor_io import MergedBundle

__all__ = [
    "SimilarityReport",
    "OverlapMatrix",
    "cosine",
    "row_cosines",
    "similarity_proportions",
    "expert_overlap",
    "write_similarity_csv",
    "read_similarity_csv",
    "write_overlap_csv",
    "read_overlap_csv",
]


@dataclass
class SimilarityReport:
    """``proportions[layer][c]``: share of reference channels closest to candidate ``c``."""

    candidates: list
    proportions: dict
    counts: dict
    use_deltas: bool = True

    def header(self):
        mode = "deltas" if self.use_deltas else "raw"
        return f"# rows={mode} tie_break=lowest_candidate_index"


@dataclass
class OverlapMatrix:
    experts: list
    values: np.ndarray


def cosine(u, v):
    """Cosine similarity; 0 when either vector has zero norm."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeMismatchError(f"length mismatch: {u.size} vs {v.size}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def row_cosines(A, B):
    """Cosine between matching rows of two (O, I) matrices, zero-norm rows -> 0."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    num = np.einsum("ij,ij->i", A, B)
    den = np.linalg.norm(A, axis=1) * np.linalg.norm(B, axis=1)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def similarity_proportions(base, reference, candidates, use_deltas=True, names=None):
    """For each layer, the share of reference channels most similar to each candidate.

    Every reference row is compared to the same-index row of each candidate
    (after subtracting the base when ``use_deltas``); the winner is the
    candidate with the highest cosine, ties going to the lowest index.
    """
    candidates = list(candidates)
    if not candidates:
        raise InvalidParameterError("need at least one candidate")
    names = list(names) if names is not None else [c.name or str(i) for i, c in enumerate(candidates)]
    check_aligned(base, reference, "reference")
    for name, cand in zip(names, candidates):
        check_aligned(base, cand, f"candidate {name!r}")

    proportions = {}
    counts = {}
    for layer in base.names:
        offset = base.layers[layer] if use_deltas else 0.0
        ref = reference.layers[layer].astype(np.float64) - offset
        sims = np.stack(
            [row_cosines(ref, c.layers[layer].astype(np.float64) - offset) for c in candidates]
        )
        winners = np.argmax(sims, axis=0)
        tally = np.bincount(winners, minlength=len(candidates))
        counts[layer] = tally
        proportions[layer] = tally / ref.shape[0]
    return SimilarityReport(names, proportions, counts, use_deltas)


def expert_overlap(bundle: MergedBundle) -> OverlapMatrix:
    """Fraction of channels, over all layers, where two experts share a group."""
    experts = bundle.experts
    n = len(experts)
    matches = np.zeros((n, n), dtype=np.int64)
    total = 0
    for layer in bundle.groups[0].names:
        stack = np.stack([np.asarray(bundle.indices[e][layer]) for e in experts])
        matches += (stack[:, None, :] == stack[None, :, :]).sum(axis=2)
        total += stack.shape[1]
    return OverlapMatrix(experts, matches / total)


def write_similarity_csv(report: SimilarityReport, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(report.header() + "\n")
        writer = csv.writer(fh)
        writer.writerow(["layer", "candidate", "proportion"])
        for layer, props in report.proportions.items():
            for name, value in zip(report.candidates, props):
                writer.writerow([layer, name, repr(float(value))])


def _data_lines(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [line for line in fh if not line.startswith("#")]


def read_similarity_csv(path):
    """Inverse of :func:`write_similarity_csv`: ``{layer: {candidate: proportion}}``."""
    out = {}
    for row in csv.DictReader(_data_lines(Path(path))):
        out.setdefault(row["layer"], {})[row["candidate"]] = float(row["proportion"])
    return out


def write_overlap_csv(matrix: OverlapMatrix, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["expert_a", "expert_b", "fraction"])
        for i, a in enumerate(matrix.experts):
            for j, b in enumerate(matrix.experts):
                writer.writerow([a, b, repr(float(matrix.values[i, j]))])


def read_overlap_csv(path):
    rows = list(csv.DictReader(_data_lines(Path(path))))
    experts = list(dict.fromkeys(r["expert_a"] for r in rows))
    pos = {e: i for i, e in enumerate(experts)}
    values = np.zeros((len(experts), len(experts)))
    for r in rows:
        values[pos[r["expert_a"]], pos[r["expert_b"]]] = float(r["fraction"])
    return OverlapMatrix(experts, values)
