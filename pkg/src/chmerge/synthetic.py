"""Small synthetic checkpoints and query corpora for demos and tests."""

from __future__ import annotations

import numpy as np

from ._rng import generator
from .router import LabeledQuery
from .tensor_io import Checkpoint

__all__ = ["make_experts", "make_router_corpus", "VOCABULARIES"]


def make_experts(n_experts=3, n_layers=5, shape=(64, 64), seed=0, scale=0.02, names=None):
    """Random base checkpoint plus ``n_experts`` fine-tuned variants.

    Each expert adds an independent Gaussian delta of standard deviation
    ``scale`` to every layer. Returns ``(base, {name: expert})``.
    """
    rng = generator(seed)
    names = list(names) if names is not None else [f"expert{i}" for i in range(n_experts)]
    layers = [f"layers.{i}.weight" for i in range(n_layers)]
    base = Checkpoint(
        {l: rng.standard_normal(shape).astype(np.float32) for l in layers}, name="base"
    )
    experts = {}
    for name in names:
        experts[name] = base.like(
            {l: base.layers[l] + (scale * rng.standard_normal(shape)).astype(np.float32) for l in layers},
            name=name,
        )
    return base, experts


VOCABULARIES = {
    "math": [
        "solve", "equation", "integral", "derivative", "prove", "theorem", "sum",
        "fraction", "algebra", "calculate", "3x+1=10", "x^2", "polynomial", "root",
        "geometry", "triangle", "probability", "matrix", "limit", "arithmetic",
    ],
    "code": [
        "def", "function", "python", "class", "return", "compile", "bug", "loop",
        "array", "string", "variable", "import", "recursion", "api", "json",
        "refactor", "unittest", "lambda", "pointer", "segfault",
    ],
    "instruction": [
        "write", "essay", "summarize", "explain", "story", "email", "recipe",
        "advice", "travel", "poem", "describe", "letter", "history", "review",
        "opinion", "plan", "tips", "friendly", "weekend", "movie",
    ],
    "chinese": [
        "你好", "中国", "历史", "文化", "请", "解释", "北京", "诗歌", "翻译",
        "成语", "故事", "学习", "汉字", "朋友", "城市", "节日", "春节", "茶",
        "书法", "长城",
    ],
}


def make_router_corpus(n_per_class=500, seed=0, length=(4, 12), classes=None):
    """Queries drawn from disjoint per-class vocabularies, shuffled."""
    rng = generator(seed)
    classes = list(classes) if classes is not None else list(VOCABULARIES)
    data = []
    for label in classes:
        vocab = VOCABULARIES[label]
        for _ in range(n_per_class):
            size = int(rng.integers(length[0], length[1] + 1))
            words = [vocab[int(j)] for j in rng.integers(0, len(vocab), size=size)]
            data.append(LabeledQuery(" ".join(words), label))
    order = rng.permutation(len(data))
    return [data[i] for i in order]
