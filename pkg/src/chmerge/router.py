"""Task-specific router: hashed bag-of-words features and a softmax classifier."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._rng import generator
from ._validation import check_positive_int, check_seed
from .exceptions import InvalidParameterError, TensorFileError
from .tensor_io import Checkpoint, read_tensor_file, write_tensor_file

__all__ = [
    "TokenizerConfig",
    "TrainConfig",
    "LabeledQuery",
    "RouterModel",
    "tokenize",
    "featurize",
    "featurize_many",
    "softmax",
    "loss_and_grad",
    "train_router",
    "route",
    "read_jsonl",
    "save_router",
    "load_router",
    "HashedRouter",
]


@dataclass(frozen=True)
class TokenizerConfig:
    dim: int = 2**15
    lowercase: bool = True
    bigrams: bool = True
    hash_seed: int = 0

    def __post_init__(self):
        check_positive_int(self.dim, "dim", minimum=2)
        if self.dim & (self.dim - 1):
            raise InvalidParameterError(f"dim must be a power of two, got {self.dim}")
        object.__setattr__(self, "hash_seed", check_seed(self.hash_seed))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.5
    epochs: int = 20
    batch: int = 32
    seed: int = 0
    dim: int = 2**15
    bigrams: bool = True
    lowercase: bool = True
    hash_seed: int = 0

    @property
    def tokenizer(self):
        return TokenizerConfig(self.dim, self.lowercase, self.bigrams, self.hash_seed)


@dataclass(frozen=True)
class LabeledQuery:
    text: str
    label: str


def tokenize(text, config: TokenizerConfig):
    if config.lowercase:
        text = text.lower()
    words = text.split()
    if config.bigrams:
        words = words + [f"{a} {b}" for a, b in zip(words, words[1:])]
    return words


def _bucket(token, config):
    digest = hashlib.blake2b(
        token.encode("utf-8"), digest_size=8, key=config.hash_seed.to_bytes(8, "little")
    ).digest()
    return int.from_bytes(digest, "little") & (config.dim - 1)


def featurize(text, config: TokenizerConfig = TokenizerConfig()):
    """L2-normalised hashed token counts as a (1, dim) CSR row."""
    tokens = tokenize(text, config)
    if not tokens:
        raise InvalidParameterError("empty query")
    counts = {}
    for tok in tokens:
        b = _bucket(tok, config)
        counts[b] = counts.get(b, 0) + 1
    cols = np.array(sorted(counts), dtype=np.int64)
    vals = np.array([counts[c] for c in cols], dtype=np.float64)
    vals /= np.linalg.norm(vals)
    return sp.csr_matrix((vals, (np.zeros_like(cols), cols)), shape=(1, config.dim))


def featurize_many(texts, config: TokenizerConfig = TokenizerConfig()):
    return sp.vstack([featurize(t, config) for t in texts], format="csr")


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(W, b, X, y):
    """Mean cross-entropy of ``softmax(X W^T + b)`` and its gradient in (W, b)."""
    logits = np.asarray(X @ W.T) + b
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    n = len(y)
    loss = float(np.mean(log_norm - shifted[np.arange(n), y]))
    G = softmax(logits)
    G[np.arange(n), y] -= 1.0
    G /= n
    grad_W = np.asarray(X.T @ G).T
    return loss, grad_W, G.sum(axis=0)


@dataclass
class RouterModel:
    classes: list
    weight: np.ndarray
    bias: np.ndarray
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    loss_history: list = field(default_factory=list)

    @property
    def final_loss(self):
        return self.loss_history[-1] if self.loss_history else float("nan")

    def predict_proba(self, X):
        logits = np.asarray(X @ self.weight.T.astype(np.float64)) + self.bias.astype(np.float64)
        return softmax(logits)


def _check_data(data):
    data = [q if isinstance(q, LabeledQuery) else LabeledQuery(*q) for q in data]
    if not data:
        raise InvalidParameterError("training data is empty")
    if len({q.label for q in data}) < 2:
        raise InvalidParameterError("training data must contain at least two distinct labels")
    return data


def train_router(data, config: TrainConfig = TrainConfig(), classes=None) -> RouterModel:
    """Multinomial logistic regression by seeded mini-batch gradient descent."""
    data = _check_data(data)
    classes = list(classes) if classes is not None else sorted({q.label for q in data})
    pos = {c: i for i, c in enumerate(classes)}
    unknown = sorted({q.label for q in data} - set(pos))
    if unknown:
        raise InvalidParameterError(f"label {unknown[0]!r} is not a known class")
    tok = config.tokenizer
    X = featurize_many([q.text for q in data], tok)
    y = np.array([pos[q.label] for q in data])
    n = len(y)
    batch = check_positive_int(config.batch, "batch")
    epochs = check_positive_int(config.epochs, "epochs")

    rng = generator(check_seed(config.seed))
    W = rng.normal(0.0, 0.01, size=(len(classes), tok.dim))
    b = np.zeros(len(classes))
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            _, gW, gb = loss_and_grad(W, b, X[idx], y[idx])
            W -= config.lr * gW
            b -= config.lr * gb
        history.append(loss_and_grad(W, b, X, y)[0])
    return RouterModel(
        classes=classes,
        weight=W.astype(np.float32),
        bias=b.astype(np.float32),
        tokenizer=tok,
        loss_history=history,
    )


def route(model: RouterModel, query):
    """Class probabilities for ``query`` and the arg-max class (ties -> lowest index)."""
    probs = model.predict_proba(featurize(query, model.tokenizer))[0]
    chosen = model.classes[int(np.argmax(probs))]
    return {"scores": dict(zip(model.classes, probs.tolist())), "chosen": chosen}


def read_jsonl(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(LabeledQuery(str(obj["text"]), str(obj["label"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise InvalidParameterError(f"{path}:{lineno}: bad record ({exc})") from None
    return out


def save_router(model: RouterModel, path):
    metadata = {
        "router.classes": json.dumps(model.classes),
        "router.tokenizer": json.dumps(asdict(model.tokenizer), sort_keys=True),
        "router.loss_history": json.dumps(model.loss_history),
    }
    ckpt = Checkpoint(
        {"weight": model.weight, "bias": model.bias},
        metadata=metadata,
        vectors=["bias"],
    )
    write_tensor_file(ckpt, path)


def load_router(path) -> RouterModel:
    ckpt = read_tensor_file(path)
    try:
        classes = json.loads(ckpt.metadata["router.classes"])
        tok = TokenizerConfig(**json.loads(ckpt.metadata["router.tokenizer"]))
        history = json.loads(ckpt.metadata.get("router.loss_history", "[]"))
        weight = ckpt.layers["weight"]
        bias = ckpt.layers["bias"].reshape(-1)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise TensorFileError(f"{path} is not a router model file ({exc})") from None
    if weight.shape != (len(classes), tok.dim) or bias.shape != (len(classes),):
        raise TensorFileError(f"{path}: router tensor shapes do not match metadata")
    return RouterModel(classes, weight, bias, tok, history)


class HashedRouter(BaseEstimator, ClassifierMixin):
    """scikit-learn classifier over raw query strings.

    >>> clf = HashedRouter(n_features=2**10).fit(["solve x", "def f"], ["math", "code"])
    >>> clf.predict(["solve y"]).tolist()
    ['math']
    """

    def __init__(
        self,
        n_features=2**15,
        lr=0.5,
        epochs=20,
        batch_size=32,
        bigrams=True,
        lowercase=True,
        hash_seed=0,
        random_state=0,
    ):
        self.n_features = n_features
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.bigrams = bigrams
        self.lowercase = lowercase
        self.hash_seed = hash_seed
        self.random_state = random_state

    def _config(self):
        return TrainConfig(
            lr=self.lr,
            epochs=self.epochs,
            batch=self.batch_size,
            seed=self.random_state,
            dim=self.n_features,
            bigrams=self.bigrams,
            lowercase=self.lowercase,
            hash_seed=self.hash_seed,
        )

    def fit(self, X, y):
        self.model_ = train_router(
            [LabeledQuery(t, str(label)) for t, label in zip(X, y)], self._config()
        )
        self.classes_ = np.array(self.model_.classes)
        self.coef_ = self.model_.weight
        self.intercept_ = self.model_.bias
        self.loss_history_ = self.model_.loss_history
        return self

    def transform(self, X):
        return featurize_many(X, self._config().tokenizer)

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(self.transform(X))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
