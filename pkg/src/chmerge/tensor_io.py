"""Checkpoints, merged bundles, and their on-disk safetensors encoding.

A tensor file is laid out as::

    u64 little-endian header length H
    H bytes of UTF-8 JSON: {name: {"dtype", "shape", "data_offsets"}, "__metadata__": {...}}
    concatenated little-endian buffers, offsets relative to the end of the header

Files written here are canonical: tensors sorted by name, contiguous offsets,
compact JSON with sorted keys, header padded with spaces to a multiple of 8.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import CorruptBundleError, TensorFileError

__all__ = [
    "Checkpoint",
    "Manifest",
    "MergedBundle",
    "read_tensor_file",
    "write_tensor_file",
    "checkpoint_to_bytes",
    "checkpoint_from_bytes",
    "checkpoint_sha256",
    "save_bundle",
    "load_bundle",
    "validate_bundle",
]

FORMAT_VERSION = 1

_DTYPES = {"F32": np.dtype("<f4"), "U32": np.dtype("<u4")}
_RANK1_KEY = "chmerge.rank1"
_NAME_KEY = "chmerge.name"
_BITS = {4: np.uint32, 8: np.uint64}
_GROUP_RE = re.compile(r"^group_(\d+)\.safetensors$")


class Checkpoint:
    """One model's weights: layer name -> float32 matrix of shape (O, I).

    Layers are kept in lexicographic order. One-dimensional parameters are
    stored as (O, 1) columns; their names are remembered in ``vectors`` so
    that they are written back as 1-D tensors. Weights are float32; delta
    checkpoints are held in float64 (``dtype``) and cannot be serialized.
    """

    def __init__(self, layers, name="", metadata=None, vectors=(), dtype=np.float32):
        ordered = {}
        for layer in sorted(layers):
            arr = np.ascontiguousarray(layers[layer], dtype=dtype)
            if arr.ndim == 1:
                arr = arr.reshape(-1, 1)
            if arr.ndim != 2:
                raise TensorFileError(
                    f"layer {layer!r} must be 2-D, got shape {arr.shape}"
                )
            ordered[layer] = arr
        self.layers = ordered
        self.name = name
        self.metadata = dict(metadata or {})
        self.vectors = frozenset(v for v in vectors if v in ordered)

    @property
    def names(self):
        return list(self.layers)

    @property
    def shapes(self):
        return {k: v.shape for k, v in self.layers.items()}

    @property
    def num_params(self):
        return sum(v.size for v in self.layers.values())

    @property
    def num_channels(self):
        return sum(v.shape[0] for v in self.layers.values())

    def __getitem__(self, layer):
        return self.layers[layer]

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def items(self):
        return self.layers.items()

    @property
    def dtype(self):
        return next(iter(self.layers.values())).dtype if self.layers else np.dtype(np.float32)

    def like(self, layers, name=None, dtype=np.float32):
        """New checkpoint with the same metadata and 1-D flags but new tensors."""
        return Checkpoint(
            layers,
            name=self.name if name is None else name,
            metadata=self.metadata,
            vectors=self.vectors,
            dtype=dtype,
        )

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if (
            self.dtype != other.dtype
            or self.name != other.name
            or self.metadata != other.metadata
            or self.vectors != other.vectors
            or self.names != other.names
        ):
            return False
        return all(
            a.shape == b.shape and np.array_equal(a.view(_BITS[a.dtype.itemsize]), b.view(_BITS[b.dtype.itemsize]))
            for a, b in zip(self.layers.values(), other.layers.values())
        )

    __hash__ = None

    def __repr__(self):
        return (
            f"Checkpoint(name={self.name!r}, layers={len(self.layers)}, "
            f"params={self.num_params})"
        )


# --------------------------------------------------------------------------- #
# raw safetensors encoding


def _encode(tensors, metadata):
    header = {}
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name]
        dtype = next(k for k, v in _DTYPES.items() if v == arr.dtype.newbyteorder("<"))
        nbytes = arr.size * arr.dtype.itemsize
        header[name] = {
            "dtype": dtype,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + nbytes],
        }
        offset += nbytes
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    raw = text.encode("utf-8")
    raw += b" " * (-len(raw) % 8)
    chunks = [struct.pack("<Q", len(raw)), raw]
    for name in sorted(tensors):
        arr = tensors[name]
        chunks.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(chunks)


def _decode(data):
    if len(data) < 8:
        raise TensorFileError("truncated header: file shorter than 8 bytes")
    (hlen,) = struct.unpack_from("<Q", data, 0)
    if hlen > len(data) - 8:
        raise TensorFileError(
            f"truncated header: declared length {hlen} exceeds file size {len(data)}"
        )
    try:
        text = data[8 : 8 + hlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise TensorFileError(f"header is not valid UTF-8 text: {exc}") from None
    try:
        header = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TensorFileError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise TensorFileError("header must be a JSON object")

    metadata = header.pop("__metadata__", None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise TensorFileError("__metadata__ must map strings to strings")

    body = memoryview(data)[8 + hlen :]
    spans = []
    tensors = {}
    for name, info in header.items():
        if not isinstance(info, dict) or not {"dtype", "shape", "data_offsets"} <= set(info):
            raise TensorFileError(f"tensor {name!r}: malformed header entry")
        dtype = _DTYPES.get(info["dtype"])
        if dtype is None:
            raise TensorFileError(f"tensor {name!r}: unsupported dtype {info['dtype']!r}")
        shape = info["shape"]
        offsets = info["data_offsets"]
        if (
            not isinstance(shape, list)
            or not all(isinstance(s, int) and s >= 0 for s in shape)
            or not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) for o in offsets)
        ):
            raise TensorFileError(f"tensor {name!r}: malformed shape or data_offsets")
        begin, end = offsets
        if not 0 <= begin <= end <= len(body):
            raise TensorFileError(
                f"tensor {name!r}: data offsets [{begin}, {end}] out of range "
                f"(data section is {len(body)} bytes)"
            )
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if end - begin != count * dtype.itemsize:
            raise TensorFileError(
                f"tensor {name!r}: byte span {end - begin} does not match shape {shape}"
            )
        spans.append((begin, end, name))
        tensors[name] = np.frombuffer(body[begin:end], dtype=dtype).reshape(shape).copy()

    spans.sort()
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise TensorFileError(f"tensors {n0!r} and {n1!r} have overlapping data offsets")
    return tensors, metadata


# --------------------------------------------------------------------------- #
# checkpoints


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    """Canonical serialization of a checkpoint."""
    if len(ckpt) == 0:
        raise TensorFileError("cannot serialize an empty checkpoint")
    if ckpt.dtype != np.float32:
        raise TensorFileError(f"only float32 checkpoints can be written, got {ckpt.dtype}")
    tensors = {}
    for layer, arr in ckpt.items():
        tensors[layer] = arr.reshape(-1) if layer in ckpt.vectors else arr
    metadata = dict(ckpt.metadata)
    if ckpt.vectors:
        metadata[_RANK1_KEY] = json.dumps(sorted(ckpt.vectors), separators=(",", ":"))
    if ckpt.name:
        metadata[_NAME_KEY] = ckpt.name
    return _encode(tensors, metadata)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    tensors, metadata = _decode(data)
    metadata = dict(metadata)
    metadata.pop(_RANK1_KEY, None)
    name = metadata.pop(_NAME_KEY, "")
    layers = {}
    vectors = []
    for layer, arr in tensors.items():
        if arr.dtype != _DTYPES["F32"]:
            raise TensorFileError(f"tensor {layer!r}: only F32 weights are supported")
        if arr.ndim == 1:
            vectors.append(layer)
            arr = arr.reshape(-1, 1)
        elif arr.ndim != 2:
            raise TensorFileError(
                f"tensor {layer!r}: rank {arr.ndim} not supported (only 1-D and 2-D)"
            )
        if not np.isfinite(arr).all():
            raise TensorFileError(f"tensor {layer!r} contains NaN or Inf")
        layers[layer] = arr
    return Checkpoint(layers, name=name, metadata=metadata, vectors=vectors)


def checkpoint_sha256(ckpt: Checkpoint) -> str:
    return hashlib.sha256(checkpoint_to_bytes(ckpt)).hexdigest()


def _atomic_write(path, data):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor_file(ckpt: Checkpoint, path) -> None:
    """Write ``ckpt`` to ``path`` in canonical layout."""
    _atomic_write(path, checkpoint_to_bytes(ckpt))


def read_tensor_file(path) -> Checkpoint:
    """Read a float32 checkpoint; 1-D tensors are promoted to (O, 1)."""
    data = Path(path).read_bytes()
    return checkpoint_from_bytes(data)


# --------------------------------------------------------------------------- #
# bundles


@dataclass
class Manifest:
    experts: list
    k: int
    lambda_: float = 0.5
    prune: dict = field(default_factory=lambda: {"kind": "none", "ratio": 0.0, "rescale": True})
    cluster: dict = field(
        default_factory=lambda: {
            "strategy": "kmeans",
            "metric": "cosine",
            "granularity": "channel",
            "restarts": 8,
            "max_iters": 100,
        }
    )
    seed: int = 0
    base_sha256: str = ""
    normalize: bool = False
    inputs: dict | None = None
    format_version: int = FORMAT_VERSION

    def to_dict(self):
        out = {
            "format_version": self.format_version,
            "experts": list(self.experts),
            "k": self.k,
            "lambda": self.lambda_,
            "normalize": self.normalize,
            "prune": dict(self.prune),
            "cluster": dict(self.cluster),
            "seed": self.seed,
            "base_sha256": self.base_sha256,
        }
        if self.inputs is not None:
            out["inputs"] = self.inputs
        return out

    @classmethod
    def from_dict(cls, data):
        missing = [
            key
            for key in ("format_version", "experts", "k", "lambda", "prune", "cluster", "seed", "base_sha256")
            if key not in data
        ]
        if missing:
            raise CorruptBundleError(f"manifest is missing field(s): {', '.join(missing)}")
        if data["format_version"] != FORMAT_VERSION:
            raise CorruptBundleError(f"unsupported format_version {data['format_version']!r}")
        if not isinstance(data["base_sha256"], str) or not data["base_sha256"]:
            raise CorruptBundleError("manifest base_sha256 is empty")
        return cls(
            experts=list(data["experts"]),
            k=data["k"],
            lambda_=data["lambda"],
            prune=dict(data["prune"]),
            cluster=dict(data["cluster"]),
            seed=data["seed"],
            base_sha256=data["base_sha256"],
            normalize=bool(data.get("normalize", False)),
            inputs=data.get("inputs"),
            format_version=data["format_version"],
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass
class MergedBundle:
    """K group checkpoints plus per-expert channel index tensors."""

    groups: list
    indices: dict
    manifest: Manifest

    @property
    def k(self):
        return len(self.groups)

    @property
    def experts(self):
        return list(self.manifest.experts)

    def __eq__(self, other):
        if not isinstance(other, MergedBundle):
            return NotImplemented
        if self.manifest != other.manifest or self.groups != other.groups:
            return False
        if list(self.indices) != list(other.indices):
            return False
        for expert, table in self.indices.items():
            other_table = other.indices[expert]
            if list(table) != list(other_table):
                return False
            if not all(np.array_equal(table[l], other_table[l]) for l in table):
                return False
        return True


def validate_bundle(bundle: MergedBundle) -> None:
    """Raise :class:`CorruptBundleError` unless every bundle invariant holds."""
    m = bundle.manifest
    if not isinstance(m.k, int) or isinstance(m.k, bool) or m.k < 1:
        raise CorruptBundleError(f"manifest k must be a positive integer, got {m.k!r}")
    n = len(m.experts)
    if n < 1:
        raise CorruptBundleError("manifest lists no experts")
    if len(set(m.experts)) != n:
        raise CorruptBundleError("manifest expert names are not unique")
    if m.k > n:
        raise CorruptBundleError(f"k={m.k} exceeds the number of experts {n}")
    if len(bundle.groups) != m.k:
        raise CorruptBundleError(
            f"manifest declares k={m.k} but bundle holds {len(bundle.groups)} group(s)"
        )
    ref = bundle.groups[0]
    for g, group in enumerate(bundle.groups[1:], start=1):
        if group.shapes != ref.shapes:
            raise CorruptBundleError(f"group {g} layer names or shapes differ from group 0")
    for expert in m.experts:
        if "/" in expert:
            raise CorruptBundleError(f"expert name {expert!r} must not contain '/'")
        if expert not in bundle.indices:
            raise CorruptBundleError(f"no index tensors for expert {expert!r}")
    extra = sorted(set(bundle.indices) - set(m.experts))
    if extra:
        raise CorruptBundleError(f"index tensors for unknown expert {extra[0]!r}")
    for expert in m.experts:
        table = bundle.indices[expert]
        for layer, (rows, _) in ref.shapes.items():
            if layer not in table:
                raise CorruptBundleError(f"expert {expert!r} has no index for layer {layer!r}")
            idx = np.asarray(table[layer])
            if idx.shape != (rows,):
                raise CorruptBundleError(
                    f"index {expert}/{layer} has shape {idx.shape}, expected ({rows},)"
                )
            if idx.size and int(idx.max()) >= m.k:
                raise CorruptBundleError(
                    f"index {expert}/{layer} references group {int(idx.max())} >= k={m.k}"
                )
        if set(table) != set(ref.layers):
            raise CorruptBundleError(f"expert {expert!r} indexes unknown layers")


def save_bundle(bundle: MergedBundle, directory) -> None:
    validate_bundle(bundle)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for stale in directory.iterdir():
        match = _GROUP_RE.match(stale.name)
        if match and int(match.group(1)) >= bundle.k:
            stale.unlink()
    for k, group in enumerate(bundle.groups):
        write_tensor_file(group, directory / f"group_{k}.safetensors")
    tensors = {}
    for expert in bundle.manifest.experts:
        for layer, idx in bundle.indices[expert].items():
            tensors[f"{expert}/{layer}"] = np.asarray(idx, dtype="<u4").reshape(-1, 1)
    _atomic_write(directory / "indices.safetensors", _encode(tensors, {}))
    _atomic_write(directory / "manifest.json", bundle.manifest.to_json().encode("utf-8"))


def load_bundle(directory) -> MergedBundle:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise CorruptBundleError(f"{manifest_path} not found")
    try:
        data = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptBundleError(f"manifest.json is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise CorruptBundleError("manifest.json must hold a JSON object")
    manifest = Manifest.from_dict(data)

    present = sorted(
        int(m.group(1)) for m in (_GROUP_RE.match(p.name) for p in directory.iterdir()) if m
    )
    if not isinstance(manifest.k, int) or manifest.k < 1:
        raise CorruptBundleError(f"manifest k must be a positive integer, got {manifest.k!r}")
    for k in range(manifest.k):
        if k not in present:
            raise CorruptBundleError(f"missing group file group_{k}.safetensors")
    if len(present) != manifest.k:
        raise CorruptBundleError(
            f"manifest declares k={manifest.k} but directory holds {len(present)} group file(s)"
        )

    try:
        groups = [read_tensor_file(directory / f"group_{k}.safetensors") for k in range(manifest.k)]
        index_path = directory / "indices.safetensors"
        if not index_path.is_file():
            raise CorruptBundleError("missing indices.safetensors")
        raw, _ = _decode(index_path.read_bytes())
    except TensorFileError as exc:
        raise CorruptBundleError(str(exc)) from None

    indices = {expert: {} for expert in manifest.experts}
    for name in sorted(raw):
        arr = raw[name]
        expert, sep, layer = name.partition("/")
        if not sep or expert not in indices:
            raise CorruptBundleError(f"index tensor {name!r} does not name a known expert")
        if arr.dtype != _DTYPES["U32"] or arr.ndim != 2 or arr.shape[1] != 1:
            raise CorruptBundleError(f"index tensor {name!r} must be U32 with shape [O, 1]")
        indices[expert][layer] = arr.reshape(-1)
    bundle = MergedBundle(groups=groups, indices=indices, manifest=manifest)
    validate_bundle(bundle)
    return bundle
