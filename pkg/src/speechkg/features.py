"""Per-node feature matrices: seeded random features, or vectors loaded
from an embedding file keyed by node key.

The binary embedding format is little-endian throughout:

    magic   8 bytes  "SKGEMB01"
    dim     u32
    count   u32
    then per record: key_len u32, key UTF-8 bytes, dim * f32

Vectors are stored as f32 on disk and widened to f64 in memory.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, MissingKeyError
from .util import atomic_write_bytes, atomic_write_text

log = logging.getLogger(__name__)

MAGIC = b"SKGEMB01"


@dataclass
class FeatureMatrix:
    data: np.ndarray  # (n_nodes, dim) float64, row i = features of node_id i
    missing_count: int = 0  # rows zero-filled because their key was absent

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if arr.ndim != 2:
            raise FormatError(f"feature matrix must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise FormatError("feature matrix contains non-finite entries")
        self.data = arr

    @property
    def n_nodes(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def random_features(n_nodes: int, dim: int, seed: int) -> FeatureMatrix:
    """I.i.d. standard-normal features from a seeded generator."""
    if dim < 1:
        raise ConfigError(f"feature dim must be >= 1, got {dim}")
    if n_nodes < 0:
        raise ConfigError(f"n_nodes must be >= 0, got {n_nodes}")
    rng = np.random.default_rng(seed)
    return FeatureMatrix(data=rng.standard_normal((n_nodes, dim)))


def write_embedding_file(path, keys, vectors) -> None:
    """Serialize (key, vector) records; f64 input is narrowed to f32."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise FormatError(f"vectors must be 2-D, got shape {vectors.shape}")
    keys = list(keys)
    if len(keys) != vectors.shape[0]:
        raise FormatError(f"{len(keys)} keys for {vectors.shape[0]} vectors")
    if len(set(keys)) != len(keys):
        dupe = next(k for i, k in enumerate(keys) if k in keys[:i])
        raise FormatError(f"duplicate key {dupe!r}")
    if not np.all(np.isfinite(vectors)):
        raise FormatError("vectors contain non-finite entries")
    dim = vectors.shape[1]
    parts = [MAGIC, struct.pack("<II", dim, len(keys))]
    narrowed = vectors.astype("<f4")
    for i, key in enumerate(keys):
        kb = str(key).encode("utf-8")
        parts.append(struct.pack("<I", len(kb)))
        parts.append(kb)
        parts.append(narrowed[i].tobytes())
    atomic_write_bytes(path, b"".join(parts))


def read_embedding_file(path) -> tuple[list[str], np.ndarray]:
    """Parse the binary format; errors name the failing byte offset."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise FormatError(f"file too short ({len(blob)} bytes) at offset 0")
    if blob[:8] != MAGIC:
        raise FormatError(f"bad magic {blob[:8]!r} at offset 0")
    dim, count = struct.unpack_from("<II", blob, 8)
    if dim < 1:
        raise FormatError("dim 0 in header at offset 8")
    offset = 16
    keys: list[str] = []
    rows = np.empty((count, dim), dtype=np.float64)
    vec_bytes = 4 * dim
    for i in range(count):
        if offset + 4 > len(blob):
            raise FormatError(f"truncated key length for record {i} at offset {offset}")
        (key_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if offset + key_len + vec_bytes > len(blob):
            raise FormatError(f"truncated record {i} at offset {offset}")
        try:
            key = blob[offset : offset + key_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"bad UTF-8 key in record {i} at offset {offset}") from exc
        offset += key_len
        rows[i] = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset)
        offset += vec_bytes
        keys.append(key)
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes at offset {offset}")
    if len(set(keys)) != len(keys):
        raise FormatError("duplicate keys in file")
    if not np.all(np.isfinite(rows)):
        raise FormatError("file contains non-finite vector entries")
    return keys, rows


def read_embedding_jsonl(path) -> tuple[list[str], np.ndarray]:
    """Companion debug format: one {"key": ..., "vector": [...]} per line."""
    keys: list[str] = []
    vectors: list[list[float]] = []
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
                key = str(payload["key"])
                vec = [float(x) for x in payload["vector"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"line {lineno}: bad record ({exc})") from exc
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise FormatError(f"line {lineno}: dim {len(vec)} != {dim}")
            keys.append(key)
            vectors.append(vec)
    if dim is None or dim == 0:
        raise FormatError("no vectors in file")
    rows = np.asarray(vectors, dtype=np.float64)
    if len(set(keys)) != len(keys):
        raise FormatError("duplicate keys in file")
    if not np.all(np.isfinite(rows)):
        raise FormatError("file contains non-finite vector entries")
    return keys, rows


def write_embedding_jsonl(path, keys, vectors) -> None:
    vectors = np.asarray(vectors, dtype=np.float64)
    lines = [
        json.dumps({"key": str(k), "vector": [float(x) for x in vectors[i]]}, ensure_ascii=False)
        for i, k in enumerate(keys)
    ]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_features(path, graph, missing_policy: str = "error", fmt: str = "binary") -> FeatureMatrix:
    """Align file vectors to graph nodes by key.

    missing_policy "error" raises on any absent key; "zero_fill" writes
    all-zero rows and reports how many through FeatureMatrix.missing_count.
    """
    if missing_policy not in ("error", "zero_fill"):
        raise ConfigError(f"unknown missing_policy {missing_policy!r}")
    if fmt == "binary":
        keys, rows = read_embedding_file(path)
    elif fmt == "jsonl":
        keys, rows = read_embedding_jsonl(path)
    else:
        raise ConfigError(f"unknown embedding format {fmt!r}")
    by_key = {k: i for i, k in enumerate(keys)}
    out = np.zeros((graph.n_nodes, rows.shape[1]), dtype=np.float64)
    missing = 0
    for node in graph.nodes:
        row = by_key.get(node.key)
        if row is None:
            if missing_policy == "error":
                raise MissingKeyError(f"no embedding for node key {node.key!r}")
            missing += 1
        else:
            out[node.node_id] = rows[row]
    if missing:
        log.warning("zero-filled %d nodes with no embedding", missing)
    return FeatureMatrix(data=out, missing_count=missing)


def write_features(matrix: FeatureMatrix, keys, path) -> None:
    """Serialize a feature matrix with one record per node key."""
    write_embedding_file(path, keys, matrix.data)
