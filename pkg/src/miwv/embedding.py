"""Corpus embedding: pooling, cosine similarity, backends, and the disk cache.

One vector is produced per rendered instruction. Vectors are stored as
float32; every reduction over components (dot products, norms, means) is
carried out in float64 before any cast back down. Zero-norm vectors are
legal: their similarity to anything is 0.0, reported with a warning rather
than an error, so a degenerate row can never crash a run.

Two backend kinds exist. ``remote`` speaks the usual embeddings POST
endpoint. ``builtin-hash`` is a deterministic, dependency-free embedder used
by the test suite and for offline dry runs: the UTF-8 bytes of the text are
swept with every contiguous 3-byte window, each window is FNV-1a-64 hashed,
the hash picks one of 256 buckets and a +/-1 sign (bit 63), the signed
counts are accumulated and the result is L2-normalized. Texts shorter than
3 bytes hash the whole text as a single window.
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._http import post_json
from .dataset import Dataset, TemplateProfile, render_instruction
from .errors import (
    CacheCorruptError,
    DimensionMismatchError,
    EmptySequenceError,
    MalformedResponseError,
    ParseError,
)
from .fnv import FNV64_OFFSET, FNV64_PRIME, fnv1a64

BUILTIN_HASH_DIMENSION = 256

POOLING_MODES = ("token-mean", "backend-pooled")
BACKEND_KINDS = ("remote", "builtin-hash")


class ZeroNormWarning(RuntimeWarning):
    """A zero-norm vector took part in a similarity computation."""


@dataclass(frozen=True)
class EmbeddingBackendDescriptor:
    kind: str
    model_id: str
    dimension: int
    pooling: str

    def as_dict(self) -> dict:
        return {
            "kind": self.kind,
            "model_id": self.model_id,
            "dimension": self.dimension,
            "pooling": self.pooling,
        }


@dataclass(frozen=True)
class TokenEmbeddingSequence:
    """Per-token vectors for one text, shape (tokens, dimension)."""

    vectors: np.ndarray

    @property
    def q(self) -> int:
        return int(self.vectors.shape[0])


@dataclass(frozen=True)
class EmbeddingVector:
    components: np.ndarray  # (d,) float32
    norm: float  # L2 norm, accumulated in float64

    @classmethod
    def from_components(cls, components: np.ndarray) -> "EmbeddingVector":
        arr = np.asarray(components, dtype=np.float32)
        norm = float(np.linalg.norm(arr.astype(np.float64)))
        return cls(components=arr, norm=norm)

    @property
    def d(self) -> int:
        return int(self.components.shape[0])


def mean_pool(tokens: TokenEmbeddingSequence) -> EmbeddingVector:
    """Average per-token vectors into one sample vector (float64 mean)."""
    if tokens.q == 0:
        raise EmptySequenceError("cannot pool an empty token sequence")
    mean64 = tokens.vectors.astype(np.float64).mean(axis=0)
    return EmbeddingVector.from_components(mean64.astype(np.float32))


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine of two vectors, clamped to [-1, 1].

    Zero-norm operands yield 0.0 and a ZeroNormWarning instead of an error.
    """
    if a.d != b.d:
        raise DimensionMismatchError(f"dimension mismatch: {a.d} vs {b.d}")
    if a.norm == 0.0 or b.norm == 0.0:
        warnings.warn("zero-norm vector in cosine similarity", ZeroNormWarning, stacklevel=2)
        return 0.0
    dot = float(np.dot(a.components.astype(np.float64), b.components.astype(np.float64)))
    return min(1.0, max(-1.0, dot / (a.norm * b.norm)))


def hash_embed_text(text: str) -> np.ndarray:
    """Embed a text with the builtin 3-byte-window hashing scheme."""
    data = text.encode("utf-8")
    acc = np.zeros(BUILTIN_HASH_DIMENSION, dtype=np.float64)
    if len(data) < 3:
        h = fnv1a64(data)
        acc[h % BUILTIN_HASH_DIMENSION] = 1.0 if (h >> 63) == 0 else -1.0
    else:
        hashes = _fnv3_window_hashes(np.frombuffer(data, dtype=np.uint8))
        buckets = (hashes % np.uint64(BUILTIN_HASH_DIMENSION)).astype(np.int64)
        signs = np.where((hashes >> np.uint64(63)) == 0, 1.0, -1.0)
        acc = np.bincount(buckets, weights=signs, minlength=BUILTIN_HASH_DIMENSION)
    norm = float(np.sqrt(np.dot(acc, acc)))
    if norm == 0.0:
        return np.zeros(BUILTIN_HASH_DIMENSION, dtype=np.float32)
    return (acc / norm).astype(np.float32)


def _fnv3_window_hashes(data: np.ndarray) -> np.ndarray:
    """FNV-1a-64 of every contiguous 3-byte window, vectorized."""
    prime = np.uint64(FNV64_PRIME)
    with np.errstate(over="ignore"):
        h = np.full(len(data) - 2, np.uint64(FNV64_OFFSET), dtype=np.uint64)
        for sl in (data[:-2], data[1:-1], data[2:]):
            h = (h ^ sl.astype(np.uint64)) * prime
    return h


class BuiltinHashBackend:
    """Deterministic local embedder; no network, no model weights."""

    def __init__(self, model_id: str = "fnv1a64-3gram"):
        self.descriptor = EmbeddingBackendDescriptor(
            kind="builtin-hash",
            model_id=model_id,
            dimension=BUILTIN_HASH_DIMENSION,
            pooling="backend-pooled",
        )
        self.calls = 0

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        self.calls += len(texts)
        return [hash_embed_text(t) for t in texts]


class RemoteEmbeddingBackend:
    """Client for a POST {base_url}/v1/embeddings endpoint.

    The reply's data items are re-ordered by their "index" field before use,
    so a backend that answers out of order is still handled correctly. Each
    item's "embedding" may be a flat vector (backend-pooled) or a list of
    per-token vectors (token-mean).
    """

    def __init__(
        self,
        descriptor: EmbeddingBackendDescriptor,
        base_url: str,
        *,
        timeout: float = 60.0,
        retries: int = 2,
    ):
        self.descriptor = descriptor
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.calls = 0

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray | TokenEmbeddingSequence]:
        self.calls += len(texts)
        reply = post_json(
            f"{self.base_url}/v1/embeddings",
            {"model": self.descriptor.model_id, "input": list(texts)},
            timeout=self.timeout,
            retries=self.retries,
        )
        items = reply.get("data")
        if not isinstance(items, list) or len(items) != len(texts):
            raise MalformedResponseError(
                f"embeddings reply has {len(items) if isinstance(items, list) else 'no'} "
                f"items for {len(texts)} inputs"
            )
        by_index: dict[int, object] = {}
        for item in items:
            if not isinstance(item, dict) or "index" not in item or "embedding" not in item:
                raise MalformedResponseError("embeddings reply item missing index/embedding")
            by_index[int(item["index"])] = item["embedding"]
        if sorted(by_index) != list(range(len(texts))):
            raise MalformedResponseError("embeddings reply indexes do not cover the batch")
        return [_parse_embedding(by_index[i]) for i in range(len(texts))]


def _parse_embedding(value: object) -> np.ndarray | TokenEmbeddingSequence:
    if not isinstance(value, list) or not value:
        raise MalformedResponseError("embedding value must be a non-empty list")
    if isinstance(value[0], list):
        return TokenEmbeddingSequence(vectors=np.asarray(value, dtype=np.float32))
    return np.asarray(value, dtype=np.float32)


class EmbeddingMatrix:
    """Row-per-sample embedding store plus provenance."""

    def __init__(
        self,
        vectors: np.ndarray,
        backend: EmbeddingBackendDescriptor,
        dataset_hash: str,
    ):
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        self.backend = backend
        self.dataset_hash = dataset_hash
        self._norms: np.ndarray | None = None

    @property
    def n(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def d(self) -> int:
        return int(self.vectors.shape[1])

    def row(self, sample_id: int) -> EmbeddingVector:
        return EmbeddingVector.from_components(self.vectors[sample_id])

    def norms64(self) -> np.ndarray:
        if self._norms is None:
            self._norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        return self._norms

    def unit_rows64(self) -> np.ndarray:
        """Rows scaled to unit length in float64; zero rows stay zero."""
        rows = self.vectors.astype(np.float64)
        norms = self.norms64()
        safe = np.where(norms == 0.0, 1.0, norms)
        return rows / safe[:, None]

    def save(self, path: str | Path) -> None:
        header = {
            "kind": "embedding-matrix",
            "n": self.n,
            "d": self.d,
            "dataset_hash": self.dataset_hash,
            "backend": self.backend.as_dict(),
        }
        payload = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
        payload += self.vectors.astype("<f4").tobytes()
        _atomic_write_bytes(Path(path), payload)

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingMatrix":
        raw = Path(path).read_bytes()
        newline = raw.find(b"\n")
        if newline < 0:
            raise ParseError(f"{path}: missing embedding header")
        try:
            header = json.loads(raw[:newline].decode("utf-8"))
            n, d = int(header["n"]), int(header["d"])
            backend = EmbeddingBackendDescriptor(**header["backend"])
            dataset_hash = str(header["dataset_hash"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: bad embedding header: {exc}") from exc
        body = raw[newline + 1 :]
        if len(body) != 4 * n * d:
            raise ParseError(f"{path}: expected {4 * n * d} payload bytes, got {len(body)}")
        vectors = np.frombuffer(body, dtype="<f4").reshape(n, d)
        return cls(vectors=vectors, backend=backend, dataset_hash=dataset_hash)


@dataclass
class EmbedStats:
    cache_hits: int = 0
    cache_misses: int = 0
    backend_calls: int = 0


def cache_key(model_id: str, profile_name: str, sample_hash: str) -> str:
    joined = "\n".join((model_id, profile_name, sample_hash))
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()


def _cache_path(cache_dir: Path, key: str) -> Path:
    return cache_dir / f"{key}.vec"


def _write_cache_entry(
    path: Path,
    model_id: str,
    profile_name: str,
    sample_hash: str,
    components: np.ndarray,
) -> None:
    header = {
        "model_id": model_id,
        "profile": profile_name,
        "d": int(components.shape[0]),
        "content_hash": sample_hash,
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    payload += components.astype("<f4").tobytes()
    _atomic_write_bytes(path, payload)


def _read_cache_entry(
    path: Path,
    model_id: str,
    profile_name: str,
    sample_hash: str,
    dimension: int,
) -> np.ndarray:
    try:
        raw = path.read_bytes()
        newline = raw.find(b"\n")
        header = json.loads(raw[:newline].decode("utf-8"))
        body = raw[newline + 1 :]
    except (OSError, ValueError) as exc:
        raise CacheCorruptError(str(path), f"{path}: {exc}") from exc
    expected = {
        "model_id": model_id,
        "profile": profile_name,
        "d": dimension,
        "content_hash": sample_hash,
    }
    if header != expected or len(body) != 4 * dimension:
        raise CacheCorruptError(str(path))
    return np.frombuffer(body, dtype="<f4").copy()


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    # Concurrent writers of the same key each write a full temp file and
    # rename; readers therefore only ever see complete entries.
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp.{os.getpid()}")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def embed_corpus(
    dataset: Dataset,
    profile: TemplateProfile,
    backend,
    cache_dir: str | Path,
    *,
    batch_size: int = 64,
    workers: int = 1,
    progress: Callable[[int, int], None] | None = None,
) -> tuple[EmbeddingMatrix, EmbedStats]:
    """Embed every rendered instruction, going to the backend only on misses.

    Returns the matrix (rows in sample-id order) and cache statistics. The
    cache key is (model id, profile name, sample content hash), so editing a
    sample, switching models, or switching templates each miss cleanly.
    """
    descriptor: EmbeddingBackendDescriptor = backend.descriptor
    cache_dir = Path(cache_dir)
    stats = EmbedStats()
    n = dataset.n
    rows: list[np.ndarray | None] = [None] * n
    texts = [render_instruction(s, profile).text for s in dataset.samples]
    hashes = [s.content_hash() for s in dataset.samples]

    misses: list[int] = []
    for i in range(n):
        path = _cache_path(cache_dir, cache_key(descriptor.model_id, profile.name, hashes[i]))
        if path.exists():
            rows[i] = _read_cache_entry(
                path, descriptor.model_id, profile.name, hashes[i], descriptor.dimension
            )
            stats.cache_hits += 1
        else:
            misses.append(i)
            stats.cache_misses += 1

    batches = [misses[lo : lo + batch_size] for lo in range(0, len(misses), batch_size)]

    def run_batch(batch: list[int]) -> list[np.ndarray]:
        raw = backend.embed_batch([texts[i] for i in batch])
        out = []
        for i, value in zip(batch, raw):
            out.append(_finish_vector(value, descriptor, sample_id=i))
        return out

    if workers > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_batch, batches))
    else:
        results = [run_batch(b) for b in batches]

    done = stats.cache_hits
    for batch, vectors in zip(batches, results):
        for i, vec in zip(batch, vectors):
            rows[i] = vec
            _write_cache_entry(
                _cache_path(cache_dir, cache_key(descriptor.model_id, profile.name, hashes[i])),
                descriptor.model_id,
                profile.name,
                hashes[i],
                vec,
            )
            done += 1
            if progress is not None and done % 1000 == 0:
                progress(done, n)

    matrix = EmbeddingMatrix(
        vectors=np.vstack([r[None, :] for r in rows]) if n else np.zeros((0, 0), np.float32),
        backend=descriptor,
        dataset_hash=dataset.content_hash,
    )
    stats.backend_calls = getattr(backend, "calls", 0)
    return matrix, stats


def _finish_vector(
    value: np.ndarray | TokenEmbeddingSequence,
    descriptor: EmbeddingBackendDescriptor,
    sample_id: int,
) -> np.ndarray:
    if descriptor.pooling == "token-mean":
        if not isinstance(value, TokenEmbeddingSequence):
            raise MalformedResponseError(
                f"sample {sample_id}: token-mean pooling needs per-token vectors, "
                "but the backend returned a pooled vector"
            )
        vec = mean_pool(value).components
    else:
        if isinstance(value, TokenEmbeddingSequence):
            raise MalformedResponseError(
                f"sample {sample_id}: backend-pooled mode got per-token vectors"
            )
        vec = value
    if vec.shape != (descriptor.dimension,):
        raise DimensionMismatchError(
            f"sample {sample_id}: got dimension {vec.shape}, expected ({descriptor.dimension},)"
        )
    if not np.all(np.isfinite(vec)):
        raise MalformedResponseError(f"sample {sample_id}: non-finite embedding components")
    return np.asarray(vec, dtype=np.float32)


def make_embedding_backend(
    kind: str,
    model_id: str,
    dimension: int,
    pooling: str,
    base_url: str | None = None,
    *,
    timeout: float = 60.0,
    retries: int = 2,
):
    """Build a backend client from plain config values."""
    from .errors import ConfigError

    if pooling not in POOLING_MODES:
        raise ConfigError(f"unknown pooling mode {pooling!r}")
    if kind == "builtin-hash":
        if dimension != BUILTIN_HASH_DIMENSION:
            raise ConfigError(
                f"builtin-hash embeddings are fixed at d={BUILTIN_HASH_DIMENSION}, got {dimension}"
            )
        if pooling != "backend-pooled":
            raise ConfigError("builtin-hash embeddings are always backend-pooled")
        return BuiltinHashBackend(model_id=model_id)
    if kind == "remote":
        if not base_url:
            raise ConfigError("remote embeddings need a base_url")
        descriptor = EmbeddingBackendDescriptor(
            kind="remote", model_id=model_id, dimension=dimension, pooling=pooling
        )
        return RemoteEmbeddingBackend(descriptor, base_url, timeout=timeout, retries=retries)
    raise ConfigError(f"unknown embedding backend kind {kind!r}")
