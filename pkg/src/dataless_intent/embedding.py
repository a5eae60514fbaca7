"""Sentence embedding providers, the on-disk vector cache and cosine scoring.

Providers expose ``model_id``, ``dim`` (``None`` until known) and
``embed(texts) -> ndarray of shape (len(texts), dim)``.  Vectors are kept
un-normalized; scaling is left to the cosine.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import (
    CacheCorruptionError,
    InvalidInputError,
    MalformedRecordError,
    MissingEmbeddingError,
    ProviderError,
    TransportError,
)

__all__ = [
    "cosine",
    "cosine_matrix",
    "l2_norm",
    "text_digest",
    "HashingEmbedder",
    "test_embedder",
    "EmbeddingCache",
    "CacheOnlyProvider",
    "HTTPEmbedder",
    "embed_all",
]

logger = logging.getLogger(__name__)


def l2_norm(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    return float(np.sqrt(np.sum(v * v)))


def _as_vector(v, name):
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be a 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def cosine(u, v) -> float:
    """Cosine similarity ``u.v / (|u| |v|)``.

    Raises on dimension mismatch or an all-zero vector rather than
    returning a made-up score.
    """
    u = _as_vector(u, "u")
    v = _as_vector(v, "v")
    if u.shape != v.shape:
        raise InvalidInputError(f"dimension mismatch: {u.shape[0]} != {v.shape[0]}")
    nu, nv = l2_norm(u), l2_norm(v)
    if nu == 0.0 or nv == 0.0:
        raise InvalidInputError("cosine of a zero-norm vector is undefined")
    return float(np.dot(u, v) / (nu * nv))


def cosine_matrix(queries, keys) -> np.ndarray:
    """Pairwise cosines, shape ``(n_queries, n_keys)``.

    Uses the same arithmetic as :func:`cosine` so both paths agree bitwise
    on integer-valued vectors.
    """
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    K = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    if Q.shape[1] != K.shape[1]:
        raise InvalidInputError(f"dimension mismatch: {Q.shape[1]} != {K.shape[1]}")
    qn = np.sqrt(np.sum(Q * Q, axis=1))
    kn = np.sqrt(np.sum(K * K, axis=1))
    if np.any(qn == 0.0) or np.any(kn == 0.0):
        raise InvalidInputError("cosine of a zero-norm vector is undefined")
    return (Q @ K.T) / (qn[:, None] * kn[None, :])


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


_TOKEN = re.compile(r"[a-z0-9]+")


class HashingEmbedder:
    """Deterministic signed feature-hashing bag-of-words embedder.

    Each lowercase alphanumeric token is hashed (seeded BLAKE2b) to an
    index and a +/-1 sign; contributions are summed.  The output is not
    normalized and only depends on ``(text, dim, seed)``, which makes it a
    stand-in encoder for tests and offline runs.
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        if int(dim) < 8:
            raise InvalidInputError("hashing embedder needs dim >= 8")
        self.dim = int(dim)
        self.seed = int(seed)
        self.model_id = f"hashing-bow-d{self.dim}-s{self.seed}"
        self._key = str(self.seed).encode("utf-8")

    def _slot(self, token: str):
        h = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=self._key).digest()
        n = int.from_bytes(h, "little")
        return (n >> 1) % self.dim, 1.0 if n & 1 else -1.0

    def embed_one(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for tok in _TOKEN.findall(text.lower()):
            idx, sign = self._slot(tok)
            vec[idx] += sign
        return vec

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.vstack([self.embed_one(t) for t in texts])

    def __repr__(self):
        return f"HashingEmbedder(dim={self.dim}, seed={self.seed})"


def test_embedder(dim: int = 256, seed: int = 0) -> HashingEmbedder:
    return HashingEmbedder(dim=dim, seed=seed)


# keep pytest from collecting the factory above as a test
test_embedder.__test__ = False


class EmbeddingCache:
    """Vector store keyed by ``(model_id, sha256(text))``.

    Backed by an optional JSONL file which is loaded eagerly and appended
    to as new vectors arrive.  Reads are lock-free; writes go through a lock.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._vectors: dict[tuple[str, str], np.ndarray] = {}
        self._dims: dict[str, int] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self):
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    model, digest, dim = rec["model"], rec["sha256"], int(rec["dim"])
                    vec = np.asarray(rec["vector"], dtype=np.float64)
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise MalformedRecordError(f"bad cache record ({exc})", self.path, lineno) from None
                if vec.shape != (dim,):
                    raise CacheCorruptionError(
                        f"{self.path}:line {lineno}: vector length {vec.size} != dim {dim}"
                    )
                self._check_dim(model, dim)
                self._vectors[(model, digest)] = vec

    def _check_dim(self, model_id, dim):
        known = self._dims.setdefault(model_id, dim)
        if known != dim:
            raise CacheCorruptionError(
                f"cache holds {known}-d vectors for model {model_id!r}, got {dim}-d"
            )

    def dim_for(self, model_id: str):
        return self._dims.get(model_id)

    def get(self, model_id: str, text: str):
        return self._vectors.get((model_id, text_digest(text)))

    def __contains__(self, key):
        model_id, text = key
        return (model_id, text_digest(text)) in self._vectors

    def __len__(self):
        return len(self._vectors)

    def put_many(self, model_id: str, texts: Sequence[str], vectors) -> None:
        vectors = np.asarray(vectors, dtype=np.float64)
        with self._lock:
            lines = []
            for text, vec in zip(texts, vectors):
                if not np.all(np.isfinite(vec)):
                    raise ProviderError(f"provider returned non-finite values for {text!r}")
                self._check_dim(model_id, vec.shape[0])
                key = (model_id, text_digest(text))
                if key in self._vectors:
                    continue
                self._vectors[key] = vec.copy()
                lines.append(
                    json.dumps(
                        {"model": model_id, "sha256": key[1], "dim": int(vec.shape[0]),
                         "vector": [float(x) for x in vec]}
                    )
                )
            if self.path is not None and lines:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write("\n".join(lines) + "\n")


class CacheOnlyProvider:
    """Offline provider: every lookup must already be in the cache."""

    def __init__(self, model_id: str, dim: int | None = None):
        self.model_id = model_id
        self.dim = dim

    def embed(self, texts):
        raise MissingEmbeddingError(
            f"{len(texts)} text(s) missing from the embedding cache for model "
            f"{self.model_id!r}, e.g. {texts[0]!r}"
        )


class HTTPEmbedder:
    """Client for an OpenAI-style ``POST {base_url}/embeddings`` endpoint.

    Retries transport errors, 429 and 5xx responses with exponential backoff.
    The bearer token is read from the environment variable named by
    ``api_key_env`` (if any).
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        api_key_env: str | None = None,
        timeout: float = 30.0,
        batch_size: int = 64,
        max_retries: int = 3,
        backoff: float = 0.5,
        dim: int | None = None,
        transport=None,
    ):
        import httpx

        self.base_url = base_url.rstrip("/")
        self.model_id = model
        self.dim = dim
        self.batch_size = int(batch_size)
        self.max_retries = int(max_retries)
        self.backoff = float(backoff)
        headers = {"Content-Type": "application/json"}
        if api_key_env:
            token = os.environ.get(api_key_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
            else:
                logger.warning("environment variable %s is not set; sending no token", api_key_env)
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self._httpx = httpx

    def _post(self, payload):
        httpx = self._httpx
        last = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(f"{self.base_url}/embeddings", json=payload)
            except httpx.TransportError as exc:
                last = exc
                logger.warning("embedding request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                logger.warning("embedding request got %s (attempt %d)", last, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise ProviderError(f"embedding endpoint returned HTTP {resp.status_code}: {resp.text[:200]}")
            return resp.json()
        raise TransportError(f"embedding request failed after {self.max_retries + 1} attempts: {last}")

    def _embed_batch(self, texts):
        body = self._post({"model": self.model_id, "input": list(texts)})
        try:
            items = sorted(body["data"], key=lambda d: d["index"])
            vecs = np.asarray([d["embedding"] for d in items], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderError(f"malformed embedding response: {exc}") from None
        if vecs.shape[0] != len(texts) or vecs.ndim != 2:
            raise ProviderError(f"expected {len(texts)} embeddings, got shape {vecs.shape}")
        if self.dim is None:
            self.dim = vecs.shape[1]
        elif vecs.shape[1] != self.dim:
            raise ProviderError(f"endpoint returned {vecs.shape[1]}-d vectors, expected {self.dim}")
        return vecs

    def embed(self, texts):
        texts = list(texts)
        parts = [
            self._embed_batch(texts[i : i + self.batch_size])
            for i in range(0, len(texts), self.batch_size)
        ]
        return np.vstack(parts) if parts else np.zeros((0, self.dim or 0))

    def close(self):
        self._client.close()


def embed_all(provider, texts: Iterable[str], cache: EmbeddingCache | None = None,
              batch_size: int = 64) -> np.ndarray:
    """Embed ``texts`` in order, consulting ``cache`` first.

    Only cache misses (deduplicated) reach the provider, in batches of
    ``batch_size``; fetched vectors are written back to the cache.
    """
    texts = list(texts)
    for t in texts:
        if not isinstance(t, str) or not t:
            raise InvalidInputError("cannot embed an empty or non-string text")
    if not texts:
        raise InvalidInputError("embed_all needs at least one text")
    if cache is None:
        cache = EmbeddingCache()
    model_id = provider.model_id
    cached_dim = cache.dim_for(model_id)
    pdim = getattr(provider, "dim", None)
    if cached_dim is not None and pdim is not None and cached_dim != pdim:
        raise CacheCorruptionError(
            f"cache holds {cached_dim}-d vectors for {model_id!r} but the provider reports {pdim}"
        )

    misses = list(dict.fromkeys(t for t in texts if (model_id, t) not in cache))
    for i in range(0, len(misses), batch_size):
        batch = misses[i : i + batch_size]
        vecs = np.asarray(provider.embed(batch), dtype=np.float64)
        if vecs.ndim != 2 or vecs.shape[0] != len(batch):
            raise ProviderError(f"provider returned shape {vecs.shape} for {len(batch)} texts")
        cache.put_many(model_id, batch, vecs)
    return np.vstack([cache.get(model_id, t) for t in texts])


def lookup_table(provider, texts: Iterable[str], cache: EmbeddingCache | None = None,
                 batch_size: int = 64) -> Mapping[str, np.ndarray]:
    """Embed unique texts once and return a ``text -> vector`` mapping."""
    unique = list(dict.fromkeys(texts))
    if not unique:
        return {}
    vecs = embed_all(provider, unique, cache, batch_size)
    return dict(zip(unique, vecs))


def mean_self_similarity(a, b) -> float:
    """Mean row-wise cosine between two aligned embedding stacks."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    return float(np.mean([cosine(x, y) for x, y in zip(a, b)]))
