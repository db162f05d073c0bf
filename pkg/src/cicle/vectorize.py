"""Sparse TF-IDF vectors, cosine similarity, and the dense-embedding client.

The TF-IDF recipe is pinned for reproducibility: lowercase text, tokens are
maximal runs of two or more word characters, idf(t) = ln((1+N)/(1+df(t))) + 1,
term values are raw count times idf, rows l2-normalized. Dense vectors are
always fetched from an external embedding service, never computed locally.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests
import scipy.sparse as sp

from .errors import DataError, TransportError

log = logging.getLogger(__name__)

TOKEN_PATTERN = r"\w{2,}"
_TOKEN_RE = re.compile(TOKEN_PATTERN)


def tokenize(text: str) -> list[str]:
    """Lowercase and split into maximal runs of >= 2 word characters."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class SparseVector:
    """An l2-normalized sparse document vector (indices strictly increasing)."""

    indices: np.ndarray
    values: np.ndarray
    dim: int

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.values, self.values)))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out


@dataclass
class TfidfModel:
    """Fitted vocabulary and idf weights; immutable after fit."""

    vocabulary: dict[str, int]
    idf: np.ndarray
    token_pattern: str = TOKEN_PATTERN

    @property
    def dim(self) -> int:
        return len(self.vocabulary)


def fit_tfidf(corpus: list[str]) -> TfidfModel:
    """Fit vocabulary and smoothed idf weights on a training corpus.

    idf(t) = ln((1+N)/(1+df(t))) + 1 with N the corpus size and df the
    document frequency, so idf >= 1 for every token. Vocabulary indices are
    assigned in sorted token order.
    """
    if not corpus:
        raise ValueError("cannot fit TF-IDF on an empty corpus")
    df: Counter[str] = Counter()
    for text in corpus:
        df.update(set(tokenize(text)))
    if not df:
        raise ValueError("empty vocabulary: no token of >= 2 word characters in the corpus")
    vocabulary = {tok: i for i, tok in enumerate(sorted(df))}
    n_docs = len(corpus)
    idf = np.empty(len(vocabulary))
    for tok, i in vocabulary.items():
        idf[i] = np.log((1.0 + n_docs) / (1.0 + df[tok])) + 1.0
    return TfidfModel(vocabulary=vocabulary, idf=idf)


def transform(model: TfidfModel, text: str) -> SparseVector:
    """Map text to a unit-norm tf-idf vector; out-of-vocabulary tokens drop out."""
    counts: Counter[int] = Counter()
    vocab = model.vocabulary
    for tok in tokenize(text):
        col = vocab.get(tok)
        if col is not None:
            counts[col] += 1
    if not counts:
        return SparseVector(indices=np.empty(0, dtype=np.int32),
                            values=np.empty(0), dim=model.dim)
    indices = np.array(sorted(counts), dtype=np.int32)
    values = np.array([counts[i] for i in indices], dtype=float) * model.idf[indices]
    values /= np.sqrt(np.dot(values, values))
    return SparseVector(indices=indices, values=values, dim=model.dim)


def transform_many(model: TfidfModel, texts: list[str]) -> list[SparseVector]:
    return [transform(model, t) for t in texts]


def stack(vectors: list[SparseVector]) -> sp.csr_matrix:
    """Stack sparse vectors into a CSR matrix (one row per vector)."""
    if not vectors:
        raise ValueError("cannot stack zero vectors")
    dim = vectors[0].dim
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    for i, v in enumerate(vectors):
        if v.dim != dim:
            raise ValueError(f"dimension mismatch: {v.dim} != {dim}")
        indptr[i + 1] = indptr[i] + v.nnz
    indices = np.concatenate([v.indices for v in vectors]) if indptr[-1] else np.empty(0, dtype=np.int32)
    data = np.concatenate([v.values for v in vectors]) if indptr[-1] else np.empty(0)
    return sp.csr_matrix((data, indices, indptr), shape=(len(vectors), dim))


def cosine(a, b) -> float:
    """Cosine similarity; 0.0 when either vector has zero norm."""
    if isinstance(a, SparseVector) and isinstance(b, SparseVector):
        if a.dim != b.dim:
            raise ValueError(f"dimension mismatch: {a.dim} != {b.dim}")
        _, ia, ib = np.intersect1d(a.indices, b.indices, assume_unique=True, return_indices=True)
        dot = float(np.dot(a.values[ia], b.values[ib]))
        na, nb = a.norm(), b.norm()
    elif isinstance(a, SparseVector) or isinstance(b, SparseVector):
        raise TypeError("cannot mix sparse and dense vectors in cosine()")
    else:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if a.shape != b.shape:
            raise ValueError(f"dimension mismatch: {a.shape} != {b.shape}")
        dot = float(np.dot(a, b))
        na = float(np.linalg.norm(a))
        nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def vocabulary_hash(model: TfidfModel) -> str:
    """Content hash of the fitted vocabulary and idf weights."""
    payload = json.dumps(
        [[tok, int(col), repr(float(model.idf[col]))] for tok, col in sorted(model.vocabulary.items())],
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class EmbeddingConfig:
    """Connection settings for the external dense-embedding service."""

    endpoint: str
    cache_dir: str | None = None
    batch_size: int = 64
    timeout: float = 30.0
    max_retries: int = 2
    backoff: float = 0.5


class EmbeddingClient:
    """HTTP client for a dense sentence-embedding service with a disk cache.

    Wire format: POST {"texts": [...]} -> {"vectors": [[...], ...], "dim": d}.
    Results are cached per (endpoint, text hash); cache writes go through an
    atomic rename so concurrent writers of the same key cannot interleave.
    """

    def __init__(self, config: EmbeddingConfig):
        self.config = config
        self._dim: int | None = None
        if config.cache_dir:
            Path(config.cache_dir).mkdir(parents=True, exist_ok=True)

    @property
    def dim(self) -> int | None:
        return self._dim

    def _cache_path(self, text: str) -> Path | None:
        if not self.config.cache_dir:
            return None
        key = hashlib.sha256(f"{self.config.endpoint}\n{text}".encode("utf-8")).hexdigest()
        return Path(self.config.cache_dir) / f"{key}.npy"

    def _cache_get(self, text: str) -> np.ndarray | None:
        path = self._cache_path(text)
        if path is None or not path.exists():
            return None
        return np.load(path)

    def _cache_put(self, text: str, vector: np.ndarray) -> None:
        path = self._cache_path(text)
        if path is None:
            return
        tmp = path.with_name(f"{path.stem}.{os.getpid()}.tmp.npy")
        np.save(tmp, vector)
        os.replace(tmp, path)

    def _post_batch(self, batch: list[str]) -> list[np.ndarray]:
        cfg = self.config
        last_exc: Exception | None = None
        for attempt in range(1, cfg.max_retries + 2):
            try:
                resp = requests.post(cfg.endpoint, json={"texts": batch}, timeout=cfg.timeout)
            except requests.RequestException as exc:
                last_exc = exc
            else:
                if resp.status_code >= 500:
                    last_exc = TransportError(f"embedding service returned {resp.status_code}")
                else:
                    if resp.status_code != 200:
                        raise TransportError(
                            f"embedding service returned {resp.status_code}", attempts=attempt)
                    body = resp.json()
                    vectors = body.get("vectors")
                    if vectors is None or len(vectors) != len(batch):
                        raise DataError(
                            f"embedding service returned {0 if vectors is None else len(vectors)} "
                            f"vectors for {len(batch)} texts")
                    out = [np.asarray(v, dtype=float) for v in vectors]
                    for v in out:
                        if v.ndim != 1 or not np.all(np.isfinite(v)):
                            raise DataError("embedding service returned a non-finite or non-1d vector")
                        if self._dim is None:
                            self._dim = len(v)
                        elif len(v) != self._dim:
                            raise DataError(
                                f"embedding dimension drift: got {len(v)}, expected {self._dim}")
                    return out
            if attempt <= cfg.max_retries:
                delay = cfg.backoff * (2 ** (attempt - 1))
                log.warning("embedding request failed (attempt %d/%d), retrying in %.2fs: %s",
                            attempt, cfg.max_retries + 1, delay, last_exc)
                time.sleep(delay)
        raise TransportError(f"embedding service unreachable after {cfg.max_retries + 1} attempts: "
                             f"{last_exc}", attempts=cfg.max_retries + 1)

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        """Embed texts in order; duplicates and cached entries cost no remote calls."""
        if not texts:
            return []
        resolved: dict[str, np.ndarray] = {}
        missing: list[str] = []
        seen: set[str] = set()
        for text in texts:
            if text in seen:
                continue
            seen.add(text)
            cached = self._cache_get(text)
            if cached is not None:
                if self._dim is None:
                    self._dim = len(cached)
                elif len(cached) != self._dim:
                    raise DataError(
                        f"embedding dimension drift in cache: got {len(cached)}, expected {self._dim}")
                resolved[text] = cached
            else:
                missing.append(text)
        for start in range(0, len(missing), self.config.batch_size):
            batch = missing[start:start + self.config.batch_size]
            for text, vector in zip(batch, self._post_batch(batch)):
                self._cache_put(text, vector)
                resolved[text] = vector
        return [resolved[t] for t in texts]


def embed_dense(client: EmbeddingClient, texts: list[str]) -> list[np.ndarray]:
    """Fetch dense vectors, one per input text, order preserved."""
    return client.embed(texts)
