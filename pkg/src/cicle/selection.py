"""Few-shot example selection: random, sparse-similarity, dense-similarity.

All three strategies pick up to k shots per class, per query, and preserve
the caller's class order exactly: the conformal pipeline passes classes in
descending base-probability order, the plain few-shot baselines pass label
order. The query item itself (matched by id) is never selected.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .corpus import LabeledText
from .vectorize import SparseVector, cosine

log = logging.getLogger(__name__)

STRATEGIES = ("random", "sparse", "dense")


@dataclass
class SelectionConfig:
    k: int = 2
    strategy: str = "random"
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")


@dataclass
class ShotSet:
    """Per-class shot lists, in the caller's class order."""

    per_class: list[tuple[str, list[LabeledText]]]

    def classes(self) -> list[str]:
        return [c for c, _ in self.per_class]

    def shot_count(self) -> int:
        return sum(len(items) for _, items in self.per_class)

    def last_shot_label(self) -> str | None:
        for cls, items in reversed(self.per_class):
            if items:
                return cls
        return None


def _pool_by_class(pool: Sequence[LabeledText], exclude_id: str | None):
    grouped: dict[str, list[int]] = {}
    for i, item in enumerate(pool):
        if exclude_id is not None and item.id == exclude_id:
            continue
        grouped.setdefault(item.label, []).append(i)
    return grouped


def _warn_short(cls: str, available: int, k: int) -> None:
    if available == 0:
        log.warning("class %r has no pool items; selecting zero shots", cls)
    elif available < k:
        log.warning("class %r has only %d pool items for k=%d; taking all", cls, available, k)


def select_random(pool: Sequence[LabeledText], classes: Sequence[str],
                  cfg: SelectionConfig, exclude_id: str | None = None) -> ShotSet:
    """Uniform without-replacement sample of min(k, available) shots per class."""
    grouped = _pool_by_class(pool, exclude_id)
    rng = random.Random(cfg.seed)
    per_class: list[tuple[str, list[LabeledText]]] = []
    for cls in classes:
        idxs = grouped.get(cls, [])
        _warn_short(cls, len(idxs), cfg.k)
        chosen = rng.sample(idxs, min(cfg.k, len(idxs)))
        per_class.append((cls, [pool[i] for i in chosen]))
    return ShotSet(per_class=per_class)


def _sparse_similarities(pool_vectors, query_vector: SparseVector) -> np.ndarray:
    if sp.issparse(pool_vectors):
        m = pool_vectors.tocsr()
        if m.shape[1] != query_vector.dim:
            raise ValueError(f"dimension mismatch: {m.shape[1]} != {query_vector.dim}")
        dots = np.asarray(m @ query_vector.to_dense()).ravel()
        row_norms = np.sqrt(np.asarray(m.multiply(m).sum(axis=1)).ravel())
        qn = query_vector.norm()
        with np.errstate(invalid="ignore", divide="ignore"):
            sims = np.where((row_norms > 0) & (qn > 0), dots / (row_norms * qn), 0.0)
        return sims
    return np.array([cosine(v, query_vector) for v in pool_vectors])


def _dense_similarities(pool_embeddings, query_embedding) -> np.ndarray:
    q = np.asarray(query_embedding, dtype=float)
    m = np.asarray(pool_embeddings, dtype=float)
    if m.ndim != 2 or m.shape[1] != q.shape[0]:
        raise ValueError(f"dimension mismatch: pool {m.shape} vs query {q.shape}")
    row_norms = np.linalg.norm(m, axis=1)
    qn = np.linalg.norm(q)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where((row_norms > 0) & (qn > 0), (m @ q) / (row_norms * qn), 0.0)


def _top_k_per_class(pool: Sequence[LabeledText], sims: np.ndarray, classes: Sequence[str],
                     cfg: SelectionConfig, exclude_id: str | None) -> ShotSet:
    if len(sims) != len(pool):
        raise ValueError(f"{len(sims)} similarities for {len(pool)} pool items")
    grouped = _pool_by_class(pool, exclude_id)
    per_class: list[tuple[str, list[LabeledText]]] = []
    for cls in classes:
        idxs = grouped.get(cls, [])
        _warn_short(cls, len(idxs), cfg.k)
        # descending similarity; ties fall back to pool order
        ranked = sorted(idxs, key=lambda i: (-sims[i], i))[: cfg.k]
        per_class.append((cls, [pool[i] for i in ranked]))
    return ShotSet(per_class=per_class)


def select_sparse(pool: Sequence[LabeledText], pool_vectors, query_vector: SparseVector,
                  classes: Sequence[str], cfg: SelectionConfig,
                  exclude_id: str | None = None) -> ShotSet:
    """Per class, the k pool items most cosine-similar to the query (tf-idf space).

    ``pool_vectors`` is either a list of SparseVector or a prebuilt CSR matrix
    with one row per pool item, under the same fitted tf-idf model as the query.
    """
    sims = _sparse_similarities(pool_vectors, query_vector)
    return _top_k_per_class(pool, sims, classes, cfg, exclude_id)


def select_dense(pool: Sequence[LabeledText], pool_embeddings, query_embedding,
                 classes: Sequence[str], cfg: SelectionConfig,
                 exclude_id: str | None = None) -> ShotSet:
    """As select_sparse, over dense embedding vectors."""
    sims = _dense_similarities(pool_embeddings, query_embedding)
    return _top_k_per_class(pool, sims, classes, cfg, exclude_id)
