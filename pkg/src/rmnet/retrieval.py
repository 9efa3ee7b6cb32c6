"""Embedding index with exhaustive cosine-similarity search."""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError
from .metrics import TOP, RankedRetrieval


TIE_DECIMALS = 12


class FingerprintMismatch(RuntimeError):
    pass


def fingerprint(state: dict[str, np.ndarray]) -> str:
    """Hash of the parameter set, independent of dict order."""
    h = hashlib.sha256()
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]


@dataclass
class RetrievalIndex:
    ids: list[str]
    labels: np.ndarray
    embeddings: np.ndarray  # (n, L)
    fingerprint: str

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.embeddings = np.asarray(self.embeddings)
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.ids) or len(self.ids) != len(self.labels):
            raise ContractError("ids, labels and embeddings must align")
        emb = self.embeddings.astype(np.float64)
        norms = np.linalg.norm(emb, axis=1)
        self.zero_norm = norms == 0
        if self.zero_norm.any():
            warnings.warn(f"{int(self.zero_norm.sum())} stored vectors have zero norm; they rank last")
        self._unit = emb / np.where(self.zero_norm, 1.0, norms)[:, None]
        self._id_rank = np.argsort(np.argsort(np.array(self.ids, dtype=object), kind="stable"), kind="stable")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def check(self, model_fingerprint: str) -> None:
        if model_fingerprint != self.fingerprint:
            raise FingerprintMismatch(f"index built by model {self.fingerprint}, queried with {model_fingerprint}")

    def similarities(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ContractError(f"query has shape {q.shape}, index holds {self.dim}-d vectors")
        norm = np.linalg.norm(q)
        if norm == 0:
            warnings.warn("zero-norm query; ranking falls back to item id order")
            sims = np.zeros(len(self))
        else:
            sims = self._unit @ (q / norm)
        return np.where(self.zero_norm, -np.inf, sims)

    def query_topk(self, q: np.ndarray, k: int = TOP) -> np.ndarray:
        """Positions of the ``k`` most similar items: descending cosine, ties by ascending id."""
        if len(self) < k:
            raise ContractError(f"index holds {len(self)} items, fewer than k={k}")
        # cosines equal up to rounding noise count as ties, so the id order decides them
        sims = np.round(self.similarities(q), TIE_DECIMALS)
        order = np.lexsort((self._id_rank, -sims))
        return order[:k]

    def ranked_ids(self, q: np.ndarray, k: int = TOP) -> list[str]:
        return [self.ids[i] for i in self.query_topk(q, k)]

    def search(self, queries: np.ndarray, query_labels, k: int = TOP, num_classes: int | None = None) -> RankedRetrieval:
        retrieved = np.stack([self.labels[self.query_topk(q, k)] for q in np.asarray(queries)])
        return RankedRetrieval(np.asarray(query_labels), retrieved, num_classes)


def embed(model, images, norm, batch: int = 100) -> np.ndarray:
    """Hash-layer activations for every image of a split (eval-mode preprocessing)."""
    from .training import predict

    if model.hash is None:
        raise ContractError("model has a classifier head; embeddings need a hasher head")
    _, emb = predict(model, images, norm, batch)
    return emb


def build_index(model, images, norm, model_fingerprint: str | None = None) -> RetrievalIndex:
    emb = embed(model, images, norm)
    if len(images) < TOP:
        raise ContractError(f"retrieval database needs at least {TOP} items, got {len(images)}")
    fp = model_fingerprint or fingerprint(model.state_dict())
    return RetrievalIndex(list(images.ids), images.labels, emb, fp)


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return (a * b).sum(-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
