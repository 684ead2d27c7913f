"""Append-only gallery of frozen embeddings and the retrieval metrics.

Embeddings enter the gallery once, tagged with the session that produced
them, and are never re-extracted. Search is exact brute force over cosine
similarity; ties break by insertion order.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .model import BoundModel, ModelState


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    item_id: int
    class_id: int
    session: int
    embedding: np.ndarray


def _record_bytes(record: EmbeddingRecord) -> bytes:
    return (struct.pack("<QII", record.item_id, record.class_id, record.session)
            + record.embedding.tobytes())


class GallerySet:
    """Ordered embedding records with a content hash per session block."""

    def __init__(self):
        self.records: list[EmbeddingRecord] = []
        self._block_hashes: dict[int, str] = {}
        self._ids: set[int] = set()
        self._matrix: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.records)

    def sessions(self) -> list[int]:
        return sorted(self._block_hashes)

    def append_block(self, session: int, records: list[EmbeddingRecord]) -> None:
        if session in self._block_hashes:
            raise ContractError(f"session {session} was already appended to the gallery")
        digest = hashlib.sha256()
        for record in records:
            if record.item_id in self._ids:
                raise ContractError(f"item {record.item_id} is already in the gallery")
            digest.update(_record_bytes(record))
        for record in records:
            record.embedding.flags.writeable = False
            self._ids.add(record.item_id)
            self.records.append(record)
        self._block_hashes[session] = digest.hexdigest()
        self._matrix = None

    def block_hash(self, session: int) -> str:
        if session not in self._block_hashes:
            raise ContractError(f"no gallery block for session {session}")
        return self._block_hashes[session]

    def recompute_block_hash(self, session: int) -> str:
        digest = hashlib.sha256()
        for record in self.records:
            if record.session == session:
                digest.update(_record_bytes(record))
        return digest.hexdigest()

    def verify_block_hashes(self) -> bool:
        return all(self.recompute_block_hash(s) == h for s, h in self._block_hashes.items())

    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.stack([r.embedding for r in self.records])
        return self._matrix

    def through_session(self, session: int) -> "GallerySet":
        """Read-only style prefix view: records from blocks <= session."""
        view = GallerySet()
        for s in self.sessions():
            if s <= session:
                view.append_block(s, [r for r in self.records if r.session == s])
        return view


def extract_and_append(gallery: GallerySet, state: ModelState, items, session: int) -> None:
    """Embed a finished session's training items and freeze them into the gallery."""
    records = []
    if items:
        embs = state.embed_many(np.stack([item.features for item in items]))
        records = [EmbeddingRecord(item.item_id, item.class_id, session, embs[i].copy())
                   for i, item in enumerate(items)]
    gallery.append_block(session, records)


def retrieve(gallery: GallerySet, query_embedding: np.ndarray, k: int) -> list[EmbeddingRecord]:
    """Top-k records by descending cosine similarity (ties: insertion order).

    Gallery embeddings are unit norm, so the ranking is invariant to any
    positive rescaling of the query.
    """
    if k < 1:
        raise ContractError("k must be >= 1")
    if not gallery.records:
        raise ContractError("cannot retrieve from an empty gallery")
    sims = gallery.matrix() @ np.asarray(query_embedding, dtype=np.float64)
    order = np.argsort(-sims, kind="stable")[:k]
    return [gallery.records[i] for i in order]


def recall_at_k(gallery: GallerySet, queries, k: int) -> float:
    """Fraction of (embedding, class) queries with a same-class hit in the top k."""
    if not queries:
        raise ContractError("recall needs at least one query")
    hits = 0
    for embedding, class_id in queries:
        if any(r.class_id == class_id for r in retrieve(gallery, embedding, k)):
            hits += 1
    return hits / len(queries)


def recalls_at(gallery: GallerySet, queries, ks) -> dict[int, float]:
    """recall@k for several k sharing one ranking pass per query."""
    if not queries:
        raise ContractError("recall needs at least one query")
    ks = sorted(set(int(k) for k in ks))
    hits = {k: 0 for k in ks}
    for embedding, class_id in queries:
        top = retrieve(gallery, embedding, max(ks))
        for k in ks:
            if any(r.class_id == class_id for r in top[:k]):
                hits[k] += 1
    return {k: hits[k] / len(queries) for k in ks}


def average_recall(per_session_recalls) -> float:
    values = list(per_session_recalls)
    if not values:
        raise ContractError("average_recall needs at least one session value")
    return float(sum(values) / len(values))


def classification_accuracy(state: ModelState, test_items) -> float:
    """Fraction of items whose argmax cosine logit matches the true class."""
    items = list(test_items)
    if not items:
        raise ContractError("accuracy needs at least one item")
    for item in items:
        if item.class_id not in state.class_registry:
            raise ContractError(f"class {item.class_id} is not registered")
    bound = BoundModel(state)
    logits = bound.class_logits(bound.embed(np.stack([i.features for i in items]))).data
    predictions = np.argmax(logits, axis=1)  # first max wins: lowest column index
    correct = sum(1 for i, item in enumerate(items)
                  if state.class_registry[predictions[i]] == item.class_id)
    return correct / len(items)


def gallery_to_payload(gallery: GallerySet) -> dict:
    return {
        "records": [
            {
                "item_id": r.item_id,
                "class_id": r.class_id,
                "session": r.session,
                "embedding": r.embedding.tolist(),
            }
            for r in gallery.records
        ],
        "block_hashes": {str(s): h for s, h in gallery._block_hashes.items()},
    }


def gallery_from_payload(payload: dict) -> GallerySet:
    gallery = GallerySet()
    by_session: dict[int, list[EmbeddingRecord]] = {}
    for rec in payload["records"]:
        record = EmbeddingRecord(int(rec["item_id"]), int(rec["class_id"]),
                                 int(rec["session"]),
                                 np.asarray(rec["embedding"], dtype=np.float64))
        by_session.setdefault(record.session, []).append(record)
    for session in sorted(by_session):
        gallery.append_block(session, by_session[session])
    expected = {int(s): h for s, h in payload["block_hashes"].items()}
    for session, digest in expected.items():
        if gallery.block_hash(session) != digest:
            raise ContractError(f"gallery block {session} hash mismatch after reload")
    return gallery
