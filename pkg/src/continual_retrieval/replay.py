"""Budgeted exemplar buffer and the cross-session class centroid store.

Two distinct replay mechanisms: raw inputs kept under a shared budget, and
per-class embedding centroids aggregated from the frozen per-session gallery
means. Centroid contributions are immutable once recorded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .sessions import DataItem

CENTROID_MODES = ("contributing", "all_sessions")


@dataclass(frozen=True, eq=False)
class BufferEntry:
    item: DataItem
    session: int
    dist_to_mean: float

    @property
    def class_id(self) -> int:
        return self.item.class_id


class ReplayBuffer:
    """Exemplar store with a fixed total budget shared by all sessions."""

    def __init__(self, budget: int, seed: int = 0):
        if budget < 0:
            raise ContractError("budget must be >= 0")
        self.budget = int(budget)
        self.seed = int(seed)
        self.entries: list[BufferEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def classes(self) -> set[int]:
        return {e.class_id for e in self.entries}

    def items(self) -> list[DataItem]:
        return [e.item for e in self.entries]


def mine_exemplars(state, items, per_class_quota: int, rng: np.random.Generator,
                   session: int, candidate_factor: int = 2) -> list[BufferEntry]:
    """Pick exemplars near each class mean in the current embedding space.

    Per class: rank items by squared distance to the class's embedding mean,
    then sample `per_class_quota` uniformly from the `candidate_factor * quota`
    nearest. A quota at or above the class size keeps the whole class.
    """
    if per_class_quota < 0:
        raise ContractError("quota must be >= 0")
    if per_class_quota == 0 or not items:
        return []
    by_class: dict[int, list[DataItem]] = {}
    for item in items:
        by_class.setdefault(item.class_id, []).append(item)

    picked: list[BufferEntry] = []
    for class_id in sorted(by_class):
        members = by_class[class_id]
        embs = state.embed_many(np.stack([m.features for m in members]))
        mean = embs.mean(axis=0)
        dists = ((embs - mean) ** 2).sum(axis=1)
        order = np.argsort(dists, kind="stable")
        if per_class_quota >= len(members):
            chosen = order
        else:
            pool = order[: min(candidate_factor * per_class_quota, len(members))]
            chosen = rng.choice(pool, size=per_class_quota, replace=False)
        for idx in chosen:
            picked.append(BufferEntry(members[idx], session, float(dists[idx])))
    return picked


def rebalance(buffer: ReplayBuffer, new_exemplars: list[BufferEntry],
              classes_known: int) -> None:
    """Re-split the budget evenly over all known classes.

    Every class (existing or incoming) keeps at most floor(budget / classes)
    entries, preferring the smallest distance-to-mean.
    """
    if classes_known <= 0:
        raise ContractError("classes_known must be >= 1")
    quota = buffer.budget // classes_known
    merged: dict[int, list[BufferEntry]] = {}
    for entry in list(buffer.entries) + list(new_exemplars):
        merged.setdefault(entry.class_id, []).append(entry)
    kept: list[BufferEntry] = []
    for class_id in sorted(merged):
        group = sorted(merged[class_id],
                       key=lambda e: (e.dist_to_mean, e.session, e.item.item_id))
        kept.extend(group[:quota])
    buffer.entries = kept


class CentroidStore:
    """Per-class embedding centroids, auditable as means of per-session means.

    `mode` picks the aggregation divisor: "contributing" averages only the
    sessions where the class appeared; "all_sessions" divides by the number of
    recorded sessions (which shrinks centroids of intermittent classes).
    """

    def __init__(self, mode: str = "contributing"):
        if mode not in CENTROID_MODES:
            raise ContractError(f"unknown centroid mode {mode!r}")
        self.mode = mode
        self._per_class: dict[int, list[tuple[int, np.ndarray, int]]] = {}
        self._sessions: set[int] = set()

    def update(self, session: int, embeddings_by_class: dict[int, np.ndarray]) -> None:
        """Record one per-session mean per class from that session's frozen embeddings."""
        if session in self._sessions:
            raise ContractError(f"session {session} already contributed to the centroids")
        for class_id in sorted(embeddings_by_class):
            embs = np.asarray(embeddings_by_class[class_id], dtype=np.float64)
            if embs.size == 0:
                raise ContractError(f"class {class_id} has no embeddings in session {session}")
            mean = embs.mean(axis=0)
            mean.flags.writeable = False
            self._per_class.setdefault(class_id, []).append((session, mean, embs.shape[0]))
        self._sessions.add(session)

    def has(self, class_id: int) -> bool:
        return class_id in self._per_class

    def classes(self) -> set[int]:
        return set(self._per_class)

    def sessions_recorded(self) -> set[int]:
        return set(self._sessions)

    def contributions(self, class_id: int) -> list[tuple[int, np.ndarray, int]]:
        if class_id not in self._per_class:
            raise ContractError(f"no centroid recorded for class {class_id}")
        return list(self._per_class[class_id])

    def centroid(self, class_id: int) -> np.ndarray:
        contribs = self.contributions(class_id)
        stacked = np.stack([mean for _, mean, _ in contribs])
        if self.mode == "contributing":
            return stacked.mean(axis=0)
        return stacked.sum(axis=0) / len(self._sessions)


def buffer_to_payload(buffer: ReplayBuffer) -> dict:
    return {
        "budget": buffer.budget,
        "seed": buffer.seed,
        "entries": [
            {
                "item_id": e.item.item_id,
                "class_id": e.item.class_id,
                "features": e.item.features.tolist(),
                "session": e.session,
                "dist_to_mean": e.dist_to_mean,
            }
            for e in buffer.entries
        ],
    }


def buffer_from_payload(payload: dict) -> ReplayBuffer:
    buffer = ReplayBuffer(payload["budget"], payload.get("seed", 0))
    for rec in payload["entries"]:
        item = DataItem(int(rec["item_id"]),
                        np.asarray(rec["features"], dtype=np.float64),
                        int(rec["class_id"]))
        buffer.entries.append(BufferEntry(item, int(rec["session"]), float(rec["dist_to_mean"])))
    return buffer


def centroids_to_payload(store: CentroidStore) -> dict:
    return {
        "mode": store.mode,
        "sessions": sorted(store.sessions_recorded()),
        "classes": {
            str(class_id): [
                {"session": s, "mean": mean.tolist(), "count": count}
                for s, mean, count in contribs
            ]
            for class_id, contribs in store._per_class.items()
        },
    }


def centroids_from_payload(payload: dict) -> CentroidStore:
    store = CentroidStore(payload["mode"])
    store._sessions = set(int(s) for s in payload["sessions"])
    for class_key, contribs in payload["classes"].items():
        rebuilt = []
        for rec in contribs:
            mean = np.asarray(rec["mean"], dtype=np.float64)
            mean.flags.writeable = False
            rebuilt.append((int(rec["session"]), mean, int(rec["count"])))
        store._per_class[int(class_key)] = rebuilt
    return store
