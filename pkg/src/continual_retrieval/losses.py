"""The three training loss terms and their weighted combination.

All terms operate on l2-normalized embeddings and are differentiable through
the tape end-to-end. Class centroids enter as constants: perturbing them
changes loss values but never produces a gradient accumulator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ContractError
from .model import BoundModel, Hyperparameters, ModelSnapshot, ModelState
from .replay import CentroidStore


@dataclass
class BatchView:
    """One mini-batch: current-session items plus replayed items.

    Items are (feature vector, class id) pairs; the mini-batch size n counts
    both groups and is the divisor every loss term shares.
    """

    current_items: list[tuple[np.ndarray, int]]
    replayed_items: list[tuple[np.ndarray, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.n < 2:
            raise ContractError(f"mini-batch needs at least 2 items, got {self.n}")

    @property
    def n(self) -> int:
        return len(self.current_items) + len(self.replayed_items)

    def all_items(self) -> list[tuple[np.ndarray, int]]:
        return list(self.current_items) + list(self.replayed_items)

    def features(self) -> np.ndarray:
        return np.stack([np.asarray(x, dtype=np.float64) for x, _ in self.all_items()])

    def labels(self) -> list[int]:
        return [y for _, y in self.all_items()]


@dataclass(frozen=True)
class ClassIndexSets:
    """Old-class index sets: pi = old ∩ current, gamma = all old."""

    pi: frozenset[int]
    gamma: frozenset[int]

    def __post_init__(self):
        if not self.pi <= self.gamma:
            raise ContractError("pi must be a subset of gamma")

    @classmethod
    def from_history(cls, previous_class_sets, current_classes) -> "ClassIndexSets":
        gamma = frozenset().union(*previous_class_sets) if previous_class_sets else frozenset()
        return cls(pi=gamma & frozenset(current_classes), gamma=gamma)


@dataclass
class LossReport:
    l_c: float = 0.0
    l_m: float = 0.0
    l_d_inner: float = 0.0
    l_d_outer: float = 0.0
    l_d: float = 0.0
    total: float = 0.0
    triplet_count: int = 0
    inner_term_count: int = 0
    outer_term_count: int = 0


def loss_intra_discrimination(state: ModelState, batch: BatchView,
                              tape: dc.GradTape | None = None) -> dc.Tensor:
    """Normalized-softmax classification loss over the whole batch.

    (1/n) sum -log softmax(w^T f(x) / T)[y] with unit-norm w columns and f(x).
    """
    bound = BoundModel(state, tape)
    cols = [state.class_column(y) for y in batch.labels()]
    emb = bound.embed(batch.features())
    logits = dc.scale(bound.class_logits(emb), 1.0 / state.hyper.temperature)
    picked = dc.take_entries(dc.log_softmax_rows(logits), cols)
    return dc.scale(dc.sum_all(picked), -1.0 / batch.n)


def mine_hardest_negative(anchor_embedding: np.ndarray,
                          candidate_embeddings: np.ndarray,
                          candidate_classes, anchor_class: int) -> int | None:
    """Index of the different-class candidate nearest to the anchor.

    Distance is the cross-model squared euclidean ||anchor - candidate||^2;
    ties break toward the lowest candidate index. Returns None when every
    candidate shares the anchor's class.
    """
    candidate_embeddings = np.asarray(candidate_embeddings, dtype=np.float64)
    best = None
    best_dist = np.inf
    for i, cls in enumerate(candidate_classes):
        if cls == anchor_class:
            continue
        diff = candidate_embeddings[i] - anchor_embedding
        dist = float(diff @ diff)
        if dist < best_dist:
            best, best_dist = i, dist
    return best


def loss_neighbor_model_coherence(state: ModelState, teacher: ModelSnapshot,
                                  batch: BatchView,
                                  tape: dc.GradTape | None = None,
                                  anchors_include_replayed: bool = True,
                                  negatives_include_replayed: bool = True) -> tuple[dc.Tensor, int]:
    """Teacher/student triplet hinge, one triplet per anchor.

    The positive is the teacher's embedding of the anchor itself, the negative
    is the hardest different-class candidate under the cross-model distance.
    Anchors without any valid negative contribute 0. Returns (loss, number of
    active triplets).
    """
    if teacher is None:
        raise ContractError("model-coherence loss needs a teacher snapshot")
    bound = BoundModel(state, tape)
    items = batch.all_items()
    n_current = len(batch.current_items)
    anchor_idx = [i for i in range(len(items)) if anchors_include_replayed or i < n_current]
    cand_idx = [i for i in range(len(items)) if negatives_include_replayed or i < n_current]

    feats = batch.features()
    student = bound.embed(feats)
    teacher_embs = teacher.embed_many(feats)
    cand_embs = teacher_embs[cand_idx]
    cand_classes = [items[i][1] for i in cand_idx]

    margin = dc.Tensor(np.asarray(state.hyper.margin))
    total = dc.Tensor(np.asarray(0.0))
    triplets = 0
    for a in anchor_idx:
        pool_pos = [p for p, i in enumerate(cand_idx) if i != a]
        mined = mine_hardest_negative(student.data[a], cand_embs[pool_pos],
                                      [cand_classes[p] for p in pool_pos], items[a][1])
        if mined is None:
            continue
        neg = cand_embs[pool_pos[mined]]
        fa = dc.take_row(student, a)
        d_self = dc.sum_all(dc.square(dc.sub(fa, dc.Tensor(teacher_embs[a]))))
        d_neg = dc.sum_all(dc.square(dc.sub(fa, dc.Tensor(neg))))
        total = dc.add(total, dc.relu(dc.add(dc.sub(d_self, d_neg), margin)))
        triplets += 1
    return dc.scale(total, 1.0 / batch.n), triplets


@dataclass
class CoherenceParts:
    inner: dc.Tensor
    outer: dc.Tensor
    combined: dc.Tensor
    inner_count: int
    outer_count: int


def loss_inter_data_coherence(state: ModelState, batch: BatchView,
                              centroids: CentroidStore, sets: ClassIndexSets,
                              tape: dc.GradTape | None = None) -> CoherenceParts:
    """Squared distances to the fixed class centroids, summed then divided by n.

    Current items count when their class is in pi (seen before and present
    now); replayed items count when their class is in gamma (seen before).
    The centroids are constants — no gradient flows into them.
    """
    bound = BoundModel(state, tape)
    emb = bound.embed(batch.features())
    n_current = len(batch.current_items)
    labels = batch.labels()

    def accumulate(indices, allowed):
        total = dc.Tensor(np.asarray(0.0))
        count = 0
        for i in indices:
            y = labels[i]
            if y not in allowed:
                continue
            if not centroids.has(y):
                raise ContractError(f"no centroid recorded for class {y}")
            target = dc.Tensor(centroids.centroid(y))
            diff = dc.sub(dc.take_row(emb, i), target)
            total = dc.add(total, dc.sum_all(dc.square(diff)))
            count += 1
        return total, count

    inner, inner_count = accumulate(range(n_current), sets.pi)
    outer, outer_count = accumulate(range(n_current, len(labels)), sets.gamma)
    combined = dc.scale(dc.add(inner, outer), 1.0 / batch.n)
    return CoherenceParts(inner, outer, combined, inner_count, outer_count)


def combine_terms(l_c: float, l_m: float, l_d: float, alpha: float, beta: float) -> float:
    return l_c + alpha * l_m + beta * l_d


def total_loss(state: ModelState, teacher: ModelSnapshot | None, batch: BatchView,
               centroids: CentroidStore | None, sets: ClassIndexSets | None,
               hyper: Hyperparameters | None = None,
               tape: dc.GradTape | None = None,
               include_model_coherence: bool = True,
               include_data_coherence: bool = True,
               anchors_include_replayed: bool = True,
               negatives_include_replayed: bool = True) -> tuple[dc.Tensor, LossReport]:
    """Weighted loss of Lc + alpha*Lm + beta*Ld.

    Session 1 (no teacher yet) trains on the discrimination term alone; from
    session 2 onward the coherence terms join, unless toggled off.
    """
    hyper = hyper or state.hyper
    report = LossReport()
    total = loss_intra_discrimination(state, batch, tape)
    report.l_c = total.item()

    first_session = teacher is None
    if not first_session and include_model_coherence:
        l_m, triplets = loss_neighbor_model_coherence(
            state, teacher, batch, tape,
            anchors_include_replayed=anchors_include_replayed,
            negatives_include_replayed=negatives_include_replayed)
        report.l_m = l_m.item()
        report.triplet_count = triplets
        total = dc.add(total, dc.scale(l_m, hyper.alpha))
    if not first_session and include_data_coherence:
        if centroids is None or sets is None:
            raise ContractError("data-coherence loss needs centroids and index sets")
        parts = loss_inter_data_coherence(state, batch, centroids, sets, tape)
        report.l_d_inner = parts.inner.item()
        report.l_d_outer = parts.outer.item()
        report.l_d = parts.combined.item()
        report.inner_term_count = parts.inner_count
        report.outer_term_count = parts.outer_count
        total = dc.add(total, dc.scale(parts.combined, hyper.beta))

    report.total = total.item()
    return total, report
