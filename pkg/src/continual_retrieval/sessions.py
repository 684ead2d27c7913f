"""Datasets, session-split protocols, and validation-query sampling.

Three split protocols are supported: disjoint (mutually exclusive class
groups), blurry (all classes predefined, skewed major/minor sample mix per
session), and general incremental (S initial classes, C new classes per later
session, M% of later-session items drawn from previously seen classes, over L
sessions). Split generation is pure: (dataset, parameters, seed) fully
determine the plan.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

DATASET_MAGIC = b"CRDS"
DATASET_VERSION = 1


@dataclass(frozen=True, eq=False)
class DataItem:
    item_id: int
    features: np.ndarray
    class_id: int


class Dataset:
    """Feature-vector dataset with a fixed train/test split."""

    def __init__(self, train_items: list[DataItem], test_items: list[DataItem], dim: int):
        self.train_items = list(train_items)
        self.test_items = list(test_items)
        self.dim = int(dim)
        self._by_id: dict[int, DataItem] = {}
        for item in self.train_items + self.test_items:
            if item.item_id in self._by_id:
                raise ContractError(f"duplicate item id {item.item_id}")
            if item.features.shape != (self.dim,):
                raise ContractError(f"item {item.item_id} has dim {item.features.shape}, expected ({self.dim},)")
            self._by_id[item.item_id] = item
        train_classes = {i.class_id for i in self.train_items}
        test_classes = {i.class_id for i in self.test_items}
        if train_classes != test_classes:
            missing = train_classes ^ test_classes
            raise ContractError(f"classes need >= 1 train and >= 1 test item; unbalanced: {sorted(missing)}")
        self.class_ids = sorted(train_classes)

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def item(self, item_id: int) -> DataItem:
        return self._by_id[item_id]

    def items(self, item_ids) -> list[DataItem]:
        return [self._by_id[i] for i in item_ids]

    def train_by_class(self) -> dict[int, list[DataItem]]:
        grouped: dict[int, list[DataItem]] = {c: [] for c in self.class_ids}
        for item in self.train_items:
            grouped[item.class_id].append(item)
        return grouped


@dataclass(frozen=True)
class SetupDescriptor:
    kind: str                       # disjoint | blurry | general
    num_sessions: int
    major_fraction: float | None = None
    initial_classes: int | None = None     # S
    classes_per_session: int | None = None  # C
    old_percent: int | None = None          # M
    sessions_total: int | None = None       # L

    def label(self) -> str:
        if self.kind == "disjoint":
            return f"disjoint-{self.num_sessions}"
        if self.kind == "blurry":
            return f"blurry-{self.num_sessions}-{self.major_fraction:g}"
        return (f"general-{self.initial_classes}-{self.classes_per_session}"
                f"-{self.old_percent}-{self.sessions_total}")


@dataclass
class SessionSpec:
    session: int                    # 1-based position in the sequence
    train_ids: list[int]
    class_set: frozenset[int]
    withheld_ids: list[int] = field(default_factory=list)
    new_count: int = 0
    old_count: int = 0


@dataclass
class SessionPlan:
    setup: SetupDescriptor
    sessions: list[SessionSpec]
    accumulate_validation: bool = True

    def spec(self, session: int) -> SessionSpec:
        return self.sessions[session - 1]

    @property
    def num_sessions(self) -> int:
        return len(self.sessions)

    def classes_through(self, session: int) -> frozenset[int]:
        out: set[int] = set()
        for s in self.sessions[:session]:
            out |= s.class_set
        return frozenset(out)

    def validation_query_ids(self, session: int) -> list[int]:
        if self.setup.kind == "blurry":
            scope = self.sessions
        elif self.accumulate_validation:
            scope = self.sessions[:session]
        else:
            scope = [self.sessions[session - 1]]
        return [i for s in scope for i in s.withheld_ids]


def _partition_classes(class_order: list[int], num_groups: int) -> list[list[int]]:
    # Remainder classes go to the earliest groups.
    base, extra = divmod(len(class_order), num_groups)
    groups, start = [], 0
    for g in range(num_groups):
        size = base + (1 if g < extra else 0)
        groups.append(class_order[start:start + size])
        start += size
    return groups


def _shuffled_classes(ds: Dataset, rng: np.random.Generator) -> list[int]:
    order = rng.permutation(len(ds.class_ids))
    return [ds.class_ids[i] for i in order]


def disjoint_split(ds: Dataset, num_sessions: int, rng: np.random.Generator) -> SessionPlan:
    """Mutually exclusive class groups; each session trains on all its classes' items."""
    if num_sessions < 1 or num_sessions > ds.num_classes:
        raise ContractError(f"cannot split {ds.num_classes} classes into {num_sessions} sessions")
    groups = _partition_classes(_shuffled_classes(ds, rng), num_sessions)
    by_class = ds.train_by_class()
    sessions = []
    for idx, group in enumerate(groups, start=1):
        ids = [item.item_id for c in sorted(group) for item in by_class[c]]
        sessions.append(SessionSpec(idx, ids, frozenset(group), new_count=len(ids)))
    setup = SetupDescriptor("disjoint", num_sessions)
    return SessionPlan(setup, sessions)


def blurry_split(ds: Dataset, num_sessions: int, major_fraction: float,
                 rng: np.random.Generator) -> SessionPlan:
    """All classes predefined; each session mixes its major classes' bulk with
    a minor share from every other class, without replacement across sessions."""
    if not 0.0 < major_fraction <= 1.0:
        raise ContractError("major_fraction must be in (0, 1]")
    if num_sessions < 1 or ds.num_classes < num_sessions:
        raise ContractError(f"need at least {num_sessions} classes, have {ds.num_classes}")
    groups = _partition_classes(_shuffled_classes(ds, rng), num_sessions)
    major_of = {c: g for g, group in enumerate(groups) for c in group}
    by_class = ds.train_by_class()
    per_session_ids: list[list[int]] = [[] for _ in range(num_sessions)]

    for class_id in ds.class_ids:
        items = by_class[class_id]
        order = rng.permutation(len(items))
        major_count = int(np.floor(major_fraction * len(items) + 0.5))
        if major_count == 0:
            raise ContractError(f"class {class_id}: too few items for major fraction {major_fraction}")
        g = major_of[class_id]
        cursor = 0
        for idx in order[:major_count]:
            per_session_ids[g].append(items[idx].item_id)
        cursor = major_count
        others = [s for s in range(num_sessions) if s != g]
        if others:
            rest = len(items) - major_count
            base, extra = divmod(rest, len(others))
            for pos, s in enumerate(others):
                take = base + (1 if pos < extra else 0)
                for idx in order[cursor:cursor + take]:
                    per_session_ids[s].append(items[idx].item_id)
                cursor += take
        else:
            for idx in order[cursor:]:  # single session: everything is major
                per_session_ids[g].append(items[idx].item_id)

    all_classes = frozenset(ds.class_ids)
    sessions = [SessionSpec(i + 1, ids, all_classes, new_count=len(ids))
                for i, ids in enumerate(per_session_ids)]
    setup = SetupDescriptor("blurry", num_sessions, major_fraction=major_fraction)
    return SessionPlan(setup, sessions)


def _largest_remainder(targets: list[float], total: int) -> list[int]:
    # Integer allocation summing to `total`, each entry within 1 of its target.
    base = [int(np.floor(t)) for t in targets]
    fracs = [t - b for t, b in zip(targets, base)]
    leftover = total - sum(base)
    order = sorted(range(len(targets)), key=lambda i: (-fracs[i], i))
    alloc = list(base)
    i = 0
    while leftover > 0:
        alloc[order[i % len(order)]] += 1
        leftover -= 1
        i += 1
    order_down = sorted(range(len(targets)), key=lambda i: (fracs[i], -i))
    i = 0
    while leftover < 0:
        idx = order_down[i % len(order_down)]
        if alloc[idx] > 0:
            alloc[idx] -= 1
            leftover += 1
        i += 1
    return alloc


def general_split(ds: Dataset, s: int, c: int, m_pct: int, l: int,
                  rng: np.random.Generator) -> SessionPlan:
    """General incremental (S, C, M, L) protocol.

    Session 1 introduces S classes; each later session introduces C fresh
    classes and draws M% of its items class-uniformly from held-back pools of
    previously seen classes. Holdbacks are precomputed so the pools are
    drained exactly by session L.
    """
    if l < 1 or s < 1 or c < 0:
        raise ContractError("need S >= 1, C >= 0, L >= 1")
    if not 0 <= m_pct < 100:
        raise ContractError("M must be in [0, 100)")
    need = s + c * (l - 1)
    if need > ds.num_classes:
        raise ContractError(f"(S,C,M,L)=({s},{c},{m_pct},{l}) needs {need} classes, have {ds.num_classes}")

    ordered = _shuffled_classes(ds, rng)
    fresh: list[list[int]] = [ordered[:s]]
    cursor = s
    for _ in range(1, l):
        fresh.append(ordered[cursor:cursor + c])
        cursor += c

    by_class = ds.train_by_class()
    sizes = {cls: len(by_class[cls]) for group in fresh for cls in group}
    totals = [sum(sizes[cls] for cls in group) for group in fresh]

    rho = m_pct / (100.0 - m_pct)
    supply_groups = totals[:-1]
    a = float(sum(supply_groups))
    b = float(sum(totals[1:]))
    c2 = float(sum(totals[1:-1]))
    phi = (rho * b / (a + rho * c2)) if rho > 0 and (a + rho * c2) > 0 else 0.0

    holdback: dict[int, int] = {cls: 0 for group in fresh for cls in group}
    group_hold = []
    for k, group in enumerate(fresh):
        if k == l - 1 or phi == 0.0:
            group_hold.append(0)
            continue
        target = int(np.floor(phi * totals[k] + 0.5))
        per_class = _largest_remainder([phi * sizes[cls] for cls in group], target)
        for cls, h in zip(group, per_class):
            holdback[cls] = min(h, sizes[cls] - 1)
        group_hold.append(sum(holdback[cls] for cls in group))

    total_hold = sum(group_hold)
    new_counts = [totals[i] - group_hold[i] for i in range(l)]
    old_targets = [rho * new_counts[i] for i in range(1, l)]
    old_alloc = _largest_remainder(old_targets, total_hold) if l > 1 else []

    # Pools hold each class's trailing items (id order) for later old-class draws.
    pools: dict[int, list[int]] = {}
    immediate: dict[int, list[int]] = {}
    for group in fresh:
        for cls in group:
            ids = [item.item_id for item in by_class[cls]]
            h = holdback[cls]
            immediate[cls] = ids[: len(ids) - h]
            pools[cls] = ids[len(ids) - h:]

    sessions = []
    seen: list[int] = []
    for i in range(l):
        fresh_ids = [item_id for cls in sorted(fresh[i]) for item_id in immediate[cls]]
        old_ids: list[int] = []
        if i > 0 and old_alloc[i - 1] > 0:
            need_old = old_alloc[i - 1]
            cycle = [cls for cls in seen if pools[cls]]
            rng.shuffle(cycle)
            while need_old > 0:
                drew = False
                for cls in cycle:
                    if need_old == 0:
                        break
                    if pools[cls]:
                        old_ids.append(pools[cls].pop(0))
                        need_old -= 1
                        drew = True
                if not drew:
                    raise ContractError(f"session {i + 1}: insufficient items in old-class pools")
        ids = fresh_ids + old_ids
        class_set = frozenset(ds.item(item_id).class_id for item_id in ids)
        sessions.append(SessionSpec(i + 1, ids, class_set,
                                    new_count=len(fresh_ids), old_count=len(old_ids)))
        seen.extend(fresh[i])

    setup = SetupDescriptor("general", l, initial_classes=s, classes_per_session=c,
                            old_percent=m_pct, sessions_total=l)
    return SessionPlan(setup, sessions)


def sample_validation_queries(plan: SessionPlan, ds: Dataset, fraction_or_count,
                              rng: np.random.Generator, accumulate: bool = True) -> SessionPlan:
    """Withhold per-class validation queries from each session's training items.

    A float in [0, 1) withholds that fraction per class; an int withholds that
    many per class. For the blurry setup the draw is a single fixed portion per
    class over the entire training pool; otherwise the validation set
    accumulates across sessions when `accumulate` is set.
    """
    plan.accumulate_validation = accumulate
    if fraction_or_count == 0:
        return plan

    def count_for(size: int) -> int:
        if isinstance(fraction_or_count, float) and fraction_or_count < 1.0:
            k = int(np.floor(fraction_or_count * size))
        else:
            k = int(fraction_or_count)
        if k >= size:
            raise ContractError(f"class too small: cannot withhold {k} of {size} items")
        return k

    if plan.setup.kind == "blurry":
        session_of = {item_id: s for s in plan.sessions for item_id in s.train_ids}
        by_class: dict[int, list[int]] = {}
        for item_id in session_of:
            by_class.setdefault(ds.item(item_id).class_id, []).append(item_id)
        withheld: set[int] = set()
        for class_id in sorted(by_class):
            ids = sorted(by_class[class_id])
            k = count_for(len(ids))
            withheld.update(ids[pos] for pos in rng.permutation(len(ids))[:k])
        for spec in plan.sessions:
            spec.withheld_ids = [i for i in spec.train_ids if i in withheld]
            spec.train_ids = [i for i in spec.train_ids if i not in withheld]
        return plan

    for spec in plan.sessions:
        by_class: dict[int, list[int]] = {}
        for item_id in spec.train_ids:
            by_class.setdefault(ds.item(item_id).class_id, []).append(item_id)
        withheld: set[int] = set()
        for class_id in sorted(by_class):
            ids = by_class[class_id]
            k = count_for(len(ids))
            withheld.update(ids[pos] for pos in rng.permutation(len(ids))[:k])
        spec.withheld_ids = [i for i in spec.train_ids if i in withheld]
        spec.train_ids = [i for i in spec.train_ids if i not in withheld]
    return plan


def make_synthetic(num_classes: int, dim: int, per_class: int, spread: float,
                   drift: float, seed: int) -> Dataset:
    """Gaussian cluster per class with seeded means on the unit sphere.

    `drift` slides each class mean along a per-class direction as the item
    index grows, simulating distribution shift over a collection period.
    Items split 80/20 into train/test per class.
    """
    if num_classes < 1 or dim < 1 or per_class < 2:
        raise ContractError("need num_classes >= 1, dim >= 1, per_class >= 2")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    directions = rng.normal(size=(num_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    items: list[list[DataItem]] = []
    item_id = 0
    for cls in range(num_classes):
        class_items = []
        for t in range(per_class):
            center = means[cls] + drift * (t / per_class) * directions[cls]
            center = center / np.linalg.norm(center)
            x = center + rng.normal(0.0, spread, dim) if spread > 0 else center.copy()
            class_items.append(DataItem(item_id, x, cls))
            item_id += 1
        items.append(class_items)

    train, test = [], []
    for class_items in items:
        n = len(class_items)
        n_train = min(max(1, int(np.floor(0.8 * n + 0.5))), n - 1)
        order = rng.permutation(n)
        chosen = set(order[:n_train])
        for idx, item in enumerate(class_items):
            (train if idx in chosen else test).append(item)
    return Dataset(train, test, dim)


def save_dataset(ds: Dataset, path: str) -> None:
    """Binary dataset container: header + (id: u64, class: u32, f32 features) records."""
    all_items = sorted(ds.train_items + ds.test_items, key=lambda i: i.item_id)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IQII", DATASET_VERSION, len(all_items), ds.dim, ds.num_classes))
        for item in all_items:
            fh.write(struct.pack("<QI", item.item_id, item.class_id))
            fh.write(item.features.astype("<f4").tobytes())


def _split_pool(pool: list[DataItem], dim: int, test_fraction: float, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[DataItem]] = {}
    for item in pool:
        by_class.setdefault(item.class_id, []).append(item)
    train, test = [], []
    for class_id in sorted(by_class):
        members = by_class[class_id]
        if len(members) < 2:
            raise ContractError(f"class {class_id} needs >= 2 items to split train/test")
        n_test = min(max(1, int(np.floor(test_fraction * len(members) + 0.5))), len(members) - 1)
        order = rng.permutation(len(members))
        test_idx = set(order[:n_test])
        for idx, item in enumerate(members):
            (test if idx in test_idx else train).append(item)
    return Dataset(train, test, dim)


def load_dataset(path: str, test_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Read the binary container; the file stores a flat pool, so the train/test
    split is drawn here, stratified per class."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise ContractError(f"not a dataset file: bad magic {magic!r}")
        version, num_items, dim, _num_classes = struct.unpack("<IQII", fh.read(20))
        if version != DATASET_VERSION:
            raise ContractError(f"unsupported dataset version {version}")
        pool = []
        for _ in range(num_items):
            item_id, class_id = struct.unpack("<QI", fh.read(12))
            features = np.frombuffer(fh.read(4 * dim), dtype="<f4").astype(np.float64)
            pool.append(DataItem(item_id, features, class_id))
    return _split_pool(pool, dim, test_fraction, seed)


def import_csv(path: str, test_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """CSV import: rows of id,class,f0..fD with an optional header row."""
    pool = []
    dim = None
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                item_id = int(row[0])
            except ValueError:
                continue  # header row
            class_id = int(row[1])
            features = np.asarray([float(v) for v in row[2:]], dtype=np.float64)
            if dim is None:
                dim = features.size
            elif features.size != dim:
                raise ContractError(f"row for item {item_id} has {features.size} features, expected {dim}")
            pool.append(DataItem(item_id, features, class_id))
    if not pool:
        raise ContractError(f"no data rows in {path}")
    return _split_pool(pool, dim, test_fraction, seed)
