"""Experiment orchestration: session training loop, baselines, reporting.

A run is fully determined by (config, seed): datasets, splits, batch order,
mining draws, and therefore every metric and stored byte. The `joint` method
is the re-extraction upper bound, `finetune` (discrimination term only, no
replay) the lower bound.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ContractError
from .gallery import (GallerySet, classification_accuracy, extract_and_append,
                      gallery_from_payload, gallery_to_payload, recalls_at)
from .losses import BatchView, ClassIndexSets, LossReport, total_loss
from .model import (BoundModel, Hyperparameters, ModelState, SgdMomentum,
                    model_from_payload, model_to_payload, snapshot)
from .replay import (CentroidStore, ReplayBuffer, buffer_from_payload,
                     buffer_to_payload, centroids_from_payload,
                     centroids_to_payload, mine_exemplars, rebalance)
from .sessions import (Dataset, SessionPlan, blurry_split, disjoint_split,
                       general_split, import_csv, load_dataset, make_synthetic,
                       sample_validation_queries)

METHODS = ("cvs", "finetune", "joint")

# Loss-term ablation rows: discrimination alone, each coherence term added,
# and the data-coherence row with the exemplar replay detached.
ABLATION_VARIANTS = {
    "intra_only": dict(use_model_coherence=False, use_data_coherence=False,
                       use_replay_data=False, use_replayed_embedding=False),
    "intra_plus_model": dict(use_data_coherence=False, use_replayed_embedding=False),
    "intra_plus_data_noreplay": dict(use_model_coherence=False, use_replay_data=False),
    "intra_plus_data": dict(use_model_coherence=False),
    "full": dict(),
}


@dataclass
class SyntheticSpec:
    num_classes: int = 20
    dim: int = 32
    per_class: int = 30
    spread: float = 0.3
    drift: float = 0.0
    seed: int = 0


@dataclass
class DatasetSpec:
    synthetic: SyntheticSpec | None = None
    path: str | None = None
    test_fraction: float = 0.2
    load_seed: int = 0

    def __post_init__(self):
        if (self.synthetic is None) == (self.path is None):
            raise ContractError("dataset spec needs exactly one of synthetic params or a file path")


@dataclass
class SetupSpec:
    kind: str = "general"            # disjoint | blurry | general
    num_sessions: int = 5
    major_fraction: float = 0.9      # blurry only
    initial_classes: int = 4         # general: S
    classes_per_session: int = 4     # general: C
    old_percent: int = 30            # general: M

    def __post_init__(self):
        if self.kind not in ("disjoint", "blurry", "general"):
            raise ContractError(f"unknown setup kind {self.kind!r}")


@dataclass
class RunConfig:
    dataset: DatasetSpec
    setup: SetupSpec
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    method: str = "cvs"
    replay_budget: float = 0.05      # < 1: fraction of the train pool; >= 1: absolute count
    replay_fraction_per_batch: float = 0.25
    use_model_coherence: bool = True
    use_data_coherence: bool = True
    use_replay_data: bool = True
    use_replayed_embedding: bool = True
    anchors_include_replayed: bool = True
    negatives_include_replayed: bool = True
    centroid_mode: str = "contributing"
    exemplar_candidate_factor: int = 2
    validation: float = 0.1          # < 1: per-class fraction; >= 1: per-class count
    recall_ks: tuple = (1, 2, 4)
    seed: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}")
        if self.method == "finetune":
            # Finetune is the lower bound: discrimination term only, no replay.
            self.use_model_coherence = False
            self.use_data_coherence = False
            self.use_replay_data = False
            self.use_replayed_embedding = False
        if self.use_data_coherence and not self.use_replayed_embedding:
            raise ContractError("data-coherence loss needs the replayed-embedding store enabled")
        self.recall_ks = tuple(int(k) for k in self.recall_ks)


def config_to_dict(config: RunConfig) -> dict:
    return asdict(config)


def config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    ds_raw = dict(raw.pop("dataset"))
    synth = ds_raw.get("synthetic")
    ds_raw["synthetic"] = SyntheticSpec(**synth) if synth is not None else None
    dataset = DatasetSpec(**ds_raw)
    setup = SetupSpec(**raw.pop("setup"))
    hyper = Hyperparameters(**raw.pop("hyper", {}))
    return RunConfig(dataset=dataset, setup=setup, hyper=hyper, **raw)


@dataclass
class SessionResult:
    session: int
    train_size: int
    recalls: dict[int, float]
    accuracy: float
    best_epoch: int
    best_validation_recall: float | None
    epoch_losses: list[dict]


@dataclass
class RunReport:
    method: str
    setup_label: str
    sessions: list[SessionResult]
    average_recalls: dict[int, float]
    gallery_hashes: dict[int, str]
    wall_time_s: float
    config: dict
    notes: dict = field(default_factory=dict)


class RunState:
    """Everything that survives from one session to the next."""

    def __init__(self, model: ModelState, buffer: ReplayBuffer, centroids: CentroidStore):
        self.model = model
        self.buffer = buffer
        self.centroids = centroids
        self.gallery = GallerySet()
        self.completed_sessions = 0
        self.class_sets: list[frozenset[int]] = []


def build_dataset(spec: DatasetSpec) -> Dataset:
    if spec.synthetic is not None:
        s = spec.synthetic
        return make_synthetic(s.num_classes, s.dim, s.per_class, s.spread, s.drift, s.seed)
    if spec.path.endswith(".csv"):
        return import_csv(spec.path, spec.test_fraction, spec.load_seed)
    return load_dataset(spec.path, spec.test_fraction, spec.load_seed)


def build_plan(ds: Dataset, setup: SetupSpec, rng: np.random.Generator) -> SessionPlan:
    if setup.kind == "disjoint":
        return disjoint_split(ds, setup.num_sessions, rng)
    if setup.kind == "blurry":
        return blurry_split(ds, setup.num_sessions, setup.major_fraction, rng)
    return general_split(ds, setup.initial_classes, setup.classes_per_session,
                         setup.old_percent, setup.num_sessions, rng)


def resolve_budget(config: RunConfig, ds: Dataset) -> int:
    if config.replay_budget < 1.0:
        return int(np.floor(config.replay_budget * len(ds.train_items)))
    return int(config.replay_budget)


def _mean_report(reports: list[LossReport]) -> dict:
    if not reports:
        return {}
    keys = ("l_c", "l_m", "l_d_inner", "l_d_outer", "l_d", "total")
    out = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    out["triplet_count"] = int(sum(r.triplet_count for r in reports))
    return out


def _make_batches(current_items, replay_entries, batch_size: int,
                  replay_fraction: float, rng: np.random.Generator) -> list[BatchView]:
    order = rng.permutation(len(current_items))
    replay_slots = 0
    if replay_entries:
        replay_slots = min(int(np.floor(batch_size * replay_fraction)), len(replay_entries))
    per_batch = max(batch_size - replay_slots, 1)

    batches: list[BatchView] = []
    for start in range(0, len(order), per_batch):
        chunk = [current_items[i] for i in order[start:start + per_batch]]
        replayed = []
        if replay_slots:
            draw = rng.choice(len(replay_entries), size=replay_slots, replace=False)
            replayed = [replay_entries[i] for i in draw]
        current = [(item.features, item.class_id) for item in chunk]
        replay_pairs = [(e.item.features, e.item.class_id) for e in replayed]
        if len(current) + len(replay_pairs) < 2:
            if batches:
                batches[-1].current_items.extend(current)
            continue
        batches.append(BatchView(current, replay_pairs))
    return batches


def _temp_gallery_with_current(gallery: GallerySet, model: ModelState,
                               current_items, session: int) -> GallerySet:
    """Existing frozen blocks plus the current session embedded by the live model."""
    staged = GallerySet()
    for s in gallery.sessions():
        staged.append_block(s, [r for r in gallery.records if r.session == s])
    extract_and_append(staged, model, current_items, session)
    return staged


def _validation_recall(model: ModelState, ds: Dataset, plan: SessionPlan,
                       session: int, gallery: GallerySet, current_items) -> float | None:
    val_ids = plan.validation_query_ids(session)
    if not val_ids:
        return None
    staged = _temp_gallery_with_current(gallery, model, current_items, session)
    items = ds.items(val_ids)
    embs = model.embed_many(np.stack([i.features for i in items]))
    queries = [(embs[i], item.class_id) for i, item in enumerate(items)]
    return recalls_at(staged, queries, (1,))[1]


def _register_for_session(state: RunState, ds: Dataset, plan: SessionPlan, session: int) -> None:
    if plan.setup.kind == "blurry" and session == 1:
        state.model.register_classes(ds.class_ids)
        return
    new = sorted(set(plan.spec(session).class_set) - set(state.model.class_registry))
    state.model.register_classes(new)


def train_session(state: RunState, ds: Dataset, plan: SessionPlan, session: int,
                  config: RunConfig, budget: int,
                  train_rng: np.random.Generator, mine_rng: np.random.Generator) -> dict:
    """Run one session end to end: train, select, freeze gallery, refresh replay."""
    if session != state.completed_sessions + 1:
        raise ContractError(f"session {session} called out of order "
                            f"(completed {state.completed_sessions})")
    spec = plan.spec(session)
    hyper = state.model.hyper
    teacher = snapshot(state.model, session - 1) if session >= 2 else None
    _register_for_session(state, ds, plan, session)
    sets = ClassIndexSets.from_history(state.class_sets, spec.class_set)
    current_items = ds.items(spec.train_ids)

    include_m = config.use_model_coherence and teacher is not None
    include_d = config.use_data_coherence and session >= 2
    replay_pool = state.buffer.entries if config.use_replay_data else []

    optimizer = SgdMomentum(hyper.learning_rate, hyper.momentum)
    best_params = None
    best_recall = -1.0
    best_epoch = -1
    epoch_losses: list[dict] = []

    for epoch in range(hyper.epochs_per_session):
        reports = []
        for batch in _make_batches(current_items, replay_pool, hyper.batch_size,
                                   config.replay_fraction_per_batch, train_rng):
            tape = dc.GradTape()
            total, report = total_loss(
                state.model, teacher, batch, state.centroids, sets, hyper, tape,
                include_model_coherence=include_m,
                include_data_coherence=include_d,
                anchors_include_replayed=config.anchors_include_replayed,
                negatives_include_replayed=config.negatives_include_replayed)
            grads = dc.backward(tape, total)
            named = BoundModel(state.model, tape).params()
            optimizer.step(state.model, {name: grads[t] for name, t in named.items()})
            reports.append(report)
        epoch_losses.append(_mean_report(reports))
        val = _validation_recall(state.model, ds, plan, session, state.gallery, current_items)
        if val is not None and val > best_recall:
            best_recall = val
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in state.model.parameter_arrays().items()}

    if best_params is not None:
        state.model.set_parameter_arrays(best_params)
    else:
        best_epoch = hyper.epochs_per_session - 1

    extract_and_append(state.gallery, state.model, current_items, session)

    if config.use_replay_data and budget > 0:
        quota = budget // len(state.model.class_registry)
        mined = mine_exemplars(state.model, current_items, quota, mine_rng, session,
                               config.exemplar_candidate_factor)
        rebalance(state.buffer, mined, len(state.model.class_registry))

    if config.use_replayed_embedding:
        by_class: dict[int, list[np.ndarray]] = {}
        for record in state.gallery.records:
            if record.session == session:
                by_class.setdefault(record.class_id, []).append(record.embedding)
        if by_class:
            state.centroids.update(session, {c: np.stack(v) for c, v in by_class.items()})

    state.class_sets.append(spec.class_set)
    state.completed_sessions = session
    return {
        "best_epoch": best_epoch,
        "best_validation_recall": None if best_recall < 0 else best_recall,
        "epoch_losses": epoch_losses,
        "train_size": len(current_items),
    }


def _evaluate_session(model: ModelState, ds: Dataset, plan: SessionPlan, session: int,
                      gallery: GallerySet, ks) -> tuple[dict[int, float], float]:
    scope = plan.classes_through(session)
    test_items = [i for i in ds.test_items if i.class_id in scope]
    embs = model.embed_many(np.stack([i.features for i in test_items]))
    queries = [(embs[i], item.class_id) for i, item in enumerate(test_items)]
    recalls = recalls_at(gallery, queries, ks)
    accuracy = classification_accuracy(model, test_items)
    return recalls, accuracy


def _run_sessions(config: RunConfig, ds: Dataset, plan: SessionPlan,
                  rngs: dict[str, np.random.Generator]) -> tuple[RunState, list[SessionResult]]:
    state = RunState(
        ModelState(ds.dim, config.hyper),
        ReplayBuffer(resolve_budget(config, ds), seed=config.seed),
        CentroidStore(config.centroid_mode),
    )
    results = []
    for session in range(1, plan.num_sessions + 1):
        info = train_session(state, ds, plan, session, config,
                             state.buffer.budget, rngs["train"], rngs["mine"])
        recalls, accuracy = _evaluate_session(state.model, ds, plan, session,
                                              state.gallery, config.recall_ks)
        results.append(SessionResult(session=session, train_size=info["train_size"],
                                     recalls=recalls, accuracy=accuracy,
                                     best_epoch=info["best_epoch"],
                                     best_validation_recall=info["best_validation_recall"],
                                     epoch_losses=info["epoch_losses"]))
    return state, results


def _run_joint(config: RunConfig, ds: Dataset, plan: SessionPlan,
               rngs: dict[str, np.random.Generator]) -> tuple[RunState, list[SessionResult]]:
    """Train once on everything, re-extract the whole gallery, evaluate per session."""
    state = RunState(ModelState(ds.dim, config.hyper), ReplayBuffer(0), CentroidStore())
    state.model.register_classes(ds.class_ids)
    hyper = state.model.hyper
    train_items = [item for spec in plan.sessions for item in ds.items(spec.train_ids)]
    epochs = hyper.epochs_per_session * plan.num_sessions

    optimizer = SgdMomentum(hyper.learning_rate, hyper.momentum)
    best_params = None
    best_recall = -1.0
    best_epoch = -1
    epoch_losses: list[dict] = []
    val_ids = plan.validation_query_ids(plan.num_sessions)

    for epoch in range(epochs):
        reports = []
        for batch in _make_batches(train_items, [], hyper.batch_size, 0.0, rngs["train"]):
            tape = dc.GradTape()
            total, report = total_loss(state.model, None, batch, None, None, hyper, tape)
            grads = dc.backward(tape, total)
            named = BoundModel(state.model, tape).params()
            optimizer.step(state.model, {name: grads[t] for name, t in named.items()})
            reports.append(report)
        epoch_losses.append(_mean_report(reports))
        if val_ids:
            staged = GallerySet()
            extract_and_append(staged, state.model, train_items, 0)
            items = ds.items(val_ids)
            embs = state.model.embed_many(np.stack([i.features for i in items]))
            val = recalls_at(staged, [(embs[i], it.class_id) for i, it in enumerate(items)], (1,))[1]
            if val > best_recall:
                best_recall, best_epoch = val, epoch
                best_params = {k: v.copy() for k, v in state.model.parameter_arrays().items()}
    if best_params is not None:
        state.model.set_parameter_arrays(best_params)
    else:
        best_epoch = epochs - 1

    # The joint upper bound is the one method allowed to re-extract everything.
    for spec in plan.sessions:
        extract_and_append(state.gallery, state.model, ds.items(spec.train_ids), spec.session)
    state.completed_sessions = plan.num_sessions
    state.class_sets = [s.class_set for s in plan.sessions]

    results = []
    for session in range(1, plan.num_sessions + 1):
        sub = state.gallery.through_session(session)
        recalls, accuracy = _evaluate_session(state.model, ds, plan, session, sub, config.recall_ks)
        results.append(SessionResult(session=session, train_size=len(plan.spec(session).train_ids),
                                     recalls=recalls, accuracy=accuracy,
                                     best_epoch=best_epoch,
                                     best_validation_recall=None if best_recall < 0 else best_recall,
                                     epoch_losses=epoch_losses if session == 1 else []))
    return state, results


def run_experiment(config: RunConfig) -> RunReport:
    """Build the plan, run every session (or the joint baseline), emit the report."""
    start = time.perf_counter()
    ds = build_dataset(config.dataset)
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    rngs = {
        "plan": np.random.default_rng(seeds[0]),
        "validation": np.random.default_rng(seeds[1]),
        "train": np.random.default_rng(seeds[2]),
        "mine": np.random.default_rng(seeds[3]),
    }
    plan = build_plan(ds, config.setup, rngs["plan"])
    sample_validation_queries(plan, ds, config.validation, rngs["validation"])

    if config.method == "joint":
        state, results = _run_joint(config, ds, plan, rngs)
    else:
        state, results = _run_sessions(config, ds, plan, rngs)

    if not state.gallery.verify_block_hashes():
        raise ContractError("gallery block hash drift detected at end of run")

    average = {k: float(np.mean([r.recalls[k] for r in results])) for k in config.recall_ks}
    report = RunReport(
        method=config.method,
        setup_label=plan.setup.label(),
        sessions=results,
        average_recalls=average,
        gallery_hashes={s: state.gallery.block_hash(s) for s in state.gallery.sessions()},
        wall_time_s=time.perf_counter() - start,
        config=config_to_dict(config),
        notes={"learning_rate_schedule": "constant (no cosine decay at this scale)"},
    )
    if config.out_dir:
        write_outputs(config.out_dir, report, state)
    return report


def write_outputs(out_dir: str, report: RunReport, state: RunState) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        ks = sorted(report.average_recalls)
        writer.writerow(["session", "setup", "method"]
                        + [f"recall_at_{k}" for k in ks] + ["accuracy"])
        for result in report.sessions:
            writer.writerow([result.session, report.setup_label, report.method]
                            + [repr(result.recalls[k]) for k in ks]
                            + [repr(result.accuracy)])
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(asdict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
    checkpoint = {
        "format": "continual-retrieval-run",
        "version": 1,
        "model": model_to_payload(state.model, state.completed_sessions),
        "replay_buffer": buffer_to_payload(state.buffer),
        "centroids": centroids_to_payload(state.centroids),
        "gallery": gallery_to_payload(state.gallery),
    }
    with open(os.path.join(out_dir, "checkpoint.json"), "w") as fh:
        json.dump(checkpoint, fh)
        fh.write("\n")


def load_checkpoint(path: str) -> dict:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "continual-retrieval-run" or payload.get("version") != 1:
        raise ContractError("unrecognized run checkpoint")
    model, session = model_from_payload(payload["model"])
    return {
        "model": model,
        "session": session,
        "replay_buffer": buffer_from_payload(payload["replay_buffer"]),
        "centroids": centroids_from_payload(payload["centroids"]),
        "gallery": gallery_from_payload(payload["gallery"]),
    }


def run_ablation_sweep(config: RunConfig) -> dict[str, RunReport]:
    """Run the loss-term ablation matrix off one base config."""
    reports = {}
    for variant, overrides in ABLATION_VARIANTS.items():
        raw = config_to_dict(config)
        raw.update(overrides)
        raw["method"] = "cvs"
        raw["out_dir"] = os.path.join(config.out_dir, variant) if config.out_dir else None
        reports[variant] = run_experiment(config_from_dict(raw))
    if config.out_dir:
        summary = {variant: {str(k): v for k, v in rep.average_recalls.items()}
                   for variant, rep in reports.items()}
        with open(os.path.join(config.out_dir, "sweep_summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return reports


@dataclass
class GradCheckReport:
    seed: int
    instances: int
    step: float
    tolerance: float
    max_rel_err: dict[str, float]
    elapsed_s: float

    @property
    def passed(self) -> bool:
        return all(v < self.tolerance for v in self.max_rel_err.values())


class _CheckInstance:
    def __init__(self, state, teacher, batch, centroids, sets):
        self.state = state
        self.teacher = teacher
        self.batch = batch
        self.centroids = centroids
        self.sets = sets


def _random_check_instance(rng: np.random.Generator, alpha: float, beta: float) -> _CheckInstance:
    input_dim = int(rng.integers(3, 5))
    hyper = Hyperparameters(
        alpha=alpha, beta=beta, margin=0.1,
        temperature=float(rng.uniform(0.3, 1.2)),
        batch_size=4,
        embed_dim=int(rng.integers(3, 9)),
        hidden_dim=int(rng.integers(3, 6)),
        seed=int(rng.integers(0, 2**31)),
    )
    num_classes = int(rng.integers(3, 7))
    state = ModelState(input_dim, hyper)
    state.register_classes(range(num_classes))

    teacher_state = ModelState(input_dim, hyper)
    teacher_state.set_parameter_arrays(state.parameter_arrays())
    teacher_state.class_registry = list(state.class_registry)
    for name, arr in teacher_state.parameter_arrays().items():
        arr += rng.normal(0.0, 0.05, arr.shape)
    teacher = snapshot(teacher_state, 1)

    n_current = int(rng.integers(2, 5))
    n_replayed = int(rng.integers(0, min(3, 7 - n_current)))
    labels = rng.integers(0, num_classes, n_current + n_replayed)
    while len(set(labels.tolist())) < 2:
        labels = rng.integers(0, num_classes, n_current + n_replayed)
    feats = rng.normal(0.0, 1.0, (n_current + n_replayed, input_dim))
    current = [(feats[i], int(labels[i])) for i in range(n_current)]
    replayed = [(feats[i], int(labels[i])) for i in range(n_current, n_current + n_replayed)]
    batch = BatchView(current, replayed)

    current_classes = {y for _, y in current}
    gamma = set(int(labels[i]) for i in range(n_current, n_current + n_replayed))
    gamma |= set(int(c) for c in rng.choice(sorted(current_classes),
                                            size=max(1, len(current_classes) // 2),
                                            replace=False))
    sets = ClassIndexSets(pi=frozenset(gamma & current_classes), gamma=frozenset(gamma))
    centroids = CentroidStore()
    centroids.update(1, {c: rng.normal(0.0, 0.6, (2, hyper.embed_dim)) for c in sorted(gamma)})
    return _CheckInstance(state, teacher, batch, centroids, sets)


def _instance_is_smooth(inst: _CheckInstance, tol: float = 1e-3) -> bool:
    """Reject instances near ReLU kinks, hinge boundaries, or mining ties,
    where central differences straddle a non-differentiability."""
    state = inst.state
    feats = inst.batch.features()
    z1 = feats @ state.layer1_w + state.layer1_b
    if np.min(np.abs(z1)) < tol:
        return False
    pre_norm = np.maximum(z1, 0.0) @ state.layer2_w + state.layer2_b
    if np.min(np.linalg.norm(pre_norm, axis=1)) < 1e-2:
        return False

    student = state.embed_many(feats)
    teacher_embs = inst.teacher.embed_many(feats)
    labels = inst.batch.labels()
    for a in range(len(labels)):
        cand = [(teacher_embs[i], labels[i]) for i in range(len(labels)) if i != a]
        dists = sorted(float(np.sum((emb - student[a]) ** 2))
                       for emb, cls in cand if cls != labels[a])
        if not dists:
            continue
        if len(dists) > 1 and dists[1] - dists[0] < tol:
            return False
        d_self = float(np.sum((teacher_embs[a] - student[a]) ** 2))
        if abs(d_self - dists[0] + state.hyper.margin) < tol:
            return False
    return True


def _term_evaluators(inst: _CheckInstance) -> dict:
    from .losses import (loss_inter_data_coherence, loss_intra_discrimination,
                         loss_neighbor_model_coherence)

    def intra(tape=None):
        return loss_intra_discrimination(inst.state, inst.batch, tape)

    def model_coherence(tape=None):
        return loss_neighbor_model_coherence(inst.state, inst.teacher, inst.batch, tape)[0]

    def data_coherence(tape=None):
        return loss_inter_data_coherence(inst.state, inst.batch, inst.centroids,
                                         inst.sets, tape).combined

    def combined(tape=None):
        return total_loss(inst.state, inst.teacher, inst.batch, inst.centroids,
                          inst.sets, tape=tape)[0]

    return {"intra_discrimination": intra, "model_coherence": model_coherence,
            "data_coherence": data_coherence, "total": combined}


def _flat_gradient(inst: _CheckInstance, term_fn) -> np.ndarray:
    tape = dc.GradTape()
    scalar = term_fn(tape)
    grads = dc.backward(tape, scalar)
    named = BoundModel(inst.state, tape).params()
    from .model import PARAM_NAMES
    return np.concatenate([grads[named[name]].reshape(-1) for name in PARAM_NAMES])


def _flat_numeric_gradient(inst: _CheckInstance, term_fn, step: float) -> np.ndarray:
    from .model import PARAM_NAMES
    out = []
    for name in PARAM_NAMES:
        arr = getattr(inst.state, name)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = term_fn().item()
            flat[i] = original - step
            minus = term_fn().item()
            flat[i] = original
            out.append((plus - minus) / (2.0 * step))
    return np.asarray(out)


def grad_check_suite(seed: int = 0, instances: int = 100, step: float = 1e-5,
                     tolerance: float = 1e-4, alpha: float = 10.0,
                     beta: float = 1.0) -> GradCheckReport:
    """Finite-difference verification of each loss term and the combination."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = {"intra_discrimination": 0.0, "model_coherence": 0.0,
             "data_coherence": 0.0, "total": 0.0}
    done = 0
    while done < instances:
        inst = _random_check_instance(rng, alpha, beta)
        if not _instance_is_smooth(inst):
            continue
        for term, fn in _term_evaluators(inst).items():
            analytic = _flat_gradient(inst, fn)
            numeric = _flat_numeric_gradient(inst, fn, step)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
            worst[term] = max(worst[term], float(np.max(np.abs(analytic - numeric) / denom)))
        done += 1
    return GradCheckReport(seed=seed, instances=instances, step=step,
                           tolerance=tolerance, max_rel_err=worst,
                           elapsed_s=time.perf_counter() - start)
