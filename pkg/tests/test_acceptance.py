"""Acceptance suite: one test per criterion, each printing a PASS line.

Criteria 4-6 share a fixed synthetic benchmark: 20 classes, dim 32, spread
0.3, drift on, general setup (4, 4, 30, 5), replay budget 5% of the train
pool, default loss weights, averaged over 5 pinned seeds.
"""

import math
import time

import numpy as np
import pytest

from continual_retrieval.gallery import (average_recall,
                                         classification_accuracy, recall_at_k,
                                         retrieve)
from continual_retrieval.losses import (BatchView, ClassIndexSets,
                                        combine_terms,
                                        loss_inter_data_coherence,
                                        loss_intra_discrimination,
                                        loss_neighbor_model_coherence)
from continual_retrieval.model import Hyperparameters, snapshot
from continual_retrieval.replay import CentroidStore
from continual_retrieval.runner import (DatasetSpec, RunConfig, SetupSpec,
                                        SyntheticSpec, build_dataset,
                                        config_from_dict, config_to_dict,
                                        grad_check_suite, load_checkpoint,
                                        run_experiment)
from continual_retrieval.sessions import (DataItem, blurry_split,
                                          disjoint_split, general_split,
                                          make_synthetic)

from conftest import identity_model
from test_gallery import random_gallery

BENCH_SEEDS = (101, 102, 103, 104, 105)


def _ok(number, name, detail=""):
    print(f"ACCEPTANCE {number} {name}: PASS {detail}".rstrip())


def benchmark_config(method="cvs", seed=101, budget=0.05, **overrides) -> RunConfig:
    config = RunConfig(
        dataset=DatasetSpec(synthetic=SyntheticSpec(num_classes=20, dim=32, per_class=30,
                                                    spread=0.3, drift=0.5, seed=seed)),
        setup=SetupSpec(kind="general", num_sessions=5, initial_classes=4,
                        classes_per_session=4, old_percent=30),
        hyper=Hyperparameters(embed_dim=16, hidden_dim=32, epochs_per_session=10,
                              seed=seed),
        method=method,
        replay_budget=budget,
        seed=seed,
    )
    if overrides:
        raw = config_to_dict(config)
        raw.update(overrides)
        config = config_from_dict(raw)
    return config


@pytest.fixture(scope="module")
def benchmark():
    """Mean AR@1 per method/variant over the pinned seeds, plus core wall time."""
    variants = {
        "cvs": dict(method="cvs"),
        "finetune": dict(method="finetune"),
        "joint": dict(method="joint"),
        "intra_only": dict(method="cvs", use_model_coherence=False,
                           use_data_coherence=False, use_replay_data=False,
                           use_replayed_embedding=False),
        "intra_plus_data": dict(method="cvs", use_model_coherence=False),
        "intra_plus_data_noreplay": dict(method="cvs", use_model_coherence=False,
                                         use_replay_data=False),
        "cvs_half_budget": dict(method="cvs", budget=0.025),
    }
    results = {}
    core_elapsed = 0.0
    for name, spec in variants.items():
        spec = dict(spec)
        method = spec.pop("method")
        budget = spec.pop("budget", 0.05)
        start = time.perf_counter()
        results[name] = [
            run_experiment(benchmark_config(method, seed, budget, **spec)).average_recalls[1]
            for seed in BENCH_SEEDS
        ]
        if name in ("cvs", "finetune", "joint"):
            core_elapsed += time.perf_counter() - start
    means = {name: float(np.mean(vals)) for name, vals in results.items()}
    return {"means": means, "per_seed": results, "core_elapsed_s": core_elapsed}


def test_criterion_1_gradient_correctness():
    report = grad_check_suite(seed=0, instances=100)
    assert report.elapsed_s < 30.0, f"gradient suite took {report.elapsed_s:.1f}s"
    for term, err in report.max_rel_err.items():
        assert err < 1e-4, f"{term}: max rel err {err:.3e}"
    _ok(1, "gradient correctness",
        f"(100 instances, worst rel err {max(report.max_rel_err.values()):.2e}, "
        f"{report.elapsed_s:.1f}s)")


def test_criterion_2_loss_value_oracles():
    # Uniform softmax: identical head columns -> loss is exactly ln K.
    k, dim = 5, 4
    col = np.zeros(dim)
    col[0] = 1.0
    state = identity_model(dim, np.tile(col[:, None], (1, k)), temperature=0.05)
    batch = BatchView([(np.eye(dim)[1], 0), (np.eye(dim)[2], 3)])
    assert abs(loss_intra_discrimination(state, batch).item() - math.log(k)) < 1e-12

    # Closed-form two-class softmax at T=1: cos 1 vs cos 0 -> -log(e/(e+1)).
    cols = np.eye(3)[:, :2]
    state2 = identity_model(3, cols, temperature=1.0)
    batch2 = BatchView([(np.eye(3)[0], 0), (np.eye(3)[0], 0)])
    expected = -math.log(math.e / (math.e + 1.0))
    assert abs(loss_intra_discrimination(state2, batch2).item() - expected) < 1e-12

    # Hinge equals the margin when self- and negative-distances are both zero.
    state3 = identity_model(4, np.eye(4))
    teacher = snapshot(state3, 1)
    x = np.eye(4)[0]
    hinge, _ = loss_neighbor_model_coherence(state3, teacher, BatchView([(x, 0), (x, 1)]))
    assert abs(hinge.item() - state3.hyper.margin) < 1e-12

    # Perfect coherence -> zero data-coherence loss.
    store = CentroidStore()
    store.update(1, {0: np.eye(3)[:1], 1: np.eye(3)[1:2]})
    sets = ClassIndexSets(pi=frozenset({0, 1}), gamma=frozenset({0, 1}))
    parts = loss_inter_data_coherence(identity_model(3, np.eye(3)),
                                      BatchView([(np.eye(3)[0], 0), (np.eye(3)[1], 1)]),
                                      store, sets)
    assert parts.combined.item() == 0.0

    # Weighted combination arithmetic at the default weights.
    assert combine_terms(0.5, 0.02, 0.3, alpha=10.0, beta=1.0) == 1.0
    _ok(2, "loss-value oracles", "(ln K, closed-form softmax, hinge=m, zero coherence, weighted sum)")


def test_criterion_3_backward_consistency_invariant(tmp_path):
    out = tmp_path / "run"
    config = benchmark_config("cvs", seed=101, out_dir=str(out))
    report = run_experiment(config)

    loaded = load_checkpoint(str(out / "checkpoint.json"))
    gallery = loaded["gallery"]
    assert gallery.sessions() == [1, 2, 3, 4, 5]
    # Block hashes recorded at creation still match the stored bytes at end of run.
    for session in gallery.sessions():
        assert gallery.recompute_block_hash(session) == report.gallery_hashes[session]
    # Session-5 metrics are reproducible by embedding queries with the final
    # model and scoring them against the frozen blocks from f_1..f_5.
    ds = build_dataset(config.dataset)
    final_model = loaded["model"]
    sessions_of_records = {r.session for r in gallery.records}
    assert sessions_of_records == {1, 2, 3, 4, 5}
    test_items = [i for i in ds.test_items if i.class_id in set(final_model.class_registry)]
    embs = final_model.embed_many(np.stack([i.features for i in test_items]))
    hits = sum(1 for i, item in enumerate(test_items)
               if any(r.class_id == item.class_id for r in retrieve(gallery, embs[i], 1)))
    assert hits / len(test_items) == pytest.approx(report.sessions[-1].recalls[1], abs=1e-12)
    _ok(3, "backward consistency invariant",
        "(5 blocks bit-stable, final-model queries scored on all frozen blocks)")


def test_criterion_4_ordering_reproduction(benchmark):
    means = benchmark["means"]
    assert benchmark["core_elapsed_s"] < 300.0, \
        f"cvs/finetune/joint runs took {benchmark['core_elapsed_s']:.0f}s"
    assert means["cvs"] >= means["finetune"] + 0.02, \
        f"cvs {means['cvs']:.4f} vs finetune {means['finetune']:.4f}"
    assert means["cvs"] <= means["joint"] + 0.01, \
        f"cvs {means['cvs']:.4f} vs joint {means['joint']:.4f}"
    assert means["joint"] > 3.0 / 20.0  # far above 20-class chance
    _ok(4, "ordering reproduction",
        f"(joint {means['joint']:.3f} >= cvs {means['cvs']:.3f} >= "
        f"finetune {means['finetune']:.3f} + 0.02, {benchmark['core_elapsed_s']:.0f}s)")


def test_criterion_5_ablation_ordering(benchmark):
    means = benchmark["means"]
    assert means["intra_plus_data"] >= means["intra_only"], \
        (f"intra+data {means['intra_plus_data']:.4f} < intra alone "
         f"{means['intra_only']:.4f}")
    assert means["intra_plus_data"] >= means["intra_plus_data_noreplay"], \
        (f"intra+data {means['intra_plus_data']:.4f} < w/o replay "
         f"{means['intra_plus_data_noreplay']:.4f}")
    _ok(5, "ablation ordering",
        f"(intra+data {means['intra_plus_data']:.3f} >= intra {means['intra_only']:.3f}; "
        f"with replay >= w/o replay {means['intra_plus_data_noreplay']:.3f})")


def test_criterion_6_replay_budget_halving(benchmark):
    means = benchmark["means"]
    assert means["cvs_half_budget"] >= means["finetune"] + 0.02, \
        (f"half-budget cvs {means['cvs_half_budget']:.4f} vs finetune "
         f"{means['finetune']:.4f}")
    _ok(6, "replay budget halving",
        f"(half budget {means['cvs_half_budget']:.3f} >= finetune "
        f"{means['finetune']:.3f} + 0.02)")


def test_criterion_7_retrieval_metric_oracles():
    rng = np.random.default_rng(71)
    for trial in range(50):
        n = int(rng.integers(5, 51))
        k = int(rng.integers(1, 11))
        g = random_gallery(rng, n, dim=4, classes=int(rng.integers(2, 6)),
                           sessions=int(rng.integers(1, 4)))
        q = rng.normal(size=4)

        sims = [float(r.embedding @ q) for r in g.records]
        order = sorted(range(n), key=lambda i: (-sims[i], i))
        expected_top = [g.records[i].item_id for i in order[:k]]
        assert [r.item_id for r in retrieve(g, q, k)] == expected_top, f"trial {trial}"

        queries = [(rng.normal(size=4), int(rng.integers(0, 5))) for _ in range(8)]
        expected_recall = sum(
            1 for emb, cls in queries
            if any(g.records[i].class_id == cls
                   for i in sorted(range(n), key=lambda i: (-float(g.records[i].embedding @ emb), i))[:k])
        ) / len(queries)
        assert recall_at_k(g, queries, k) == expected_recall, f"trial {trial}"

        values = rng.uniform(size=int(rng.integers(1, 8))).tolist()
        assert average_recall(values) == float(sum(values) / len(values))

    for trial in range(50):
        dim = 4
        cols = rng.normal(size=(dim, int(rng.integers(2, 6))))
        state = identity_model(dim, cols)
        items = [DataItem(i, np.abs(rng.normal(size=dim)) + 0.01,
                          int(rng.integers(0, cols.shape[1]))) for i in range(10)]
        normalized = cols / np.linalg.norm(cols, axis=0, keepdims=True)
        correct = 0
        for item in items:
            f = item.features / np.linalg.norm(item.features)
            correct += int(np.argmax(f @ normalized)) == item.class_id
        assert classification_accuracy(state, items) == correct / len(items), f"trial {trial}"
    _ok(7, "retrieval metric oracles", "(50 random instances per metric, exact match)")


def test_criterion_8_determinism(tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    rep_a = run_experiment(benchmark_config("cvs", seed=103, out_dir=str(out_a)))
    rep_b = run_experiment(benchmark_config("cvs", seed=103, out_dir=str(out_b)))
    bytes_a = (out_a / "metrics.csv").read_bytes()
    assert bytes_a == (out_b / "metrics.csv").read_bytes()
    assert rep_a.gallery_hashes == rep_b.gallery_hashes
    _ok(8, "determinism", f"(metrics.csv {len(bytes_a)} bytes identical, hashes identical)")


def test_criterion_9_split_protocol_audits():
    # Disjoint: pairwise-disjoint class groups covering every class.
    ds100 = make_synthetic(100, 4, 10, 0.3, 0.0, seed=9)
    plan = disjoint_split(ds100, 5, np.random.default_rng(0))
    union = set()
    for i, a in enumerate(plan.sessions):
        for b in plan.sessions[i + 1:]:
            assert not (a.class_set & b.class_set)
        union |= a.class_set
    assert union == set(ds100.class_ids)

    # Blurry: per-class count conservation at 90/10 and 70/30.
    for num_classes, num_sessions, major in ((100, 5, 0.9), (200, 10, 0.7)):
        ds = make_synthetic(num_classes, 4, 25, 0.3, 0.0, seed=10)
        bplan = blurry_split(ds, num_sessions, major, np.random.default_rng(1))
        counts = {c: 0 for c in ds.class_ids}
        per_session = {c: [0] * num_sessions for c in ds.class_ids}
        for s_idx, spec in enumerate(bplan.sessions):
            for item_id in spec.train_ids:
                cls = ds.item(item_id).class_id
                counts[cls] += 1
                per_session[cls][s_idx] += 1
        class_sizes = {c: 0 for c in ds.class_ids}
        for item in ds.train_items:
            class_sizes[item.class_id] += 1
        for cls in ds.class_ids:
            assert counts[cls] == class_sizes[cls]
            assert max(per_session[cls]) == int(np.floor(major * class_sizes[cls] + 0.5))

    # General: cumulative class counts and the new/old ratio within one item.
    for s, c, m, l, num_classes in ((20, 20, 10, 5, 100), (20, 20, 30, 10, 200)):
        ds = make_synthetic(num_classes, 4, 10, 0.3, 0.0, seed=11)
        gplan = general_split(ds, s, c, m, l, np.random.default_rng(2))
        cumulative = [len(gplan.classes_through(j)) for j in range(1, l + 1)]
        assert cumulative == [s + c * i for i in range(l)]
        for spec in gplan.sessions[1:]:
            target = spec.new_count * m / (100.0 - m)
            assert abs(spec.old_count - target) <= 1.0, \
                (s, c, m, l, spec.session, spec.new_count, spec.old_count)
    _ok(9, "split protocol audits",
        "(disjointness, 90/10 and 70/30 conservation, (20,20,10,5) and (20,20,30,10) ratios)")
