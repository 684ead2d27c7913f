import numpy as np
import pytest

from continual_retrieval.errors import ContractError
from continual_retrieval.gallery import (EmbeddingRecord, GallerySet,
                                         average_recall,
                                         classification_accuracy,
                                         extract_and_append,
                                         gallery_from_payload,
                                         gallery_to_payload, recall_at_k,
                                         recalls_at, retrieve)
from continual_retrieval.sessions import DataItem

from conftest import identity_model


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def record(item_id, class_id, session, v):
    return EmbeddingRecord(item_id, class_id, session, unit(v))


def random_gallery(rng, n, dim=4, classes=3, sessions=1):
    g = GallerySet()
    per_session = max(1, n // sessions)
    item_id = 0
    for s in range(1, sessions + 1):
        block = []
        count = per_session if s < sessions else n - per_session * (sessions - 1)
        for _ in range(count):
            block.append(record(item_id, int(rng.integers(0, classes)), s,
                                rng.normal(size=dim)))
            item_id += 1
        g.append_block(s, block)
    return g


def test_append_session_one_matches_train_size():
    state = identity_model(3, np.eye(3))
    items = [DataItem(i, np.abs(np.random.default_rng(i).normal(size=3)), i % 2)
             for i in range(7)]
    g = GallerySet()
    extract_and_append(g, state, items, 1)
    assert len(g) == 7


def test_append_second_session_keeps_first_block_hash():
    state = identity_model(3, np.eye(3))
    rng = np.random.default_rng(0)
    first = [DataItem(i, np.abs(rng.normal(size=3)), 0) for i in range(4)]
    second = [DataItem(10 + i, np.abs(rng.normal(size=3)), 1) for i in range(4)]
    g = GallerySet()
    extract_and_append(g, state, first, 1)
    h1 = g.block_hash(1)
    extract_and_append(g, state, second, 2)
    assert g.block_hash(1) == h1
    assert g.recompute_block_hash(1) == h1
    assert g.verify_block_hashes()


def test_append_duplicate_item_id_errors():
    g = GallerySet()
    g.append_block(1, [record(5, 0, 1, [1, 0])])
    with pytest.raises(ContractError):
        g.append_block(2, [record(5, 1, 2, [0, 1])])


def test_append_same_session_twice_errors():
    g = GallerySet()
    g.append_block(1, [record(0, 0, 1, [1, 0])])
    with pytest.raises(ContractError):
        g.append_block(1, [record(1, 0, 1, [0, 1])])


def test_gallery_grows_cumulatively_over_five_sessions():
    state = identity_model(3, np.eye(3))
    rng = np.random.default_rng(1)
    g = GallerySet()
    total = 0
    for session in range(1, 6):
        count = int(rng.integers(2, 6))
        items = [DataItem(total + i, np.abs(rng.normal(size=3)), 0) for i in range(count)]
        extract_and_append(g, state, items, session)
        total += count
        assert len(g) == total


def test_retrieve_exact_duplicate_ranks_first():
    rng = np.random.default_rng(2)
    g = random_gallery(rng, 12)
    target = g.records[7]
    top = retrieve(g, target.embedding, 1)
    assert top[0] is target


def test_retrieve_k_beyond_size_returns_full_ranking():
    rng = np.random.default_rng(3)
    g = random_gallery(rng, 5)
    out = retrieve(g, rng.normal(size=4), 50)
    assert len(out) == 5
    assert {r.item_id for r in out} == {r.item_id for r in g.records}


def test_retrieve_matches_exhaustive_sort_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        g = random_gallery(rng, 20)
        q = rng.normal(size=4)
        got = [r.item_id for r in retrieve(g, q, 20)]
        sims = [float(r.embedding @ (q / np.linalg.norm(q))) for r in g.records]
        expected = [g.records[i].item_id
                    for i in sorted(range(20), key=lambda i: (-sims[i], i))]
        assert got == expected


def test_retrieve_is_invariant_to_query_rescaling():
    rng = np.random.default_rng(5)
    g = random_gallery(rng, 15)
    q = rng.normal(size=4)
    a = [r.item_id for r in retrieve(g, q, 15)]
    b = [r.item_id for r in retrieve(g, 37.5 * q, 15)]
    assert a == b


def test_retrieve_breaks_ties_by_insertion_order():
    g = GallerySet()
    v = unit([1.0, 1.0])
    g.append_block(1, [record(0, 0, 1, v), record(1, 1, 1, v), record(2, 0, 1, [1, -1])])
    out = retrieve(g, v, 2)
    assert [r.item_id for r in out] == [0, 1]


def test_retrieve_empty_gallery_errors():
    with pytest.raises(ContractError):
        retrieve(GallerySet(), np.ones(3), 1)


def test_recall_perfect_with_duplicate_embeddings():
    rng = np.random.default_rng(6)
    g = random_gallery(rng, 10)
    queries = [(r.embedding, r.class_id) for r in g.records]
    assert recall_at_k(g, queries, 1) == 1.0


def test_recall_exhaustive_k_is_one_when_class_present():
    rng = np.random.default_rng(7)
    g = random_gallery(rng, 10, classes=2)
    queries = [(rng.normal(size=4), 0), (rng.normal(size=4), 1)]
    assert recall_at_k(g, queries, len(g.records)) == 1.0


def test_recall_matches_hand_count():
    g = GallerySet()
    g.append_block(1, [record(0, 0, 1, [1, 0]), record(1, 1, 1, [0, 1]),
                       record(2, 2, 1, [-1, 0])])
    queries = [
        (unit([1, 0.1]), 0),    # nearest is class 0 -> hit
        (unit([0.1, 1]), 0),    # nearest is class 1 -> miss
        (unit([-1, 0.1]), 2),   # nearest is class 2 -> hit
        (unit([1, 0]), 1),      # miss
        (unit([0, 1]), 1),      # hit
    ]
    assert recall_at_k(g, queries, 1) == pytest.approx(3 / 5)


def test_recall_monotone_in_k():
    rng = np.random.default_rng(8)
    g = random_gallery(rng, 30, classes=4)
    queries = [(rng.normal(size=4), int(rng.integers(0, 4))) for _ in range(12)]
    values = [recall_at_k(g, queries, k) for k in range(1, 31)]
    assert all(a <= b + 1e-15 for a, b in zip(values, values[1:]))
    shared = recalls_at(g, queries, (1, 2, 4))
    assert shared[1] == values[0] and shared[2] == values[1] and shared[4] == values[3]


def test_average_recall_cases():
    assert average_recall([0.7, 0.7, 0.7]) == pytest.approx(0.7)
    assert average_recall([0.8, 0.6]) == pytest.approx(0.7)
    rng = np.random.default_rng(9)
    vals = rng.uniform(size=5).tolist()
    assert average_recall(vals) == pytest.approx(float(np.mean(vals)))
    with pytest.raises(ContractError):
        average_recall([])


def test_classification_accuracy_perfect_alignment():
    state = identity_model(3, np.eye(3))
    items = [DataItem(i, np.eye(3)[i], i) for i in range(3)]
    assert classification_accuracy(state, items) == 1.0


def test_classification_accuracy_single_wrong_is_zero():
    cols = np.stack([unit([1, 0, 0]), unit([0, 1, 0])], axis=1)
    state = identity_model(3, cols)
    items = [DataItem(0, np.array([0.0, 1.0, 0.0]), 0)]  # argmax says class 1
    assert classification_accuracy(state, items) == 0.0


def test_classification_accuracy_matches_argmax_oracle():
    rng = np.random.default_rng(10)
    cols = rng.normal(size=(4, 5))
    state = identity_model(4, cols)
    items = [DataItem(i, np.abs(rng.normal(size=4)) + 0.01, int(rng.integers(0, 5)))
             for i in range(10)]
    normalized = cols / np.linalg.norm(cols, axis=0, keepdims=True)
    correct = 0
    for item in items:
        f = item.features / np.linalg.norm(item.features)
        correct += int(np.argmax(f @ normalized)) == item.class_id
    assert classification_accuracy(state, items) == pytest.approx(correct / 10)


def test_classification_accuracy_unregistered_class_errors():
    state = identity_model(3, np.eye(3))
    with pytest.raises(ContractError):
        classification_accuracy(state, [DataItem(0, np.ones(3), 9)])


def test_embeddings_are_frozen_after_append():
    g = GallerySet()
    g.append_block(1, [record(0, 0, 1, [1, 0])])
    with pytest.raises(ValueError):
        g.records[0].embedding[0] = 3.0


def test_through_session_prefix_view():
    rng = np.random.default_rng(11)
    g = random_gallery(rng, 12, sessions=3)
    sub = g.through_session(2)
    assert {r.session for r in sub.records} == {1, 2}
    assert sub.block_hash(1) == g.block_hash(1)


def test_gallery_payload_roundtrip_preserves_hashes():
    rng = np.random.default_rng(12)
    g = random_gallery(rng, 9, sessions=3)
    restored = gallery_from_payload(gallery_to_payload(g))
    assert len(restored) == len(g)
    for s in g.sessions():
        assert restored.block_hash(s) == g.block_hash(s)
