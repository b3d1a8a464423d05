import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cmivf.errors import DimensionMismatch, EmptyResult, NotADistribution, TooFewAugmentations
from cmivf.ivf import build_index
from cmivf.kmeans import run_kmeans
from cmivf.pipeline import (
    DatasetManifest,
    augmentation_loss,
    cluster_select,
    construct_dataset,
    cosine_pseudo_label,
    cross_entropy,
    diversified_retrieve,
    diversity_loss,
    rank_pseudo_label,
    retrieved_ids,
    select_augmentations,
)
from cmivf.synth import GapConfig, gen_gap_dataset, gen_hub_scenario, gen_label_augmentations
from cmivf.vecspace import EmbeddingSet, RetrievalResult, l2_normalize, make_rng


def _as_dict(rows):
    return {int(g): int(y) for g, y in rows}


# ---------------------------------------------------------------- augmentation selection loss

def test_augmentation_loss_semantics():
    labels, augs, clusters = gen_label_augmentations(64, 8, 4, d=32, seed=2)
    scores = select_augmentations(labels, augs, k2=4, m=3, seed=0)
    assert scores[0].loss == 0
    assert scores[-1].loss == 4
    assert all(isinstance(s.loss, int) and 0 <= s.loss <= 4 for s in scores)
    assert sum(s.selected for s in scores) == 3
    chosen = sorted(scores, key=lambda s: (s.loss, s.aug_id))[:3]
    assert {s.aug_id for s in chosen} == {s.aug_id for s in scores if s.selected}


def test_augmentation_loss_singletons_and_strictness():
    lab = l2_normalize(np.eye(3))
    clusters = np.array([0, 1, 2])
    moved = l2_normalize(np.ones((3, 3)))
    assert augmentation_loss(lab.data, moved.data, clusters) == 0
    two = np.array([0, 0, 1])
    assert augmentation_loss(lab.data, lab.data, two) == 0
    assert augmentation_loss(lab.data, moved.data, two) == 1


def test_augmentation_scores_permutation_equivariant():
    labels, augs, _ = gen_label_augmentations(48, 6, 3, d=16, seed=4)
    base = [s.loss for s in select_augmentations(labels, augs, k2=3, m=2)]
    perm = [5, 2, 0, 4, 1, 3]
    permuted = [s.loss for s in select_augmentations(labels, [augs[i] for i in perm], k2=3, m=2)]
    assert permuted == [base[i] for i in perm]
    # cluster relabelling does not change the score
    _, _, clusters = gen_label_augmentations(48, 6, 3, d=16, seed=4)
    relabeled = (clusters + 1) % 3
    for a in augs:
        assert augmentation_loss(labels.data, a.data, clusters) == augmentation_loss(labels.data, a.data, relabeled)


def test_select_errors():
    labels, augs, _ = gen_label_augmentations(16, 4, 2, d=8)
    with pytest.raises(TooFewAugmentations):
        select_augmentations(labels, augs, k2=2, m=5)
    with pytest.raises(DimensionMismatch):
        select_augmentations(labels, augs[:3] + [l2_normalize(np.ones((15, 8)))], k2=2, m=2)


# ---------------------------------------------------------------- labeling

def _hand_result():
    ids = np.array([[0, 1, 2], [0, 2, 1]])
    sims = np.array([[0.9, 0.8, 0.1], [0.85, 0.3, 0.2]])
    return RetrievalResult(ids=ids, sims=sims, labels=np.array([0, 1]))


def test_rank_labeling_hand_example():
    assert _as_dict(rank_pseudo_label(_hand_result(), 2)) == {0: 0, 1: 0, 2: 1}


def test_cosine_labeling_hand_example():
    assert _as_dict(cosine_pseudo_label(_hand_result(), 2)) == {0: 0, 1: 0, 2: 1}


def test_rank_ties_then_lower_label():
    res = RetrievalResult(ids=np.array([[5], [5], [5]]), sims=np.array([[0.5], [0.7], [0.7]]),
                          labels=np.array([2, 1, 0]))
    assert _as_dict(rank_pseudo_label(res, 3)) == {5: 0}
    assert _as_dict(cosine_pseudo_label(res, 3)) == {5: 0}


@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 10_000))
def test_labelers_agree_on_disjoint_lists(nq, topk, seed):
    r = np.random.default_rng(seed)
    ids = r.permutation(nq * topk).reshape(nq, topk)
    sims = -np.sort(-r.random((nq, topk)), axis=1)
    res = RetrievalResult(ids=ids, sims=sims, labels=r.integers(0, 4, nq))
    np.testing.assert_array_equal(rank_pseudo_label(res, 4), cosine_pseudo_label(res, 4))


def test_labeling_errors():
    empty = RetrievalResult(ids=np.full((1, 2), -1), sims=np.full((1, 2), np.nan))
    with pytest.raises(EmptyResult):
        rank_pseudo_label(empty, 1)
    with pytest.raises(EmptyResult):
        cosine_pseudo_label(_hand_result(), 1)


def test_hub_rank_vs_cosine():
    texts, gallery, _ = gen_hub_scenario(10, 0, d=32, seed=0)
    cent, _ = run_kmeans(gallery, 8, seed=0)
    idx = build_index(gallery, cent)
    res = diversified_retrieve(idx, [texts], n_neighbors=64, n_probe=8, min_similarity=None)
    rank = _as_dict(rank_pseudo_label(res, 10))
    cos = _as_dict(cosine_pseudo_label(res, 10))
    assert sum(v == 0 for v in rank.values()) < sum(v == 0 for v in cos.values())


def test_hub_orthogonalized_control():
    texts, gallery, _ = gen_hub_scenario(10, 0, d=32, seed=0, orthogonalize_hub=True)
    cent, _ = run_kmeans(gallery, 8, seed=0)
    res = diversified_retrieve(build_index(gallery, cent), [texts], 64, 8, min_similarity=None)
    rank = _as_dict(rank_pseudo_label(res, 10))
    cos = _as_dict(cosine_pseudo_label(res, 10))
    agree = np.mean([rank[g] == cos[g] for g in rank])
    assert agree >= 0.98


# ---------------------------------------------------------------- retrieval

@pytest.fixture(scope="module")
def gap_index():
    b = gen_gap_dataset(GapConfig(n_concepts=300, per_concept_images=40, d=32, seed=0))
    cent, _ = run_kmeans(b.gallery, 256, seed=0)
    return b, build_index(b.gallery, cent)


def test_retrieve_single_query_is_plain_search(gap_index):
    b, idx = gap_index
    q = b.text_queries.take([0])
    res = diversified_retrieve(idx, [q], 16, 4, min_similarity=None)
    from cmivf.ivf import search
    np.testing.assert_array_equal(res.ids, search(idx, q, 4, 16).ids)
    assert res.labels.tolist() == [0] and res.augs.tolist() == [0]
    twice = diversified_retrieve(idx, [q, q], 16, 4, min_similarity=None)
    np.testing.assert_array_equal(twice.ids[0], twice.ids[1])
    np.testing.assert_array_equal(retrieved_ids(twice), retrieved_ids(res))


def test_retrieve_similarity_filter(gap_index):
    b, idx = gap_index
    res = diversified_retrieve(idx, [b.text_queries.take(np.arange(5))], 200, 8, min_similarity=0.25)
    kept = res.ids >= 0
    assert np.all(res.sims[kept] >= 0.25)
    assert np.all(np.isnan(res.sims[~kept]))
    # survivors keep their original rank positions
    raw = diversified_retrieve(idx, [b.text_queries.take(np.arange(5))], 200, 8, min_similarity=None)
    np.testing.assert_array_equal(res.ids[kept], raw.ids[kept])


def test_retrieve_augmentations_diversify(gap_index):
    b, idx = gap_index
    cell = idx.bucket_of()
    lab = b.text_queries.take(np.arange(20))
    rng = make_rng(0, 5)
    augs = [lab] + [l2_normalize(lab.data + 0.5 / math.sqrt(32) * rng.standard_normal(lab.data.shape))
                    for _ in range(15)]
    one = np.unique(cell[retrieved_ids(diversified_retrieve(idx, [lab], 64, 8))])
    many = np.unique(cell[retrieved_ids(diversified_retrieve(idx, augs, 64, 8))])
    assert len(many) >= 2 * len(one)


def test_retrieve_errors(gap_index):
    b, idx = gap_index
    with pytest.raises(EmptyResult):
        diversified_retrieve(idx, [])
    with pytest.raises(DimensionMismatch):
        diversified_retrieve(idx, [b.text_queries.take([0, 1]), b.text_queries.take([0])])


# ---------------------------------------------------------------- cluster selection

def test_cluster_select_exact_k1_group():
    rng = np.random.default_rng(0)
    g = l2_normalize(rng.standard_normal((10, 4)))
    labeled = np.stack([np.arange(10), np.zeros(10, int)], axis=1)
    m = cluster_select(labeled, g, k1=10)
    assert sorted(m.ids.tolist()) == list(range(10))


def test_cluster_select_duplicate_families():
    rng = np.random.default_rng(1)
    fam = l2_normalize(rng.standard_normal((6, 8)))
    g = EmbeddingSet(np.repeat(fam.data, 10, axis=0), normalized=True)
    labeled = np.stack([np.arange(60), np.zeros(60, int)], axis=1)
    m = cluster_select(labeled, g, k1=4, seed=3)
    families = m.ids // 10
    assert len(m.ids) == 4 and len(np.unique(families)) == 4


def test_cluster_select_balance_and_empty_labels():
    rng = np.random.default_rng(2)
    g = l2_normalize(rng.standard_normal((500, 8)))
    lab = np.concatenate([np.zeros(200, int), np.ones(100, int), np.full(20, 3)])
    labeled = np.stack([np.arange(320), lab], axis=1)
    m = cluster_select(labeled, g, k1=48, n_labels=4)
    assert m.per_label_counts == {0: 48, 1: 48, 3: 20}
    assert m.empty_labels == [2]
    assert len(np.unique(m.ids)) == len(m.ids)
    with pytest.raises(ValueError):
        cluster_select(labeled, g, k1=0)


def test_manifest_json(tmp_path):
    m = DatasetManifest(np.array([4, 2]), np.array([0, 1]), np.array([0, 0]), {0: 1, 1: 1}, {"k1": 5})
    m.save(tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["entries"] == [{"id": 4, "label": 0, "cluster": 0}, {"id": 2, "label": 1, "cluster": 0}]
    assert doc["per_label_counts"] == {"0": 1, "1": 1} and doc["params"] == {"k1": 5}
    bad = DatasetManifest(np.array([4, 4]), np.array([0, 1]), np.array([0, 0]), {0: 1, 1: 1})
    with pytest.raises(AssertionError):
        bad.check(5)


def test_construct_dataset_deterministic(gap_index):
    b, idx = gap_index
    queries = [b.text_queries.take(np.arange(30))]
    a = construct_dataset(idx, queries, n_neighbors=64, n_probe=8, k1=16, seed=1)
    c = construct_dataset(idx, queries, n_neighbors=64, n_probe=8, k1=16, seed=1)
    assert a.to_json() == c.to_json()
    assert max(a.per_label_counts.values()) <= 16


# ---------------------------------------------------------------- diversity loss

def test_loss_hand_example():
    assert diversity_loss([[0.5, 0.5]], [1.0, 0.0], [[0.5, 0.5]], lam=0.0) == pytest.approx(-math.log(0.5), abs=1e-6)


def test_loss_point_mass_zero():
    assert diversity_loss([[1.0, 0.0]], [1.0, 0.0], [[1.0, 0.0]], lam=0.2) == 0.0


@given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 10_000))
def test_loss_lambda_limits(c, m, seed):
    r = np.random.default_rng(seed)
    preds = r.dirichlet(np.ones(c), m)
    init = r.dirichlet(np.ones(c), m)
    y = np.eye(c)[r.integers(c)]
    y2 = np.eye(c)[r.integers(c)]
    hard = float(np.mean(-np.log(preds[:, np.argmax(y)])))
    assert abs(diversity_loss(preds, y, init, lam=0.0) - hard) < 1e-9
    assert abs(diversity_loss(preds, y, init, lam=1.0) - diversity_loss(preds, y2, init, lam=1.0)) < 1e-12
    assert diversity_loss(preds, y, init) >= 0


def test_loss_errors():
    with pytest.raises(NotADistribution):
        diversity_loss([[0.6, 0.6]], [1.0, 0.0], [[0.5, 0.5]])
    with pytest.raises(NotADistribution):
        diversity_loss([[0.5, 0.5]], [1.0, 0.0, 0.0], [[0.5, 0.5]])
    with pytest.raises(NotADistribution):
        diversity_loss([[1.5, -0.5]], [1.0, 0.0], [[0.5, 0.5]])
    with pytest.raises(ValueError):
        diversity_loss([[0.5, 0.5]], [1.0, 0.0], [[0.5, 0.5]], lam=1.5)
    assert cross_entropy(np.array([[0.0, 1.0]]), np.array([[0.0, 1.0]]))[0] == 0.0
