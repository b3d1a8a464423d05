"""Retrieval-side dataset construction.

1. ``select_augmentations`` keeps the label augmentations that do not make
   labels inside any label cluster more similar to each other.
2. ``diversified_retrieve`` queries the index once per (augmentation, label).
3. ``rank_pseudo_label`` gives each retrieved image the label of the query
   that ranked it best (``cosine_pseudo_label`` is the similarity baseline).
4. ``cluster_select`` deduplicates and balances each label group by picking
   one random member from each of up to ``k1`` k-means clusters.

``diversity_loss`` is the finetuning objective, provided as a pure function.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyResult, NotADistribution, TooFewAugmentations
from .ivf import IvfIndex, search
from .kmeans import assign, assign_nonempty, run_kmeans
from .vecspace import EmbeddingSet, RetrievalResult, as_matrix, make_rng

MIN_SIMILARITY = 0.25
DEFAULT_LAMBDA = 0.2


# --------------------------------------------------------------------------
# step 1a: augmentation selection


@dataclass
class AugmentationScore:
    aug_id: int
    loss: int
    selected: bool = False


def _pair_sum(x: np.ndarray) -> float:
    # sum over i < j of <x_i, x_j>
    x = x.astype(np.float64)
    total = x.sum(axis=0)
    return 0.5 * (float(total @ total) - float(np.einsum("ij,ij->", x, x)))


def augmentation_loss(labels: np.ndarray, augmented: np.ndarray, clusters: np.ndarray) -> int:
    """Number of label clusters whose within-cluster pairwise similarity rises."""
    loss = 0
    for j in np.unique(clusters):
        members = np.flatnonzero(clusters == j)
        if len(members) < 2:
            continue
        if _pair_sum(augmented[members]) > _pair_sum(labels[members]):
            loss += 1
    return loss


def select_augmentations(labels: EmbeddingSet, augmented: Sequence[EmbeddingSet], k2: int = 16,
                         m: int = 16, seed: int = 0) -> List[AugmentationScore]:
    if m < 1 or len(augmented) < m:
        raise TooFewAugmentations(f"need at least m={m} augmentations, got {len(augmented)}")
    lab = as_matrix(labels)
    for i, aug in enumerate(augmented):
        if as_matrix(aug).shape != lab.shape:
            raise DimensionMismatch(f"augmentation {i} has shape {as_matrix(aug).shape}, labels {lab.shape}")
    cent, _ = run_kmeans(lab, min(k2, lab.shape[0]), seed=seed)
    clusters = assign(lab, cent)
    scores = [AugmentationScore(i, augmentation_loss(lab, as_matrix(a), clusters))
              for i, a in enumerate(augmented)]
    for s in sorted(scores, key=lambda s: (s.loss, s.aug_id))[:m]:
        s.selected = True
    return scores


# --------------------------------------------------------------------------
# step 1b: retrieval


def diversified_retrieve(index: IvfIndex, label_queries: Sequence[EmbeddingSet], n_neighbors: int = 64,
                         n_probe: int = 8, min_similarity: Optional[float] = MIN_SIMILARITY
                         ) -> RetrievalResult:
    """Top ``n_neighbors`` per query; query ``a * c + i`` is label ``i`` under augmentation ``a``.

    Hits with similarity below ``min_similarity`` are blanked (id -1) in place,
    so the column index of every surviving hit is still its retrieval rank - 1.
    """
    if not label_queries:
        raise EmptyResult("no query sets given")
    c = label_queries[0].n
    if any(q.n != c for q in label_queries):
        raise DimensionMismatch("every augmentation must provide one query per label")
    queries = np.concatenate([as_matrix(q) for q in label_queries])
    res = search(index, queries, n_probe, n_neighbors)
    if min_similarity is not None:
        low = ~(res.sims >= min_similarity)
        res.ids[low] = -1
        res.sims[low] = np.nan
    res.labels = np.tile(np.arange(c), len(label_queries))
    res.augs = np.repeat(np.arange(len(label_queries)), c)
    return res


def retrieved_ids(result: RetrievalResult) -> np.ndarray:
    """Deduplicated ids of all retrieved items."""
    ids = result.ids[result.ids >= 0]
    return np.unique(ids)


def _observations(result: RetrievalResult, c: int):
    labels = result.labels if result.labels is not None else np.arange(result.n_queries)
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise EmptyResult(f"query labels must lie in [0, {c})")
    rows, cols = np.nonzero(result.ids >= 0)
    if rows.size == 0:
        raise EmptyResult("retrieval result holds no hits")
    return result.ids[rows, cols], cols + 1, result.sims[rows, cols], labels[rows]


def _first_per_id(gid, order, lab):
    gid_sorted = gid[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = gid_sorted[1:] != gid_sorted[:-1]
    pick = order[first]
    return np.stack([gid[pick], lab[pick]], axis=1)


def rank_pseudo_label(result: RetrievalResult, c: int) -> np.ndarray:
    """(gallery id, label) rows, labelled by the query that ranks each image best.

    Ties on rank go to the higher similarity, then to the lower label id.
    """
    gid, rank, sim, lab = _observations(result, c)
    order = np.lexsort((lab, -sim, rank, gid))
    return _first_per_id(gid, order, lab)


def cosine_pseudo_label(result: RetrievalResult, c: int) -> np.ndarray:
    """(gallery id, label) rows, labelled by the most similar query; ties to lower label."""
    gid, _, sim, lab = _observations(result, c)
    order = np.lexsort((lab, -sim, gid))
    return _first_per_id(gid, order, lab)


# --------------------------------------------------------------------------
# step 3: balanced selection


@dataclass
class DatasetManifest:
    ids: np.ndarray
    labels: np.ndarray
    clusters: np.ndarray
    per_label_counts: Dict[int, int]
    params: dict = field(default_factory=dict)
    empty_labels: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    def check(self, k1: int) -> None:
        if len(np.unique(self.ids)) != len(self.ids):
            raise AssertionError("manifest contains duplicate gallery ids")
        if self.per_label_counts and max(self.per_label_counts.values()) > k1:
            raise AssertionError(f"a label exceeds k1={k1} entries")

    def to_json(self) -> dict:
        return {
            "entries": [{"id": int(i), "label": int(y), "cluster": int(c)}
                        for i, y, c in zip(self.ids, self.labels, self.clusters)],
            "params": self.params,
            "per_label_counts": {str(k): int(v) for k, v in sorted(self.per_label_counts.items())},
            "empty_labels": [int(y) for y in self.empty_labels],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def cluster_select(labeled: np.ndarray, gallery_vectors, k1: int, seed: int = 0,
                   n_labels: Optional[int] = None, iters: int = 10) -> DatasetManifest:
    """One random member from each of ``min(k1, distinct vectors)`` clusters per label."""
    if k1 < 1:
        raise ValueError(f"k1 must be >= 1, got {k1}")
    labeled = np.asarray(labeled, dtype=np.int64).reshape(-1, 2)
    g = as_matrix(gallery_vectors)
    spherical = isinstance(gallery_vectors, EmbeddingSet) and gallery_vectors.normalized
    if n_labels is None:
        n_labels = int(labeled[:, 1].max()) + 1 if len(labeled) else 0
    ids_out, lab_out, cl_out = [], [], []
    counts: Dict[int, int] = {}
    empty = []
    for y in range(n_labels):
        members = np.sort(labeled[labeled[:, 1] == y, 0])
        if len(members) == 0:
            empty.append(y)
            continue
        vecs = g[members]
        n_distinct = len(np.unique(vecs, axis=0))
        kk = min(k1, n_distinct)
        if kk == len(members):
            chosen, clusters = members, np.arange(len(members))
        else:
            cent, _ = run_kmeans(vecs, kk, iters, seed=seed + y, spherical=spherical)
            cell, _ = assign_nonempty(vecs, cent, spherical=spherical)
            rng = make_rng(seed, y)
            chosen, clusters = [], []
            for j in range(kk):
                pool = members[cell == j]
                if len(pool):
                    chosen.append(int(pool[rng.integers(len(pool))]))
                    clusters.append(j)
            chosen, clusters = np.array(chosen, dtype=np.int64), np.array(clusters, dtype=np.int64)
        ids_out.append(chosen)
        lab_out.append(np.full(len(chosen), y))
        cl_out.append(clusters)
        counts[y] = len(chosen)
    cat = (lambda parts: np.concatenate(parts) if parts else np.zeros(0, np.int64))
    manifest = DatasetManifest(cat(ids_out), cat(lab_out), cat(cl_out), counts,
                               params={"k1": k1, "seed": seed}, empty_labels=empty)
    manifest.check(k1)
    return manifest


# --------------------------------------------------------------------------
# loss


def _check_dist(p: np.ndarray, name: str):
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise NotADistribution(f"{name} has negative or non-finite entries")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise NotADistribution(f"{name} rows must sum to 1, got {sums}")


def cross_entropy(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    # 0 * log 0 counts as 0; a zero prediction under positive target mass gives inf
    with np.errstate(divide="ignore"):
        logp = np.log(np.where(target > 0, pred, 1.0))
    return -np.sum(target * logp, axis=-1)


def diversity_loss(preds, pseudo_label, initial_preds, lam: float = DEFAULT_LAMBDA) -> float:
    """Mean over augmentations of CE(pred, (1 - lam) * y + lam * initial_pred)."""
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    init = np.atleast_2d(np.asarray(initial_preds, dtype=np.float64))
    y = np.asarray(pseudo_label, dtype=np.float64)
    if preds.shape != init.shape or preds.shape[1] != y.shape[-1]:
        raise NotADistribution("preds, initial_preds and pseudo_label must share the class count")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    _check_dist(preds, "preds")
    _check_dist(init, "initial_preds")
    _check_dist(y, "pseudo_label")
    target = (1.0 - lam) * y + lam * init
    return float(np.mean(cross_entropy(preds, target)))


# --------------------------------------------------------------------------
# end to end


def gallery_from_index(index: IvfIndex) -> EmbeddingSet:
    """Stored vectors reordered by gallery id."""
    out = np.empty_like(index.vectors)
    out[index.ids] = index.vectors
    norms = np.linalg.norm(out.astype(np.float64), axis=1)
    return EmbeddingSet(out, normalized=bool(np.all(np.abs(norms - 1) < 1e-4)))


def construct_dataset(index: IvfIndex, label_queries: Sequence[EmbeddingSet], n_neighbors: int = 64,
                      n_probe: int = 8, k1: int = 96, seed: int = 0, labeler: str = "rank",
                      min_similarity: Optional[float] = MIN_SIMILARITY) -> DatasetManifest:
    res = diversified_retrieve(index, label_queries, n_neighbors, n_probe, min_similarity)
    c = label_queries[0].n
    label_fn = {"rank": rank_pseudo_label, "cosine": cosine_pseudo_label}[labeler]
    labeled = label_fn(res, c)
    manifest = cluster_select(labeled, gallery_from_index(index), k1, seed, n_labels=c)
    manifest.params.update(n_neighbors=n_neighbors, n_probe=n_probe, m=len(label_queries),
                           labeler=labeler, min_similarity=min_similarity,
                           retrieved=int(len(retrieved_ids(res))))
    return manifest
