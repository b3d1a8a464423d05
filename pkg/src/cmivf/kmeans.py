"""Spherical k-means and paired k-means.

Paired k-means assigns the nearest image of every text query to a cell, then
moves each centroid to the normalized mean of the *text* vectors whose
paired image landed in that cell. Centroids therefore live in query space
while the cells still partition the image gallery.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import DimensionMismatch, EmptyPairs, InvalidK
from .io import write_cmeb
from .vecspace import EmbeddingSet, as_matrix, exact_nn, make_rng, sq_dists

DEFAULT_ITERS = 10
_ASSIGN_BLOCK = 16_000_000


class Centroids(EmbeddingSet):
    """k x d centroid matrix; ``normalized`` is set for spherical variants."""

    @property
    def k(self) -> int:
        return self.n


@dataclass(eq=False)
class PairedSet:
    """Text queries aligned with the id of their exact nearest gallery image."""

    text: EmbeddingSet
    image_nn_ids: np.ndarray
    gallery_ref: str = ""

    def __post_init__(self):
        self.image_nn_ids = np.asarray(self.image_nn_ids, dtype=np.int64)
        if self.image_nn_ids.shape != (self.text.n,):
            raise EmptyPairs(
                f"need one image id per text row, got {self.image_nn_ids.shape} for {self.text.n} rows"
            )

    @classmethod
    def from_gallery(cls, text: EmbeddingSet, gallery: EmbeddingSet, gallery_ref: str = "") -> "PairedSet":
        nn = exact_nn(text, gallery, 1).ids[:, 0]
        return cls(text=text, image_nn_ids=nn, gallery_ref=gallery_ref)

    def __len__(self) -> int:
        return self.text.n


@dataclass
class IterRecord:
    iteration: int
    l_kmeans: float
    l_crossmodal: Optional[float]
    empty_clusters_reseeded: int


@dataclass
class TrainLog:
    records: List[IterRecord] = field(default_factory=list)
    initial: Optional[IterRecord] = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final(self) -> IterRecord:
        return self.records[-1]

    def l_kmeans(self) -> np.ndarray:
        return np.array([r.l_kmeans for r in self.records])

    def l_crossmodal(self) -> np.ndarray:
        return np.array([np.nan if r.l_crossmodal is None else r.l_crossmodal for r in self.records])


# --------------------------------------------------------------------------
# assignment and objectives


def _assign(points: np.ndarray, centroids: np.ndarray):
    """Nearest centroid per point (ties to lower id) and the squared distance."""
    if points.shape[1] != centroids.shape[1]:
        raise DimensionMismatch(f"points d={points.shape[1]} vs centroids d={centroids.shape[1]}")
    c64 = centroids.astype(np.float64)
    c_sq = np.einsum("ij,ij->i", c64, c64)
    labels = np.empty(points.shape[0], dtype=np.int64)
    dist = np.empty(points.shape[0], dtype=np.float64)
    block = max(1, _ASSIGN_BLOCK // max(1, centroids.shape[0]))
    for start in range(0, points.shape[0], block):
        dd = sq_dists(points[start:start + block], c64, c_sq)
        lab = np.argmin(dd, axis=1)
        labels[start:start + block] = lab
        dist[start:start + block] = dd[np.arange(dd.shape[0]), lab]
    return labels, dist


def assign(points, centroids) -> np.ndarray:
    return _assign(as_matrix(points), as_matrix(centroids))[0]


def objective_kmeans(points, centroids) -> float:
    return float(np.mean(_assign(as_matrix(points), as_matrix(centroids))[1]))


def objective_crossmodal(pairs: PairedSet, gallery, centroids) -> float:
    c = as_matrix(centroids)
    g = as_matrix(gallery)
    if pairs.text.d != c.shape[1] or g.shape[1] != c.shape[1]:
        raise DimensionMismatch("pairs, gallery and centroids must share d")
    text_cell = assign(pairs.text, c)
    image_cell = assign(g[pairs.image_nn_ids], c)
    return float(np.mean(text_cell != image_cell))


# --------------------------------------------------------------------------
# training helpers


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; returns the chosen row indices."""
    n = x.shape[0]
    x64 = x.astype(np.float64)
    x_sq = np.einsum("ij,ij->i", x64, x64)
    chosen = [int(rng.integers(n))]
    d2 = sq_dists(x64[chosen], x64, x_sq)[0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than k: fall back to unused rows in order
            unused = np.setdiff1d(np.arange(n), chosen)
            nxt = int(unused[0])
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        np.minimum(d2, sq_dists(x64[nxt:nxt + 1], x64, x_sq)[0], out=d2)
    return np.array(chosen, dtype=np.int64)


def _cluster_sums(x: np.ndarray, labels: np.ndarray, k: int):
    counts = np.bincount(labels, minlength=k)
    sums = np.empty((k, x.shape[1]), dtype=np.float64)
    for j in range(x.shape[1]):
        sums[:, j] = np.bincount(labels, weights=x[:, j].astype(np.float64), minlength=k)
    return sums, counts


def _update(x, labels, k, spherical):
    sums, counts = _cluster_sums(x, labels, k)
    empty = counts == 0
    if spherical:
        norms = np.linalg.norm(sums, axis=1)
        empty |= norms < 1e-12
        new = sums / np.where(empty, 1.0, norms)[:, None]
    else:
        new = sums / np.maximum(counts, 1)[:, None]
    return new, np.flatnonzero(empty)


def _farthest(dist: np.ndarray, count: int) -> np.ndarray:
    # stable sort on -dist: equal distances keep lower index first
    return np.argsort(-dist, kind="stable")[:count]


def _check_k(k, limit, what):
    if not 1 <= k <= limit:
        raise InvalidK(f"k must be in [1, {limit}] ({what}), got {k}")


def assign_nonempty(points, centroids, spherical: bool = True, max_rounds: int = 50):
    """Assign points, moving empty centroids onto far-away points until every cell is used.

    Only possible when there are at least k distinct points; otherwise some
    cells stay empty. Returns (labels, centroids as float64 array).
    """
    x = as_matrix(points)
    c = as_matrix(centroids).astype(np.float64).copy()
    labels, dist = _assign(x, c)
    for _ in range(max_rounds):
        empty = np.flatnonzero(np.bincount(labels, minlength=c.shape[0]) == 0)
        if len(empty) == 0 or not np.any(dist > 0):
            break
        donors = _farthest(dist, len(empty))
        donors = donors[dist[donors] > 0]
        c[empty[:len(donors)]] = x[donors]
        if spherical:
            c /= np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-12)
        labels, dist = _assign(x, c)
    return labels, c


def run_kmeans(points, k: int, iters: int = DEFAULT_ITERS, seed: int = 0,
               spherical: bool = True, pairs: Optional[PairedSet] = None):
    """Lloyd's algorithm with k-means++ seeding.

    With ``spherical`` (the default) centroids are renormalized after every
    update. When ``pairs`` is given the cross-modal objective is logged too,
    with ``points`` acting as the gallery the pair ids refer to.
    """
    x = as_matrix(points)
    _check_k(k, x.shape[0], "points")
    if iters < 1:
        raise InvalidK(f"iters must be >= 1, got {iters}")
    rng = make_rng(seed)
    cent = x[kmeans_pp_init(x, k, rng)].astype(np.float64)
    if spherical:
        cent /= np.maximum(np.linalg.norm(cent, axis=1, keepdims=True), 1e-12)

    def crossmodal(c):
        if pairs is None:
            return None
        return objective_crossmodal(pairs, x, c)

    labels, dist = _assign(x, cent)
    log = TrainLog(initial=IterRecord(0, float(dist.mean()), crossmodal(cent), 0))
    for it in range(1, iters + 1):
        new, empty = _update(x, labels, k, spherical)
        if len(empty):
            donors = _farthest(dist, len(empty))
            new[empty] = x[donors]
            if spherical:
                new[empty] /= np.maximum(np.linalg.norm(new[empty], axis=1, keepdims=True), 1e-12)
        cent = new
        labels, dist = _assign(x, cent)
        log.records.append(IterRecord(it, float(dist.mean()), crossmodal(cent), len(empty)))
    return Centroids(cent.astype(np.float32), normalized=spherical), log


def run_paired_kmeans(pairs: PairedSet, gallery, k: int, iters: int = DEFAULT_ITERS, seed: int = 0):
    if len(pairs) == 0:
        raise EmptyPairs("no text/image pairs")
    g = as_matrix(gallery)
    text = pairs.text.data
    if text.shape[1] != g.shape[1]:
        raise DimensionMismatch(f"text d={text.shape[1]} vs gallery d={g.shape[1]}")
    _check_k(k, len(np.unique(pairs.image_nn_ids)), "distinct paired images")
    if iters < 1:
        raise InvalidK(f"iters must be >= 1, got {iters}")
    rng = make_rng(seed)
    cent = g[kmeans_pp_init(g, k, rng)].astype(np.float64)
    cent /= np.maximum(np.linalg.norm(cent, axis=1, keepdims=True), 1e-12)
    paired_images = g[pairs.image_nn_ids]

    def record(it, c, image_cells, reseeded):
        text_cells = assign(text, c)
        return IterRecord(it, objective_kmeans(g, c), float(np.mean(text_cells != image_cells)), reseeded)

    labels, dist = _assign(paired_images, cent)
    log = TrainLog(initial=record(0, cent, labels, 0))
    for it in range(1, iters + 1):
        new, empty = _update(text, labels, k, spherical=True)
        if len(empty):
            # one donor per distinct paired image, farthest first
            _, first = np.unique(pairs.image_nn_ids, return_index=True)
            first = np.sort(first)
            donors = first[_farthest(dist[first], len(empty))]
            t = text[donors].astype(np.float64)
            new[empty] = t / np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-12)
        cent = new
        labels, dist = _assign(paired_images, cent)
        log.records.append(record(it, cent, labels, len(empty)))
    return Centroids(cent.astype(np.float32), normalized=True), log


# --------------------------------------------------------------------------
# persistence


def save_centroids(path, centroids: Centroids, *, variant: str, iters: int, seed: int,
                   log: Optional[TrainLog] = None) -> None:
    """Write centroids as CMEB plus a ``<path>.json`` sidecar."""
    path = Path(path)
    write_cmeb(path, centroids)
    final = {}
    if log is not None and log.records:
        final = {"l_kmeans": log.final.l_kmeans, "l_crossmodal": log.final.l_crossmodal}
    meta = {
        "k": centroids.k,
        "d": centroids.d,
        "variant": variant,
        "iters": iters,
        "seed": seed,
        "final_objectives": final,
    }
    if log is not None:
        meta["log"] = [asdict(r) for r in log.records]
    path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
