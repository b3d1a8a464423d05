"""Vector-space primitives: the embedding container, exact search, special
functions for spherical caps, and seeded samplers.

Randomness: every sampler draws from numpy's PCG64 bit generator. A plain
integer seed maps to ``PCG64(seed)``; independent sub-streams (per trial, per
concept, ...) come from ``SeedSequence([seed, *counter])`` so that results do
not depend on how work is split across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import DimensionMismatch, DomainError, ZeroVector

NORM_TOL = 1e-4
# query rows per block in brute-force scans; keeps the float64 distance block near 128 MB
_BLOCK_ENTRIES = 16_000_000


@dataclass(eq=False)
class EmbeddingSet:
    """Dense n x d float32 matrix with an optional unit-norm guarantee."""

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise DomainError(f"embedding matrix must be 2-D, got shape {data.shape}")
        n, d = data.shape
        if n < 1 or d < 2:
            raise DomainError(f"need n >= 1 and d >= 2, got n={n}, d={d}")
        if not np.isfinite(data).all():
            raise DomainError("embedding matrix contains non-finite values")
        if self.normalized:
            norms = np.linalg.norm(data.astype(np.float64), axis=1)
            worst = float(np.max(np.abs(norms - 1.0)))
            if worst > NORM_TOL:
                raise DomainError(f"rows flagged normalized but max |norm - 1| = {worst:.3g}")
        self.data = data

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.n

    def take(self, rows) -> "EmbeddingSet":
        return EmbeddingSet(self.data[np.asarray(rows)], normalized=self.normalized)


ArrayLike = Union[EmbeddingSet, np.ndarray]


def as_matrix(x: ArrayLike) -> np.ndarray:
    if isinstance(x, EmbeddingSet):
        return x.data
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


@dataclass
class RetrievalResult:
    """Ranked neighbours per query.

    ``ids`` and ``sims`` are (n_queries, topk); rows with fewer than ``topk``
    hits are padded with id -1 and similarity NaN. ``sims`` holds inner
    products (cosine similarities for unit vectors). ``labels`` and ``augs``
    carry optional per-query metadata used by the pseudo-labeling pipeline.
    """

    ids: np.ndarray
    sims: np.ndarray
    dists: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    augs: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    @property
    def n_queries(self) -> int:
        return self.ids.shape[0]

    def hits(self, i: int):
        """(ids, sims) for query ``i`` with padding removed."""
        keep = self.ids[i] >= 0
        return self.ids[i][keep], self.sims[i][keep]


# --------------------------------------------------------------------------
# rng


def make_rng(seed: int, *counter: int) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
    if counter:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *counter])))
    return np.random.Generator(np.random.PCG64(seed))


# --------------------------------------------------------------------------
# normalization and exact search


def l2_normalize(v: ArrayLike) -> EmbeddingSet:
    x = as_matrix(v).astype(np.float64)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms < 1e-12):
        bad = int(np.argmax(norms < 1e-12))
        raise ZeroVector(f"row {bad} has zero norm")
    return EmbeddingSet((x / norms[:, None]).astype(np.float32), normalized=True)


def sq_dists(queries: np.ndarray, gallery: np.ndarray, gallery_sq=None) -> np.ndarray:
    """Squared L2 distances, float32 inputs accumulated in float64."""
    q = queries.astype(np.float64, copy=False)
    g = gallery.astype(np.float64, copy=False)
    if gallery_sq is None:
        gallery_sq = np.einsum("ij,ij->i", g, g)
    q_sq = np.einsum("ij,ij->i", q, q)
    out = q @ g.T
    out *= -2.0
    out += q_sq[:, None]
    out += gallery_sq[None, :]
    np.maximum(out, 0.0, out=out)
    return out


def topk_smallest(dist: np.ndarray, topk: int, ids: Optional[np.ndarray] = None) -> np.ndarray:
    """Column indices of the ``topk`` smallest entries per row, ties to lower id.

    ``ids`` gives the id of each column (defaults to the column index); it is
    the tie-breaking key.
    """
    m = dist.shape[1]
    if ids is None:
        ids = np.arange(m)
    if topk == 1 and np.all(ids[:-1] <= ids[1:]):
        return np.argmin(dist, axis=1)[:, None]
    if topk >= m:
        keys = np.broadcast_to(ids, dist.shape)
        return np.lexsort((keys, dist), axis=-1)
    part = np.argpartition(dist, topk - 1, axis=1)[:, :topk]
    thr = np.take_along_axis(dist, part, axis=1).max(axis=1)
    out = np.empty((dist.shape[0], topk), dtype=np.int64)
    for r in range(dist.shape[0]):
        cand = np.flatnonzero(dist[r] <= thr[r])
        order = np.lexsort((ids[cand], dist[r, cand]))
        out[r] = cand[order[:topk]]
    return out


def exact_nn(queries: ArrayLike, gallery: ArrayLike, topk: int = 1) -> RetrievalResult:
    q = as_matrix(queries)
    g = as_matrix(gallery)
    if q.shape[1] != g.shape[1]:
        raise DimensionMismatch(f"query d={q.shape[1]} vs gallery d={g.shape[1]}")
    if not 1 <= topk <= g.shape[0]:
        raise DomainError(f"topk must be in [1, {g.shape[0]}], got {topk}")
    g64 = g.astype(np.float64)
    g_sq = np.einsum("ij,ij->i", g64, g64)
    ids = np.empty((q.shape[0], topk), dtype=np.int64)
    dists = np.empty((q.shape[0], topk), dtype=np.float64)
    block = max(1, _BLOCK_ENTRIES // g.shape[0])
    for start in range(0, q.shape[0], block):
        qb = q[start:start + block]
        if topk == 1:
            # the per-row constant |q|^2 cannot change the argmin
            part = qb.astype(np.float64) @ g64.T
            part *= -2.0
            part += g_sq
            idx = np.argmin(part, axis=1)[:, None]
            diff = qb.astype(np.float64) - g64[idx[:, 0]]
            ids[start:start + block] = idx
            dists[start:start + block, 0] = np.einsum("ij,ij->i", diff, diff)
            continue
        dist = sq_dists(qb, g64, g_sq)
        idx = topk_smallest(dist, topk)
        ids[start:start + block] = idx
        dists[start:start + block] = np.take_along_axis(dist, idx, axis=1)
    sims = np.einsum("qd,qkd->qk", q.astype(np.float64), g64[ids])
    return RetrievalResult(ids=ids, sims=sims, dists=dists)


# --------------------------------------------------------------------------
# special functions


def _betacf(x: float, a: float, b: float) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    dd = 1.0 - qab * x / qap
    if abs(dd) < tiny:
        dd = tiny
    dd = 1.0 / dd
    h = dd
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        dd = 1.0 + aa * dd
        dd = tiny if abs(dd) < tiny else dd
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        dd = 1.0 / dd
        h *= dd * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        dd = 1.0 + aa * dd
        dd = tiny if abs(dd) < tiny else dd
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        dd = 1.0 / dd
        delta = dd * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise DomainError(f"incomplete beta continued fraction did not converge (x={x}, a={a}, b={b})")


def reg_inc_beta(x: float, a: float, b: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not (a > 0 and b > 0) or not math.isfinite(a) or not math.isfinite(b):
        raise DomainError(f"a and b must be positive, got a={a}, b={b}")
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"x must lie in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return min(1.0, max(0.0, front * _betacf(x, a, b) / a))
    return min(1.0, max(0.0, 1.0 - front * _betacf(1.0 - x, b, a) / b))


def cap_fraction(s: float, d: int) -> float:
    """Fraction of the unit sphere in R^d with inner product >= s against a pole."""
    if int(d) != d or d < 2:
        raise DomainError(f"ambient dimension must be an integer >= 2, got {d}")
    if not -1.0 <= s <= 1.0:
        raise DomainError(f"cosine must lie in [-1, 1], got {s}")
    if s < 0:
        return 1.0 - cap_fraction(-s, d)
    sin_sq = (1.0 - s) * (1.0 + s)
    return 0.5 * reg_inc_beta(sin_sq, (d - 1) / 2.0, 0.5)


# --------------------------------------------------------------------------
# samplers

_SAMPLE_CHUNK = 65_536


def sample_gaussian(n: int, d: int, seed: int) -> EmbeddingSet:
    if n < 1 or d < 2:
        raise DomainError(f"need n >= 1 and d >= 2, got n={n}, d={d}")
    rng = make_rng(seed)
    out = np.empty((n, d), dtype=np.float32)
    for start in range(0, n, _SAMPLE_CHUNK):
        stop = min(n, start + _SAMPLE_CHUNK)
        out[start:stop] = rng.standard_normal((stop - start, d))
    return EmbeddingSet(out)


def sample_uniform_sphere(n: int, d: int, seed: int) -> EmbeddingSet:
    if n < 1 or d < 2:
        raise DomainError(f"need n >= 1 and d >= 2, got n={n}, d={d}")
    rng = make_rng(seed)
    out = np.empty((n, d), dtype=np.float32)
    for start in range(0, n, _SAMPLE_CHUNK):
        stop = min(n, start + _SAMPLE_CHUNK)
        g = rng.standard_normal((stop - start, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        out[start:stop] = g
    return EmbeddingSet(out, normalized=True)


def derive_seed(seed: int, *counter: int) -> int:
    """Deterministic 64-bit child seed for sub-experiment ``counter``."""
    ss = np.random.SeedSequence([seed, *counter])
    return int(ss.generate_state(1, np.uint64)[0])
