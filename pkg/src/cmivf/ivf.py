"""Inverted-file index with coarse quantization, n_probe search and recall
evaluation.

Postings are stored bucket-major in one flat array (``ids``/``payload``) with
``offsets[j]:offsets[j + 1]`` delimiting bucket ``j``; ids are ascending
inside a bucket.

CMIV file layout (little endian)::

    b"CMIV" | u32 version | u64 k | u32 d | u64 total | u8 quant | 3 zero bytes
    centroid block: a complete CMEB blob (k x d)
    if quant == scalar8: k*d float32 per-bucket minima, then k*d float32 maxima
                         (row j is bucket j; zeros for empty buckets)
    per bucket: u64 length | length u64 ids | length*d float32 (none) or uint8 (scalar8)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, DomainError, FormatError, InvalidNProbe
from .io import cmeb_bytes, parse_cmeb
from .kmeans import Centroids, assign
from .vecspace import EmbeddingSet, RetrievalResult, as_matrix, exact_nn, topk_smallest

CMIV_MAGIC = b"CMIV"
CMIV_VERSION = 1
_HEADER = struct.Struct("<4sIQIQB3x")
QUANT_CODES = {"none": 0, "scalar8": 1}
QUANT_NAMES = {v: k for k, v in QUANT_CODES.items()}


@dataclass(eq=False)
class IvfIndex:
    centroids: Centroids
    ids: np.ndarray
    offsets: np.ndarray
    payload: np.ndarray
    quantization: str = "none"
    qmin: Optional[np.ndarray] = None
    qmax: Optional[np.ndarray] = None
    _vectors: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return self.centroids.k

    @property
    def d(self) -> int:
        return self.centroids.d

    @property
    def total(self) -> int:
        return int(self.ids.shape[0])

    def bucket_sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def bucket(self, j: int):
        lo, hi = self.offsets[j], self.offsets[j + 1]
        return self.ids[lo:hi], self.vectors[lo:hi]

    @property
    def vectors(self) -> np.ndarray:
        """Stored vectors in float32, dequantized when needed."""
        if self._vectors is None:
            if self.quantization == "scalar8":
                sizes = self.bucket_sizes()
                self._vectors = dequantize(self.payload, np.repeat(self.qmin, sizes, axis=0),
                                           np.repeat(self.qmax, sizes, axis=0))
            else:
                self._vectors = self.payload
        return self._vectors

    def bucket_of(self) -> np.ndarray:
        """Bucket id for every gallery id."""
        out = np.empty(self.total, dtype=np.int64)
        out[self.ids] = np.repeat(np.arange(self.k), self.bucket_sizes())
        return out


@dataclass
class RecallReport:
    n_probe: int
    recall_at_1: float
    flags: np.ndarray
    mean_buckets: float
    mean_candidates: float

    def row(self) -> dict:
        return {
            "n_probe": self.n_probe,
            "recall_at_1": self.recall_at_1,
            "mean_buckets": self.mean_buckets,
            "mean_candidates": self.mean_candidates,
        }


# --------------------------------------------------------------------------
# scalar quantization


def quantize(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = (hi - lo).astype(np.float64)
    scale = np.where(span > 0, 255.0 / np.where(span > 0, span, 1.0), 0.0)
    codes = np.rint((x.astype(np.float64) - lo) * scale)
    return np.clip(codes, 0, 255).astype(np.uint8)


def dequantize(codes: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    step = (hi.astype(np.float64) - lo) / 255.0
    return (lo + codes.astype(np.float64) * step).astype(np.float32)


# --------------------------------------------------------------------------
# build / search


def build_index(gallery: EmbeddingSet, centroids: Centroids, quantization: str = "none") -> IvfIndex:
    if quantization not in QUANT_CODES:
        raise DomainError(f"unknown quantization {quantization!r}; expected one of {sorted(QUANT_CODES)}")
    if gallery.d != centroids.d:
        raise DimensionMismatch(f"gallery d={gallery.d} vs centroids d={centroids.d}")
    if not gallery.normalized:
        raise DomainError("gallery must be L2-normalized before indexing")
    labels = assign(gallery, centroids)
    order = np.argsort(labels, kind="stable")
    offsets = np.zeros(centroids.k + 1, dtype=np.int64)
    np.cumsum(np.bincount(labels, minlength=centroids.k), out=offsets[1:])
    vecs = gallery.data[order]
    qmin = qmax = None
    if quantization == "scalar8":
        # per-bucket, per-dimension ranges: cells are much tighter than the gallery
        qmin = np.zeros((centroids.k, gallery.d), dtype=np.float32)
        qmax = np.zeros((centroids.k, gallery.d), dtype=np.float32)
        for j in np.flatnonzero(np.diff(offsets)):
            block = vecs[offsets[j]:offsets[j + 1]]
            qmin[j], qmax[j] = block.min(axis=0), block.max(axis=0)
        sizes = np.diff(offsets)
        payload = quantize(vecs, np.repeat(qmin, sizes, axis=0), np.repeat(qmax, sizes, axis=0))
    else:
        payload = np.ascontiguousarray(vecs, dtype=np.float32)
    return IvfIndex(centroids, order.astype(np.int64), offsets, payload, quantization, qmin, qmax)


def probe_order(index: IvfIndex, queries: np.ndarray, n_probe: int) -> np.ndarray:
    """Bucket ids by decreasing query-centroid inner product, ties to lower id."""
    sims = queries.astype(np.float64) @ index.centroids.data.astype(np.float64).T
    return np.argsort(-sims, axis=1, kind="stable")[:, :n_probe]


def search(index: IvfIndex, queries, n_probe: int, topk: int = 1) -> RetrievalResult:
    q = as_matrix(queries)
    if q.shape[1] != index.d:
        raise DimensionMismatch(f"query d={q.shape[1]} vs index d={index.d}")
    if not 1 <= n_probe <= index.k:
        raise InvalidNProbe(f"n_probe must be in [1, {index.k}], got {n_probe}")
    if topk < 1:
        raise DomainError(f"topk must be >= 1, got {topk}")
    probes = probe_order(index, q, n_probe)
    vecs = index.vectors
    n_q = q.shape[0]
    out_ids = np.full((n_q, topk), -1, dtype=np.int64)
    out_sims = np.full((n_q, topk), np.nan)
    out_d = np.full((n_q, topk), np.nan)
    cand_counts = np.empty(n_q, dtype=np.int64)
    full_scan = n_probe == index.k
    for i in range(n_q):
        if full_scan:
            rows = slice(None)
            cand_ids, cand = index.ids, vecs
        else:
            rows = np.concatenate([np.arange(index.offsets[b], index.offsets[b + 1]) for b in probes[i]])
            cand_ids, cand = index.ids[rows], vecs[rows]
        cand_counts[i] = cand_ids.shape[0]
        if cand_ids.shape[0] == 0:
            continue
        c64 = cand.astype(np.float64)
        qi = q[i].astype(np.float64)
        ip = c64 @ qi
        dist = np.einsum("ij,ij->i", c64, c64) - 2.0 * ip + qi @ qi
        np.maximum(dist, 0.0, out=dist)
        kk = min(topk, cand_ids.shape[0])
        pick = topk_smallest(dist[None, :], kk, cand_ids)[0]
        out_ids[i, :kk] = cand_ids[pick]
        out_sims[i, :kk] = ip[pick]
        out_d[i, :kk] = dist[pick]
    return RetrievalResult(
        ids=out_ids,
        sims=out_sims,
        dists=out_d,
        extra={"buckets_scanned": np.full(n_q, n_probe), "candidates_scanned": cand_counts},
    )


def eval_recall(index: IvfIndex, queries, gallery, n_probe: int,
                truth: Optional[np.ndarray] = None) -> RecallReport:
    """R@1 of ``search`` at ``n_probe`` against the exact nearest neighbour.

    ``truth`` may carry precomputed exact rank-1 ids to avoid repeating the
    brute-force pass across an n_probe sweep.
    """
    if truth is None:
        truth = exact_nn(queries, gallery, 1).ids[:, 0]
    res = search(index, queries, n_probe, 1)
    flags = res.ids[:, 0] == truth
    return RecallReport(
        n_probe=n_probe,
        recall_at_1=float(flags.mean()),
        flags=flags,
        mean_buckets=float(res.extra["buckets_scanned"].mean()),
        mean_candidates=float(res.extra["candidates_scanned"].mean()),
    )


def recall_sweep(index: IvfIndex, queries, gallery, n_probes: Sequence[int]):
    truth = exact_nn(queries, gallery, 1).ids[:, 0]
    return [eval_recall(index, queries, gallery, p, truth) for p in n_probes]


# --------------------------------------------------------------------------
# persistence


def index_bytes(index: IvfIndex) -> bytes:
    parts = [
        _HEADER.pack(CMIV_MAGIC, CMIV_VERSION, index.k, index.d, index.total,
                     QUANT_CODES[index.quantization]),
        cmeb_bytes(index.centroids),
    ]
    if index.quantization == "scalar8":
        parts.append(index.qmin.astype("<f4").tobytes())
        parts.append(index.qmax.astype("<f4").tobytes())
    dtype = "<f4" if index.quantization == "none" else "u1"
    for j in range(index.k):
        lo, hi = index.offsets[j], index.offsets[j + 1]
        parts.append(struct.pack("<Q", hi - lo))
        parts.append(index.ids[lo:hi].astype("<u8").tobytes())
        parts.append(index.payload[lo:hi].astype(dtype).tobytes())
    return b"".join(parts)


def save_index(index: IvfIndex, path) -> None:
    Path(path).write_bytes(index_bytes(index))


def _take(buf, pos, nbytes, what):
    if pos + nbytes > len(buf):
        raise FormatError(f"truncated CMIV file while reading {what}")
    return pos + nbytes


def parse_index(buf) -> IvfIndex:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated CMIV header")
    magic, version, k, d, total, qcode = _HEADER.unpack_from(buf, 0)
    if magic != CMIV_MAGIC:
        raise FormatError(f"bad CMIV magic {magic!r}")
    if version != CMIV_VERSION:
        raise FormatError(f"unsupported CMIV version {version}")
    if qcode not in QUANT_NAMES:
        raise FormatError(f"unknown quantization code {qcode}")
    quant = QUANT_NAMES[qcode]
    cent, pos = parse_cmeb(buf, _HEADER.size)
    if cent.n != k or cent.d != d:
        raise FormatError(f"centroid block is {cent.n}x{cent.d}, header says {k}x{d}")
    qmin = qmax = None
    if quant == "scalar8":
        end = _take(buf, pos, 8 * k * d, "quantizer ranges")
        qmin = np.frombuffer(buf, "<f4", k * d, pos).astype(np.float32).reshape(k, d)
        qmax = np.frombuffer(buf, "<f4", k * d, pos + 4 * k * d).astype(np.float32).reshape(k, d)
        pos = end
    width = 4 * d if quant == "none" else d
    dtype = "<f4" if quant == "none" else "u1"
    offsets = np.zeros(k + 1, dtype=np.int64)
    id_parts, vec_parts = [], []
    for j in range(k):
        end = _take(buf, pos, 8, f"bucket {j} length")
        (length,) = struct.unpack_from("<Q", buf, pos)
        pos = end
        end = _take(buf, pos, 8 * length + width * length, f"bucket {j} payload")
        id_parts.append(np.frombuffer(buf, "<u8", length, pos).astype(np.int64))
        vec_parts.append(np.frombuffer(buf, dtype, length * d, pos + 8 * length).reshape(length, d))
        pos = end
        offsets[j + 1] = offsets[j] + length
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after CMIV payload")
    if offsets[-1] != total:
        raise FormatError(f"posting lists hold {offsets[-1]} ids, header says {total}")
    ids = np.concatenate(id_parts) if id_parts else np.zeros(0, np.int64)
    payload = np.concatenate(vec_parts).astype(np.float32 if quant == "none" else np.uint8)
    return IvfIndex(Centroids(cent.data, normalized=cent.normalized), ids, offsets, payload, quant, qmin, qmax)


def load_index(path) -> IvfIndex:
    return parse_index(Path(path).read_bytes())
