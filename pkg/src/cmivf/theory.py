"""Monte Carlo checks of the IVF recall geometry.

* ``verify_thm1``: on the unit sphere, the chance that a query's exact
  nearest neighbour shares its Voronoi cell falls as the query moves away
  from the cell's centroid, down to about one half on the boundary.
* ``pdf_thm2`` / ``verify_thm2``: for a Gaussian gallery, the density of the
  nearest gallery point to a query ``p`` and its two regimes (concentrated
  near ``p`` when ``p`` is close to the data, Gaussian-like orthogonal to
  ``p`` and max-of-n Gaussians along ``p`` when ``p`` is far).
* ``voronoi_mismatch_map``: in 2-D, how often a probe's centroid cell
  differs from the cell of its exact nearest neighbour, by probe radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy import stats

from .errors import ConfigError, DomainError, SingleCentroid
from .kmeans import Centroids, _assign, run_kmeans
from .vecspace import (
    as_matrix,
    cap_fraction,
    derive_seed,
    exact_nn,
    make_rng,
    sample_gaussian,
    sample_uniform_sphere,
)

# ---------------------------------------------------------------------------
# Nearest-centroid cell geometry


def s_prime(centroids, c_index: int) -> float:
    """Cosine of half the angle from centroid ``c_index`` to its closest neighbour."""
    c = as_matrix(centroids).astype(np.float64)
    if c.shape[0] < 2:
        raise SingleCentroid("s' needs at least two centroids")
    if not 0 <= c_index < c.shape[0]:
        raise DomainError(f"centroid index {c_index} out of range")
    sims = c @ c[c_index]
    sims[c_index] = -np.inf
    best = float(np.clip(sims.max(), -1.0, 1.0))
    return math.cos(0.5 * math.acos(best))


def all_s_prime(centroids) -> np.ndarray:
    c = as_matrix(centroids).astype(np.float64)
    if c.shape[0] < 2:
        raise SingleCentroid("s' needs at least two centroids")
    sims = c @ c.T
    np.fill_diagonal(sims, -np.inf)
    return np.cos(0.5 * np.arccos(np.clip(sims.max(axis=1), -1.0, 1.0)))


def thm1_epsilon(s: float, d: int, n: int) -> float:
    """Probability that none of ``n`` uniform points lies in the cap of cosine ``s``."""
    return (1.0 - cap_fraction(s, d)) ** n


@dataclass
class Thm1Bin:
    lo: float
    hi: float
    recall_at_1: float
    count: int


@dataclass
class Thm1Report:
    bins: List[Thm1Bin]
    s_prime: np.ndarray
    boundary_recall_estimate: float
    boundary_count: int
    spearman_rho: float
    # cap fraction at s' per centroid and the matching epsilon = (1 - rho(s'))^n
    rho_s_prime: np.ndarray = field(default_factory=lambda: np.zeros(0))
    epsilon: np.ndarray = field(default_factory=lambda: np.zeros(0))
    config: dict = field(default_factory=dict)
    # per-query cosine to the nearest centroid and same-cell flag
    query_cos: np.ndarray = field(default_factory=lambda: np.zeros(0))
    query_hits: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def total_queries(self) -> int:
        return sum(b.count for b in self.bins)


BINNINGS = ("width", "quantile")


def bin_recall(cos: np.ndarray, flags: np.ndarray, n_bins: int, binning: str = "width") -> List[Thm1Bin]:
    """Per-bin R@1, bins ordered from least to most similar.

    ``width`` splits [min cos, max cos] into equal-width bins (empty bins
    report NaN recall); ``quantile`` uses equal-count bins.
    """
    cos = np.asarray(cos, dtype=np.float64)
    flags = np.asarray(flags, dtype=bool)
    if binning == "quantile":
        order = np.argsort(cos, kind="stable")
        return [Thm1Bin(float(cos[ch].min()), float(cos[ch].max()), float(flags[ch].mean()), int(len(ch)))
                for ch in np.array_split(order, n_bins)]
    if binning != "width":
        raise ConfigError(f"binning must be one of {BINNINGS}, got {binning!r}")
    edges = np.linspace(cos.min(), cos.max(), n_bins + 1)
    idx = np.clip(np.searchsorted(edges, cos, side="right") - 1, 0, n_bins - 1)
    bins = []
    for b in range(n_bins):
        m = idx == b
        rec = float(flags[m].mean()) if m.any() else float("nan")
        bins.append(Thm1Bin(float(edges[b]), float(edges[b + 1]), rec, int(m.sum())))
    return bins


def _spearman_bins(bins: List[Thm1Bin]) -> float:
    pts = [(i, b.recall_at_1) for i, b in enumerate(bins) if b.count > 0]
    if len(pts) < 2:
        return float("nan")
    x, y = zip(*pts)
    return float(stats.spearmanr(x, y).statistic)


def _boundary_queries(rng, centroids: np.ndarray, m: int) -> np.ndarray:
    """Points on the bisector of each random point's two nearest centroids.

    Candidates whose projection lands in a third centroid's cell are dropped.
    """
    d = centroids.shape[1]
    out = []
    while sum(len(o) for o in out) < m:
        u = rng.standard_normal((2 * m, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        sims = u @ centroids.T
        top2 = np.argsort(-sims, axis=1)[:, :2]
        w = centroids[top2[:, 0]] - centroids[top2[:, 1]]
        u = u - (np.einsum("ij,ij->i", u, w) / np.einsum("ij,ij->i", w, w))[:, None] * w
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        sims = u @ centroids.T
        new_top2 = np.sort(np.argsort(-sims, axis=1)[:, :2], axis=1)
        keep = np.all(new_top2 == np.sort(top2, axis=1), axis=1)
        out.append(u[keep])
    return np.concatenate(out)[:m]


def verify_thm1(n: int = 1_000_000, k: int = 64, d: int = 16, seed: int = 0, n_bins: int = 10,
                n_queries: int = 10_000, n_boundary: int = 2_000, iters: int = 10,
                boundary_tol: float = 1e-3, binning: str = "width") -> Thm1Report:
    """Binned recall at n_probe = 1 versus query-centroid cosine on the sphere.

    Bins cover the cosine between each query and its nearest centroid, ordered
    from least to most similar (see ``bin_recall`` for the two binnings). Boundary queries
    are constructed on the bisector of their two nearest centroids; those
    whose top-two cosine gap is below ``boundary_tol`` give the boundary
    recall estimate.
    """
    if n < 100 * k:
        raise ConfigError(f"need n >= 100 * k, got n={n}, k={k}")
    if k < 2 or n_bins < 2 or n_queries < n_bins:
        raise ConfigError("need k >= 2, n_bins >= 2 and n_queries >= n_bins")
    if binning not in BINNINGS:
        raise ConfigError(f"binning must be one of {BINNINGS}, got {binning!r}")
    gallery = sample_uniform_sphere(n, d, derive_seed(seed, 0))
    cent, _ = run_kmeans(gallery, k, iters, derive_seed(seed, 1))
    c = cent.data.astype(np.float64)
    gallery_cell, _ = _assign(gallery.data, c)

    queries = sample_uniform_sphere(n_queries, d, derive_seed(seed, 2)).data
    boundary = _boundary_queries(make_rng(seed, 3), c, n_boundary).astype(np.float32)

    def hits(q):
        cell, dist = _assign(q, c)
        nn = exact_nn(q, gallery, 1).ids[:, 0]
        return gallery_cell[nn] == cell, 1.0 - dist / 2.0

    flags, cos = hits(queries)
    bins = bin_recall(cos, flags, n_bins, binning)
    rho = _spearman_bins(bins)

    b_flags, _ = hits(boundary)
    sims = np.sort(boundary.astype(np.float64) @ c.T, axis=1)
    near = (sims[:, -1] - sims[:, -2]) < boundary_tol
    b_est = float(b_flags[near].mean()) if near.any() else float("nan")

    sp = all_s_prime(c)
    rho_sp = np.array([cap_fraction(float(s), d) for s in sp])
    eps = np.array([thm1_epsilon(float(s), d, n) for s in sp])
    return Thm1Report(
        bins=bins, s_prime=sp, boundary_recall_estimate=b_est, boundary_count=int(near.sum()),
        spearman_rho=float(rho), rho_s_prime=rho_sp, epsilon=eps,
        config=dict(n=n, k=k, d=d, seed=seed, n_bins=n_bins, n_queries=n_queries,
                    n_boundary=n_boundary, iters=iters, boundary_tol=boundary_tol, binning=binning),
        query_cos=cos, query_hits=flags,
    )


# ---------------------------------------------------------------------------
# Nearest neighbour of a far query: density, tail bound, limit laws


def ball_prob(r, p_norm: float, d: int):
    """P[||x - p|| <= r] for x ~ N(0, I_d) via the noncentral chi-squared law."""
    r2 = np.square(np.asarray(r, dtype=np.float64))
    if p_norm == 0:
        return stats.chi2.cdf(r2, d)
    return stats.ncx2.cdf(r2, d, p_norm ** 2)


def ball_escape_prob(r, p_norm: float, d: int):
    """1 - ball_prob, computed from the survival function for accuracy near 1."""
    r2 = np.square(np.asarray(r, dtype=np.float64))
    if p_norm == 0:
        return stats.chi2.sf(r2, d)
    return stats.ncx2.sf(r2, d, p_norm ** 2)


def pdf_thm2(x, p, n: int):
    """Density of the nearest of ``n`` standard Gaussian points to query ``p``.

    ``x`` may be a single point or an (m, d) array of points.
    """
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    p = np.asarray(p, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != p.shape[0]:
        raise DomainError(f"x has d={x.shape[1]} but p has d={p.shape[0]}")
    if not (np.isfinite(x).all() and np.isfinite(p).all()):
        raise DomainError("non-finite input")
    d = p.shape[0]
    r = np.linalg.norm(x - p, axis=1)
    survive = ball_escape_prob(r, float(np.linalg.norm(p)), d)
    sq = np.einsum("ij,ij->i", x, x)
    log_gauss = -0.5 * d * math.log(2 * math.pi) - 0.5 * sq
    with np.errstate(divide="ignore"):
        log_surv = np.where(survive > 0, np.log(np.maximum(survive, 1e-300)), -np.inf)
    if n == 1:
        out = np.exp(log_gauss)
    else:
        out = n * np.exp((n - 1) * log_surv + log_gauss)
    return float(out[0]) if single else out


def tail_bound(r, p_norm: float, d: int, n: int):
    """Upper bound on P[||q(p) - p|| > r] from the smallest density in the ball."""
    r = np.asarray(r, dtype=np.float64)
    log_mass = (d * np.log(np.maximum(r, 1e-300)) - 0.5 * d * math.log(2)
                - math.lgamma(d / 2 + 1) - 0.5 * (p_norm + r) ** 2)
    mass = np.where(r > 0, np.exp(log_mass), 0.0)
    return (1.0 - np.minimum(mass, 1.0)) ** n


def exact_tail(r, p_norm: float, d: int, n: int):
    return ball_escape_prob(r, p_norm, d) ** n


@dataclass
class KsResult:
    statistic: float
    pvalue: float
    passed: bool


@dataclass
class TailCheck:
    r: float
    empirical: float
    bound: float
    exact: float
    sigma: float
    passed: bool


@dataclass
class Thm2Report:
    p_norm: float
    ks_orthogonal: KsResult
    ks_parallel: KsResult
    tail_bound_checks: List[TailCheck]
    dispersion: float
    trials: int

    @property
    def tails_ok(self) -> bool:
        return all(t.passed for t in self.tail_bound_checks)


def sample_nearest(p: np.ndarray, n: int, trials: int, seed: int, stream: int,
                   block: int = 1_000) -> np.ndarray:
    """``trials`` draws of the nearest of ``n`` Gaussian points to ``p``.

    Each block of trials has its own RNG stream keyed by (seed, stream, block).
    """
    d = p.shape[0]
    out = np.empty((trials, d))
    for b, start in enumerate(range(0, trials, block)):
        m = min(block, trials - start)
        rng = make_rng(seed, stream, b)
        x = rng.standard_normal((m, n, d))
        dist = np.einsum("mnd,mnd->mn", x - p, x - p)
        out[start:start + m] = x[np.arange(m), np.argmin(dist, axis=1)]
    return out


def verify_thm2(d: int = 8, n: int = 100, p_norms: Sequence[float] = (0, 2, 5, 20),
                trials: int = 10_000, seed: int = 0, r_grid: Optional[Sequence[float]] = None,
                alpha: float = 0.01, min_trials: int = 10_000) -> List[Thm2Report]:
    """Sample the nearest Gaussian point to ``p = ||p|| e_0`` and test its law.

    * KS of the first orthogonal coordinate against N(0, 1).
    * KS of the parallel coordinate against the max-of-n law, CDF Phi(t)^n.
    * Empirical tail P[||q - p|| > r] against the closed-form upper bound,
      allowing three binomial standard errors.
    """
    if trials < min_trials:
        raise ConfigError(f"need at least {min_trials} trials, got {trials}")
    if d < 2 or n < 1:
        raise ConfigError("need d >= 2 and n >= 1")
    reports = []
    for i, pn in enumerate(p_norms):
        if pn < 0:
            raise ConfigError(f"p_norm must be >= 0, got {pn}")
        p = np.zeros(d)
        p[0] = pn
        q = sample_nearest(p, n, trials, seed, i)
        ks_o = stats.kstest(q[:, 1], stats.norm.cdf)
        ks_p = stats.kstest(q[:, 0], lambda t: stats.norm.cdf(t) ** n)
        dist = np.linalg.norm(q - p, axis=1)
        grid = np.asarray(r_grid if r_grid is not None else np.quantile(dist, np.linspace(0.05, 0.95, 19)))
        checks = []
        for r in grid:
            emp = float(np.mean(dist > r))
            bound = float(tail_bound(r, pn, d, n))
            sigma = math.sqrt(max(bound * (1 - bound), emp * (1 - emp)) / trials)
            checks.append(TailCheck(float(r), emp, bound, float(exact_tail(r, pn, d, n)), sigma,
                                    emp <= bound + 3 * sigma))
        dispersion = float(np.mean(np.sum((q - q.mean(axis=0)) ** 2, axis=1)))
        reports.append(Thm2Report(
            p_norm=float(pn),
            ks_orthogonal=KsResult(float(ks_o.statistic), float(ks_o.pvalue), bool(ks_o.pvalue >= alpha)),
            ks_parallel=KsResult(float(ks_p.statistic), float(ks_p.pvalue), bool(ks_p.pvalue >= alpha)),
            tail_bound_checks=checks, dispersion=dispersion, trials=trials,
        ))
    return reports


# ---------------------------------------------------------------------------
# Voronoi mismatch in 2-D


@dataclass
class MismatchRow:
    radius: float
    mismatch: float
    count: int


def voronoi_mismatch_map(n: int = 10_000, k: int = 20, seed: int = 0,
                         radii: Sequence[float] = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0),
                         probes_per_bin: int = 10_000, d: int = 2, iters: int = 20) -> List[MismatchRow]:
    """Fraction of probes at each radius whose cell differs from their exact NN's cell."""
    if d != 2:
        raise ConfigError("the Voronoi mismatch map is defined for d = 2 only")
    if k < 1 or n < k or probes_per_bin < 1:
        raise ConfigError("need 1 <= k <= n and probes_per_bin >= 1")
    gallery = sample_gaussian(n, d, derive_seed(seed, 0))
    cent, _ = run_kmeans(gallery, k, iters, derive_seed(seed, 1), spherical=False)
    return mismatch_by_radius(gallery.data, cent, radii, probes_per_bin, make_rng(seed, 2))


def mismatch_by_radius(gallery: np.ndarray, centroids: Centroids, radii, probes_per_bin, rng):
    c = centroids.data
    gallery_cell, _ = _assign(gallery, c)
    rows = []
    for radius in radii:
        theta = rng.uniform(0.0, 2 * math.pi, probes_per_bin)
        probes = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1).astype(np.float32)
        rows.append(MismatchRow(float(radius), float(probe_mismatch(gallery, c, gallery_cell, probes).mean()),
                                probes_per_bin))
    return rows


def probe_mismatch(gallery, centroids, gallery_cell, probes) -> np.ndarray:
    cell, _ = _assign(probes, centroids)
    nn = exact_nn(probes, gallery, 1).ids[:, 0]
    return gallery_cell[nn] != cell
