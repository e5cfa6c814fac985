"""Constructive coupling of the diagram laws at two densities q < q'.

The construction follows the partial-information route: scatter Poisson
particles over a grid of short intervals (length delta1), keep only the
per-interval counts and the relative time order within each cluster of
occupied intervals, then per cluster draw tentative arrow marks, uniform
labels deciding arrow-vs-star at each density, and precise times from the
conditional law given the kept order.  Copy 2 dominates copy 1 arrowwise.

On small clusters the coupling is modified by a measure-preserving
"cross-over" between the bad event B (two particles within delta of each
other) and the good event G (all labels in (q, q'), so copy 2 is all
arrows): an outcome in B but not G has its second copy replaced by a draw
conditioned on G minus B, and a matched fraction of G-minus-B outcomes is
replaced the other way.  The exchanged masses are equal, so both marginals
are preserved exactly, and every fully exchanged bad outcome leaves copy 2
with a delta-stable version of any path of copy 1 within the cluster.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import rng
from .spacetime import (Box, Diagram, GeometryPlan, Grid, STAR,
                        diagram_from_points, q_params)
from .reachability import occupancy_field, stable_occupancy_field

_CONN26 = np.ones((3, 3, 3), dtype=int)
_REJECTION_CAP = 100_000


@dataclass(frozen=True)
class IntervalGrid:
    """delta1-interval grid tiling B_n x [-K1*delta1, 0]."""

    geometry: GeometryPlan
    delta1: float
    K1: int
    M_n: int

    @property
    def depth(self) -> float:
        return self.K1 * self.delta1

    @property
    def n_vertices(self) -> int:
        return self.geometry.box_B.n_vertices


def make_interval_grid(geometry: GeometryPlan, delta1: float) -> IntervalGrid:
    if not 0 < delta1 <= geometry.time_depth:
        raise ValueError("need 0 < delta1 <= time depth")
    K1 = int(geometry.time_depth / delta1 + 1e-12)
    if K1 < 1:
        raise ValueError("delta1 too coarse for the time depth")
    M = geometry.box_B.n_vertices * K1
    return IntervalGrid(geometry=geometry, delta1=delta1, K1=K1, M_n=M)


def default_delta1(n: int, alpha: float = 0.25) -> float:
    """delta1 = n^(-alpha/2), the interval length of the coupling grid."""
    return float(n) ** (-alpha / 2.0)


@dataclass
class IntervalClusterSet:
    """Partial information of one particle scatter, plus coupling labels.

    Particles are stored sorted by (cluster_id, rank) where rank orders a
    cluster's particles by increasing time (decreasing interval index k;
    within one k-block the order is an exchangeable uniform draw).  The
    precise times are deliberately absent: only counts, order, tentative
    marks and uniform labels are kept.
    """

    grid: IntervalGrid
    ix: np.ndarray          # spatial x index into box_B
    iy: np.ndarray
    k: np.ndarray           # interval index, 0 at the top
    cluster_id: np.ndarray
    rank: np.ndarray
    tentative: np.ndarray   # int8 in 0..3
    u: np.ndarray           # uniform labels in (0,1)
    cluster_start: np.ndarray
    cluster_sizes: np.ndarray
    seed: int | None = None

    @property
    def n_particles(self) -> int:
        return self.ix.shape[0]

    @property
    def n_clusters(self) -> int:
        return self.cluster_sizes.shape[0]

    def cluster_slice(self, cid: int) -> slice:
        return slice(int(self.cluster_start[cid]),
                     int(self.cluster_start[cid + 1]))

    def block_lengths(self, cid: int) -> list[int]:
        """Sizes of the k-blocks of one cluster, in rank order."""
        ks = self.k[self.cluster_slice(cid)]
        out = []
        run = 1
        for a, b in zip(ks[:-1], ks[1:]):
            if b == a:
                run += 1
            else:
                if b > a:
                    raise ValueError("ranks inconsistent with interval order")
                out.append(run)
                run = 1
        out.append(run)
        return out


def sample_partial_information(geometry: GeometryPlan, delta1: float,
                               seed: int) -> IntervalClusterSet:
    """Scatter Poisson(delta1 * M_n) particles uniformly over the interval
    grid, form neighbour clusters of occupied intervals (spatial L-inf
    distance <= 1 and |k - l| <= 1), and keep counts and relative order."""
    grid = make_interval_grid(geometry, delta1)
    gen = rng.generator(seed, rng.PARTIAL_INFO)
    N = int(gen.poisson(delta1 * grid.M_n))
    box = geometry.box_B
    nx, ny, K1 = box.width, box.height, grid.K1
    cell = gen.integers(0, grid.M_n, N)
    vid, k = np.divmod(cell, K1)
    ix, iy = np.divmod(vid, ny)
    occ = np.zeros((nx, ny, K1), bool)
    occ[ix, iy, k] = True
    labels, n_clusters = ndimage.label(occ, structure=_CONN26)
    cid = labels[ix, iy, k].astype(np.int64) - 1
    perm = gen.random(N)
    tentative = gen.integers(0, 4, N).astype(np.int8)
    u = gen.random(N)
    # single exact composite key (cluster, decreasing k) speeds the sort
    order = np.lexsort((perm, cid * K1 + (K1 - 1 - k)))
    ix, iy, k, cid = ix[order], iy[order], k[order], cid[order]
    tentative, u = tentative[order], u[order]
    sizes = np.bincount(cid, minlength=n_clusters).astype(np.int64)
    start = np.concatenate([[0], np.cumsum(sizes)])
    rank = np.arange(N) - start[cid]
    return IntervalClusterSet(grid=grid, ix=ix, iy=iy, k=k.astype(np.int64),
                              cluster_id=cid, rank=rank,
                              tentative=tentative, u=u,
                              cluster_start=start.astype(np.int64),
                              cluster_sizes=sizes, seed=seed)


# ---------------------------------------------------------------------------
# Time assignment
# ---------------------------------------------------------------------------

def _draw_block_times(gen, ks, delta1):
    """Times for one cluster's particles (k in rank order): per k-block the
    sorted uniforms of the block, matching the kept relative order."""
    ks = np.asarray(ks)
    u = gen.random(ks.shape[0])
    t = np.empty(ks.shape[0])
    lo = 0
    for hi in range(1, ks.shape[0] + 1):
        if hi == ks.shape[0] or ks[hi] != ks[lo]:
            seg = np.sort(u[lo:hi])
            t[lo:hi] = -(ks[lo] + 1) * delta1 + seg * delta1
            lo = hi
    return t


def assign_times(pset: IntervalClusterSet, cid: int, seed: int) -> np.ndarray:
    """Precise times of one cluster from the conditional law given the
    partial information; always respects the kept relative order.  Rejects
    inconsistent partial information (ranks out of interval order)."""
    sl = pset.cluster_slice(cid)
    ks = pset.k[sl]
    if np.any(np.diff(ks) > 0):
        raise ValueError("ranks inconsistent with interval order")
    gen = rng.generator(seed, rng.TIME_ASSIGN, cid)
    return _draw_block_times(gen, ks, pset.grid.delta1)


def _assign_times_all(pset: IntervalClusterSet, gen) -> np.ndarray:
    """Vectorized time assignment for every cluster at once."""
    N = pset.n_particles
    if N == 0:
        return np.empty(0)
    block_change = np.ones(N, bool)
    block_change[1:] = (np.diff(pset.cluster_id) != 0) | (np.diff(pset.k) != 0)
    block_id = np.cumsum(block_change) - 1
    u = gen.random(N)
    order = np.lexsort((u, block_id))
    u_sorted = u[order]
    return -(pset.k + 1) * pset.grid.delta1 + u_sorted * pset.grid.delta1


# ---------------------------------------------------------------------------
# Bad/good event probabilities
# ---------------------------------------------------------------------------

def bad_event_probability(pset: IntervalClusterSet, cid: int, delta: float,
                          seed: int = 0, mc_samples: int = 4096) -> float:
    """P(two particles of the cluster within time delta | partial info).

    Exact (uniform spacings) when the cluster is a single k-block; Monte
    Carlo over time assignments otherwise.
    """
    sl = pset.cluster_slice(cid)
    ks = pset.k[sl]
    c = ks.shape[0]
    if c < 2:
        return 0.0
    d1 = pset.grid.delta1
    if ks.min() == ks.max():
        frac = 1.0 - (c - 1) * delta / d1
        return 1.0 - max(0.0, frac) ** c if frac > 0 else 1.0
    gen = rng.generator(seed, rng.TIME_ASSIGN, cid, 999)
    hits = 0
    for _ in range(mc_samples):
        t = _draw_block_times(gen, ks, d1)
        if np.min(np.diff(t)) < delta:
            hits += 1
    p = hits / mc_samples
    return min(max(p, 0.5 / mc_samples), 1.0 - 0.5 / mc_samples)


def crossover_size_cap(q: float, q2: float, delta: float, delta1: float) -> int:
    """Largest particle count c with (q'-q)^c >= 2 c^2 delta/delta1, the
    regime where the good event provably outweighs the bad one (0 if none).

    This realizes the existence argument for the size threshold: below the
    cap the exchange has room on the nose, so it is performed in full.
    """
    bound = 2.0 * delta / delta1
    gap = q2 - q
    cap = 0
    for c in range(1, 10_000):
        # LHS shrinks geometrically, RHS grows: first failure is final
        if gap ** c >= bound * c * c:
            cap = c
        else:
            break
    return cap


# ---------------------------------------------------------------------------
# Cluster and diagram coupling
# ---------------------------------------------------------------------------

@dataclass
class CoupledCluster:
    """One cluster's coupled outcome: locations, times and marks per copy."""

    times1: np.ndarray
    marks1: np.ndarray
    times2: np.ndarray
    marks2: np.ndarray
    size: int
    b_event: bool
    g_event: bool
    crossed_over: bool
    oversized: bool


def couple_cluster(pset: IntervalClusterSet, cid: int, q: float, q2: float,
                   delta: float, seed: int,
                   size_cap: int | None = None) -> CoupledCluster:
    """Draw one cluster's coupled pair under the modified coupling.

    Tentative marks and uniform labels are redrawn here (fresh independent
    coupling of the same partial information).  Clusters larger than the
    size cap keep the unmodified coupling.
    """
    if not 0 < q <= q2 < 1:
        raise ValueError("need 0 < q <= q' < 1")
    sl = pset.cluster_slice(cid)
    ks = pset.k[sl]
    c = ks.shape[0]
    d1 = pset.grid.delta1
    gen = rng.generator(seed, rng.COUPLING, cid)
    if size_cap is None:
        size_cap = crossover_size_cap(q, q2, delta, d1)
    tent = gen.integers(0, 4, c).astype(np.int8)
    u = gen.random(c)
    t = _draw_block_times(gen, ks, d1)
    marks1 = np.where(u < q, tent, STAR).astype(np.int8)
    marks2 = np.where(u < q2, tent, STAR).astype(np.int8)
    b_event = bool(c >= 2 and np.min(np.diff(t)) < delta)
    g_event = bool(c >= 1 and np.all((q < u) & (u < q2)))
    oversized = c > size_cap
    times2 = t
    crossed = False
    if not oversized and c >= 2:
        pb = bad_event_probability(pset, cid, delta, seed=seed)
        pg = (q2 - q) ** c
        p_bp = pb * (1.0 - pg)
        p_gnb = pg * (1.0 - pb)
        a = min(p_bp, p_gnb)
        if b_event and not g_event and a > 0:
            if gen.random() < a / p_bp:
                t2 = _rejection_times(gen, ks, d1, delta, want_bad=False)
                if t2 is not None:
                    times2 = t2
                    marks2 = tent.copy()
                    crossed = True
        elif g_event and not b_event and a > 0:
            if gen.random() < a / p_gnb:
                t2 = _rejection_times(gen, ks, d1, delta, want_bad=True)
                u2 = _rejection_labels(gen, c, q, q2)
                if t2 is not None and u2 is not None:
                    times2 = t2
                    marks2 = np.where(u2 < q2, tent, STAR).astype(np.int8)
                    crossed = True
    return CoupledCluster(times1=t, marks1=marks1, times2=times2,
                          marks2=marks2, size=c, b_event=b_event,
                          g_event=g_event, crossed_over=crossed,
                          oversized=oversized)


def _rejection_times(gen, ks, d1, delta, want_bad):
    """Times conditioned on the bad event (or its complement) by rejection."""
    for _ in range(_REJECTION_CAP):
        t = _draw_block_times(gen, ks, d1)
        bad = bool(np.min(np.diff(t)) < delta) if ks.shape[0] >= 2 else False
        if bad == want_bad:
            return t
    return None


def _rejection_labels(gen, c, q, q2):
    """Uniform labels conditioned on NOT all lying in (q, q2)."""
    for _ in range(_REJECTION_CAP):
        u = gen.random(c)
        if not np.all((q < u) & (u < q2)):
            return u
    return None


@dataclass
class CoupledDiagrams:
    """A coupled pair of diagrams with per-cluster audit flags."""

    copy1: Diagram
    copy2: Diagram
    q: float
    q2: float
    delta: float
    delta1: float
    size_cap: int
    cluster_sizes: np.ndarray
    b_flags: np.ndarray
    g_flags: np.ndarray
    crossed_flags: np.ndarray
    oversized_flags: np.ndarray
    seed: int

    @property
    def max_cluster_size(self) -> int:
        return int(self.cluster_sizes.max()) if self.cluster_sizes.size else 0

    @property
    def any_oversized(self) -> bool:
        return bool(self.oversized_flags.any())

    def audit_record(self) -> dict:
        sizes = self.cluster_sizes
        hist = np.bincount(sizes) if sizes.size else np.zeros(1, int)
        return dict(q=self.q, q2=self.q2, delta=self.delta, delta1=self.delta1,
                    size_cap=self.size_cap, seed=self.seed,
                    n_clusters=int(sizes.size),
                    max_cluster_size=self.max_cluster_size,
                    cluster_size_hist=hist.tolist(),
                    n_bad=int(self.b_flags.sum()),
                    n_good=int(self.g_flags.sum()),
                    n_crossed=int(self.crossed_flags.sum()),
                    n_oversized=int(self.oversized_flags.sum()))


def couple_diagrams(geometry: GeometryPlan, q: float, q2: float,
                    seed: int, delta: float | None = None,
                    delta1: float | None = None, alpha: float = 0.25,
                    size_cap: int | None = None) -> CoupledDiagrams:
    """Assemble a coupled diagram pair cluster by cluster, independently.

    Fast path: the whole scatter is resolved with vectorized marks/labels/
    times; only clusters eligible for the cross-over (2 <= size <= cap and
    in B or G) are revisited individually.
    """
    if not 0 < q <= q2 < 1:
        raise ValueError("need 0 < q <= q' < 1")
    n = geometry.n
    if delta is None:
        delta = float(n) ** (-alpha)
    if delta1 is None:
        delta1 = default_delta1(n, alpha)
    pset = sample_partial_information(geometry, delta1, seed)
    gen = rng.generator(seed, rng.COUPLING)
    times = _assign_times_all(pset, gen)
    marks1 = np.where(pset.u < q, pset.tentative, STAR).astype(np.int8)
    marks2 = np.where(pset.u < q2, pset.tentative, STAR).astype(np.int8)
    nC = pset.n_clusters
    cap = crossover_size_cap(q, q2, delta, delta1) if size_cap is None \
        else int(size_cap)
    b_flags = np.zeros(nC, bool)
    if pset.n_particles:
        same = np.diff(pset.cluster_id) == 0
        gaps = np.diff(times)
        bad_pair = same & (gaps < delta)
        np.logical_or.at(b_flags, pset.cluster_id[1:][bad_pair], True)
        in_window = (q < pset.u) & (pset.u < q2)
        g_flags = np.ones(nC, bool)
        np.logical_and.at(g_flags, pset.cluster_id, in_window)
    else:
        g_flags = np.zeros(nC, bool)
    sizes = pset.cluster_sizes
    oversized = sizes > cap
    crossed = np.zeros(nC, bool)
    times2 = times.copy()
    eligible = np.flatnonzero((sizes >= 2) & ~oversized & (b_flags | g_flags))
    for cid in eligible:
        sl = pset.cluster_slice(cid)
        ks = pset.k[sl]
        c = int(sizes[cid])
        cgen = rng.generator(seed, rng.COUPLING, int(cid) + 1)
        pb = bad_event_probability(pset, int(cid), delta, seed=seed)
        pg = (q2 - q) ** c
        p_bp = pb * (1.0 - pg)
        p_gnb = pg * (1.0 - pb)
        a = min(p_bp, p_gnb)
        if a <= 0:
            continue
        if b_flags[cid] and not g_flags[cid]:
            if cgen.random() < a / p_bp:
                t2 = _rejection_times(cgen, ks, delta1, delta, want_bad=False)
                if t2 is not None:
                    times2[sl] = t2
                    marks2[sl] = pset.tentative[sl]
                    crossed[cid] = True
        elif g_flags[cid] and not b_flags[cid]:
            if cgen.random() < a / p_gnb:
                t2 = _rejection_times(cgen, ks, delta1, delta, want_bad=True)
                u2 = _rejection_labels(cgen, c, q, q2)
                if t2 is not None and u2 is not None:
                    times2[sl] = t2
                    marks2[sl] = np.where(u2 < q2, pset.tentative[sl],
                                          STAR).astype(np.int8)
                    crossed[cid] = True
    box = geometry.box_B
    vx = (pset.ix + box.x0).astype(np.int32)
    vy = (pset.iy + box.y0).astype(np.int32)
    depth = pset.grid.depth
    grid = Grid(box)
    copy1 = diagram_from_points(geometry, q_params(q), seed, grid, depth,
                                vx, vy, times.copy(), marks1)
    copy2 = diagram_from_points(geometry, q_params(q2), seed, grid, depth,
                                vx.copy(), vy.copy(), times2, marks2)
    return CoupledDiagrams(copy1=copy1, copy2=copy2, q=q, q2=q2, delta=delta,
                           delta1=delta1, size_cap=cap, cluster_sizes=sizes,
                           b_flags=b_flags, g_flags=g_flags,
                           crossed_flags=crossed, oversized_flags=oversized,
                           seed=seed)


# ---------------------------------------------------------------------------
# Stability verification
# ---------------------------------------------------------------------------

@dataclass
class StabilityReport:
    """Per-pair audit: occupied targets of copy 1 lacking a stable witness
    in copy 2, with the oversized-cluster diagnostic."""

    n: int
    delta: float
    occupied: int
    failures: list
    any_oversized: bool
    max_cluster_size: int
    size_cap: int

    @property
    def n_failures(self) -> int:
        return len(self.failures)

    def to_dict(self) -> dict:
        return dict(n=self.n, delta=self.delta, occupied=self.occupied,
                    failures=[list(map(int, f)) for f in self.failures],
                    any_oversized=self.any_oversized,
                    max_cluster_size=self.max_cluster_size,
                    size_cap=self.size_cap)


def verify_stability(coupled: CoupledDiagrams, n: int | None = None,
                     delta: float | None = None,
                     box: Box | None = None) -> StabilityReport:
    """For every x in the inner box occupied in copy 1, look for a
    delta-stable witness in copy 2; record failures and the diagnostic."""
    geometry = coupled.copy1.geometry
    if n is None:
        n = geometry.n
    if delta is None:
        delta = coupled.delta
    if box is None:
        box = geometry.box_L
    occ1 = occupancy_field(coupled.copy1, n, box=box)
    stable2 = stable_occupancy_field(coupled.copy2, n, delta, box=box)
    failing = occ1.bits & ~stable2.bits
    failures = [(box.x0 + ij[0], box.y0 + ij[1])
                for ij in np.argwhere(failing)]
    return StabilityReport(n=n, delta=delta, occupied=occ1.occupied,
                           failures=failures,
                           any_oversized=coupled.any_oversized,
                           max_cluster_size=coupled.max_cluster_size,
                           size_cap=coupled.size_cap)
