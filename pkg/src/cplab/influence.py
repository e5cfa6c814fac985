"""Pivotality machinery: exact influences on small product spaces, the
derivative form of Russo's formula, symmetry classes of the discretized
cylinder variables, Monte Carlo pivotality, and threshold-window sweeps.

The influence of a coordinate is the probability that flipping it flips
the event.  For increasing events the per-class influence sums equal the
partial derivatives of the event probability in the class parameters;
``russo_derivative_check`` verifies that identity exactly on enumerable
instances.  Sharp-threshold inequalities involve a universal constant with
no numeric value pinned anywhere, so reports expose the empirical ratio
rather than asserting a bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import rng
from .spacetime import Box, GeometryPlan, RateParams, q_params
from .reachability import OccupancyField
from .discretization import XField, certified_field, sample_xfield, _floor_layer
from .percolation import binomial_estimate, cylinder_event

_MAX_EXACT_VARS = 24


@dataclass(frozen=True)
class ProductSpace:
    """Independent 0/1 coordinates with per-class success probabilities."""

    n_vars: int
    class_of: tuple
    p_of_class: tuple

    def __post_init__(self):
        if self.n_vars < 1 or len(self.class_of) != self.n_vars:
            raise ValueError("class_of must assign every variable")
        if any(c < 0 or c >= len(self.p_of_class) for c in self.class_of):
            raise ValueError("class id out of range")
        if any(not (0.0 < p < 1.0) for p in self.p_of_class):
            raise ValueError("class probabilities must lie in (0,1)")

    def probs(self) -> np.ndarray:
        return np.array([self.p_of_class[c] for c in self.class_of])


def uniform_space(n_vars: int, p: float) -> ProductSpace:
    return ProductSpace(n_vars, tuple([0] * n_vars), (p,))


def two_class_space(n_vars: int, in_v: set, p1: float, p2: float) -> ProductSpace:
    """P_{p1,p2}: coordinates in ``in_v`` succeed w.p. p1, the rest w.p. p2."""
    return ProductSpace(n_vars,
                        tuple(0 if i in in_v else 1 for i in range(n_vars)),
                        (p1, p2))


@dataclass
class MonotoneEvent:
    """Event evaluator over assignments; vectorized over rows of a matrix."""

    evaluator: object
    declared_monotone: bool = True
    name: str = ""

    def __call__(self, assignments: np.ndarray) -> np.ndarray:
        out = np.asarray(self.evaluator(assignments))
        return out.astype(bool)


def scalar_event(fn, name="") -> MonotoneEvent:
    def vec(rows):
        return np.fromiter((fn(r) for r in rows), bool, len(rows))
    return MonotoneEvent(evaluator=vec, name=name)


def spot_check_monotone(event: MonotoneEvent, n_vars: int, seed: int = 0,
                        trials: int = 200) -> bool:
    """Mutation check of a declared-monotone event: flipping a single
    coordinate 0 -> 1 must never flip the value 1 -> 0."""
    gen = np.random.default_rng(seed)
    rows = gen.random((trials, n_vars)) < gen.uniform(0.2, 0.8, (trials, 1))
    base = event(rows)
    for _ in range(4):
        flips = gen.integers(0, n_vars, trials)
        mutated = rows.copy()
        mutated[np.arange(trials), flips] = True
        if np.any(base & ~event(mutated)):
            return False
    return True


@dataclass
class InfluenceReport:
    """Per-variable / per-class pivotality with the derived summaries."""

    influences: np.ndarray          # per variable
    stderr: np.ndarray              # per variable (zero for exact reports)
    class_influence: dict
    class_stderr: dict
    p_event: float
    sum_influences: float
    m: int                          # multiplicity of the maximal influence
    russo_residual: float | None = None
    talagrand_ratio: float | None = None
    member_estimates: dict = dataclass_field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(influences=self.influences.tolist(),
                    stderr=self.stderr.tolist(),
                    class_influence={str(k): v for k, v in self.class_influence.items()},
                    class_stderr={str(k): v for k, v in self.class_stderr.items()},
                    p_event=self.p_event, sum_influences=self.sum_influences,
                    m=self.m, russo_residual=self.russo_residual,
                    talagrand_ratio=self.talagrand_ratio)


def _enumerate_event(space: ProductSpace, event: MonotoneEvent):
    nv = space.n_vars
    if nv > _MAX_EXACT_VARS:
        raise ValueError(f"exact enumeration limited to {_MAX_EXACT_VARS} variables")
    ids = np.arange(1 << nv, dtype=np.uint32)
    f = np.empty(1 << nv, bool)
    chunk = 1 << 16
    for lo in range(0, 1 << nv, chunk):
        part = ids[lo:lo + chunk]
        rows = ((part[:, None] >> np.arange(nv, dtype=np.uint32)[None, :]) & 1
                ).astype(bool)
        f[lo:lo + chunk] = event(rows)
    return ids, f


def _weights(space: ProductSpace, ids: np.ndarray,
             override: dict | None = None) -> np.ndarray:
    w = np.ones(ids.shape, np.float64)
    for i in range(space.n_vars):
        p = space.p_of_class[space.class_of[i]]
        if override and space.class_of[i] in override:
            p = override[space.class_of[i]]
        sel = ((ids >> np.uint32(i)) & 1).astype(bool)
        w *= np.where(sel, p, 1.0 - p)
    return w


def _exact_influences(space, ids, f, w):
    I = np.empty(space.n_vars)
    for i in range(space.n_vars):
        flip = ids ^ np.uint32(1 << i)
        I[i] = w[f != f[flip]].sum()
    return I


def influence_exact(space: ProductSpace, event: MonotoneEvent) -> InfluenceReport:
    """Exact influences, event probability and maximal-class multiplicity
    by full enumeration (n_vars <= 24)."""
    ids, f = _enumerate_event(space, event)
    w = _weights(space, ids)
    I = _exact_influences(space, ids, f, w)
    p_event = float(w[f].sum())
    top = I.max()
    m = int(np.sum(np.isclose(I, top, rtol=1e-09, atol=1e-15))) if top > 0 \
        else space.n_vars
    by_class = {}
    for i, c in enumerate(space.class_of):
        by_class.setdefault(c, 0.0)
        by_class[c] += float(I[i])
    return InfluenceReport(
        influences=I, stderr=np.zeros_like(I),
        class_influence=by_class,
        class_stderr={c: 0.0 for c in by_class},
        p_event=p_event, sum_influences=float(I.sum()), m=m,
        talagrand_ratio=_talagrand_ratio(space, p_event, float(I.sum()), m))


def _talagrand_ratio(space, p_event, sum_i, m) -> float | None:
    """Empirical K in sum_I >= P(1-P) log(m) / (K p2 log(2/p1)): the
    universal constant is unpinned, so only the observed ratio is reported."""
    if not (0.0 < p_event < 1.0) or m < 2 or sum_i <= 0:
        return None
    p1 = min(space.p_of_class)
    p2 = max(space.p_of_class)
    rhs_core = p_event * (1.0 - p_event) * math.log(m) / (p2 * math.log(2.0 / p1))
    return rhs_core / sum_i


def russo_derivative_check(space: ProductSpace, event: MonotoneEvent,
                           class_id: int, h: float = 1e-4) -> float:
    """|centered finite difference of P(A) in the class parameter minus the
    class influence sum|; zero (to quadrature error) for increasing events."""
    ids, f = _enumerate_event(space, event)
    w = _weights(space, ids)
    I = _exact_influences(space, ids, f, w)
    sum_class = sum(float(I[i]) for i, c in enumerate(space.class_of)
                    if c == class_id)
    p = space.p_of_class[class_id]
    if not (h < p < 1.0 - h):
        raise ValueError("finite difference step leaves (0,1)")
    up = float(_weights(space, ids, {class_id: p + h})[f].sum())
    dn = float(_weights(space, ids, {class_id: p - h})[f].sum())
    return abs((up - dn) / (2.0 * h) - sum_class)


# ---------------------------------------------------------------------------
# Cylinder symmetry classes and Monte Carlo pivotality
# ---------------------------------------------------------------------------

@dataclass
class XClassPartition:
    """Partition of (vertex, interval, mark) cells by (mark, k, row)."""

    geometry: GeometryPlan
    delta: float
    K: int
    shape: tuple
    classes: dict

    @property
    def n_vars(self) -> int:
        return int(np.prod(self.shape))

    def sizes(self) -> dict:
        return {k: len(v) for k, v in self.classes.items()}


def symmetry_classes(geometry: GeometryPlan, delta: float,
                     depth: float | None = None) -> XClassPartition:
    """Classes keyed by (mark, k, row): all columns of the cylinder play the
    same role for the translate-crossing event."""
    if not geometry.cylinder:
        raise ValueError("symmetry classes require the cylinder geometry")
    if depth is None:
        depth = geometry.time_depth
    K = int(math.ceil(depth / delta - 1e-12))
    nx = geometry.columns
    ny = geometry.box_B.height
    shape = (nx, ny, K, 5)
    classes = {}
    cols = np.arange(nx)
    for mark in range(5):
        for k in range(K):
            for row in range(ny):
                flat = np.ravel_multi_index(
                    (cols, np.full(nx, row), np.full(nx, k),
                     np.full(nx, mark)), shape)
                classes[(mark, k, row)] = flat
    return XClassPartition(geometry=geometry, delta=delta, K=K, shape=shape,
                           classes=classes)


def cylinder_certified_event(xfield: XField, n: int) -> int:
    """The crossing event: some horizontal translate of the inner band has a
    certified-occupancy horizontal crossing on the cylinder."""
    band = Box(xfield.box.x0, n, xfield.box.x1, 2 * n)
    bits = certified_field(xfield, n, band)
    f = OccupancyField(box=band, bits=bits, provenance={"kind": "eta_n_delta"},
                       wrap_columns=xfield.wrap_columns)
    return cylinder_event(f, n)


def event_footprint_rows_k(xfield: XField, n: int) -> tuple:
    """Rows and interval indices the cylinder event can possibly read."""
    r = math.isqrt(n)
    k_f = _floor_layer(xfield, math.sqrt(n))
    return (n - r, 2 * n + r), min(k_f + 1, xfield.K - 1)


def influence_mc(geometry: GeometryPlan, params: RateParams, delta: float,
                 replicas: int, seed: int,
                 classes: list | None = None,
                 level: float = 0.95) -> InfluenceReport:
    """Monte Carlo pivotality of the discretized cylinder variables for the
    translate-crossing event, by forced flips of rotating class members.

    Estimates pool within symmetry classes; per-member tallies are kept so
    translation invariance itself can be checked.  Variables never read by
    the event get influence exactly 0.
    """
    if replicas < 1000:
        raise ValueError("need at least 1000 replicas")
    n = geometry.n
    part = symmetry_classes(geometry, delta, depth=geometry.trunc_depth)
    keys = list(part.classes) if classes is None else list(classes)
    hits = {k: 0 for k in keys}
    tries = {k: 0 for k in keys}
    member_hits = {k: np.zeros(len(part.classes[k]), np.int64) for k in keys}
    member_tries = {k: np.zeros(len(part.classes[k]), np.int64) for k in keys}
    base_hits = 0
    for i in range(replicas):
        xf = sample_xfield(geometry, params, delta, rng.replica_seed(seed, i),
                           depth=geometry.trunc_depth)
        flat = xf.bits.reshape(-1)
        base = cylinder_certified_event(xf, n)
        base_hits += base
        for key in keys:
            members = part.classes[key]
            mi = i % len(members)
            idx = members[mi]
            old = flat[idx]
            flat[idx] = ~old
            flipped = cylinder_certified_event(xf, n)
            flat[idx] = old
            piv = int(flipped != base)
            hits[key] += piv
            tries[key] += 1
            member_hits[key][mi] += piv
            member_tries[key][mi] += 1
    class_inf = {k: hits[k] / tries[k] for k in keys}
    class_se = {k: math.sqrt(class_inf[k] * (1 - class_inf[k]) / tries[k])
                for k in keys}
    sizes = part.sizes()
    total = sum(class_inf[k] * sizes[k] for k in keys)
    top_key = max(keys, key=lambda k: class_inf[k])
    p_event = base_hits / replicas
    nvars = part.n_vars
    influences = np.full(nvars, np.nan)
    stderr = np.full(nvars, np.nan)
    for k in keys:
        influences[part.classes[k]] = class_inf[k]
        stderr[part.classes[k]] = class_se[k]
    member_est = {k: (member_hits[k], member_tries[k]) for k in keys}
    return InfluenceReport(
        influences=influences, stderr=stderr, class_influence=class_inf,
        class_stderr=class_se, p_event=p_event, sum_influences=float(total),
        m=sizes[top_key],
        talagrand_ratio=None,
        member_estimates=member_est)


@dataclass
class ThresholdWindowReport:
    """P(event) over a q-grid with the (eps, 1-eps) crossing window."""

    n: int
    eps: float
    q_grid: list
    estimates: list
    q_low: float | None
    q_high: float | None
    width: float | None
    width_se: float | None
    never_crossing: bool
    log_ratio: float  # log n / log(2/delta), the derivative-bound scale

    def to_dict(self) -> dict:
        return dict(n=self.n, eps=self.eps, q_grid=self.q_grid,
                    estimates=[e.to_dict() for e in self.estimates],
                    q_low=self.q_low, q_high=self.q_high, width=self.width,
                    width_se=self.width_se, never_crossing=self.never_crossing,
                    log_ratio=self.log_ratio)


def _crossing_point(qs, ps, ses, level_y):
    """First grid point where the estimate reaches the level (so a hard step
    event yields a zero-width window), with a slope-scaled standard error."""
    for j, p in enumerate(ps):
        if p >= level_y:
            if j > 0 and ps[j] > ps[j - 1]:
                slope = (ps[j] - ps[j - 1]) / (qs[j] - qs[j - 1])
                se = max(ses[j - 1], ses[j]) / slope
            else:
                se = (qs[1] - qs[0]) if len(qs) > 1 else 0.0
            return qs[j], se
    return None, None


def threshold_window(geometry: GeometryPlan, delta: float, q_grid: list,
                     replicas: int, seed: int, eps: float = 0.25,
                     event=None, level: float = 0.95) -> ThresholdWindowReport:
    """Estimate where P(event) crosses eps and 1-eps over the q-grid.

    Default event: the certified cylinder translate-crossing event.  Grids
    that never cross are reported as such rather than failing.
    """
    if len(q_grid) < 5:
        raise ValueError("need a grid of at least 5 q values")
    n = geometry.n
    if event is None:
        event = lambda xf: cylinder_certified_event(xf, n)
    estimates = []
    for gi, q in enumerate(q_grid):
        hit = 0
        for i in range(replicas):
            xf = sample_xfield(geometry, q_params(q), delta,
                               rng.replica_seed(seed, gi * 1_000_003 + i),
                               depth=geometry.trunc_depth)
            hit += int(bool(event(xf)))
        estimates.append(binomial_estimate(hit, replicas, level))
    qs = list(map(float, q_grid))
    ps = [e.estimate for e in estimates]
    ses = [e.se for e in estimates]
    q_low, se_low = _crossing_point(qs, ps, ses, eps)
    q_high, se_high = _crossing_point(qs, ps, ses, 1.0 - eps)
    width = width_se = None
    never = q_low is None or q_high is None
    if not never:
        width = q_high - q_low
        width_se = math.hypot(se_low, se_high)
    return ThresholdWindowReport(
        n=n, eps=eps, q_grid=qs, estimates=estimates, q_low=q_low,
        q_high=q_high, width=width, width_se=width_se, never_crossing=never,
        log_ratio=math.log(n) / math.log(2.0 / delta) if delta < 2.0 else math.nan)
