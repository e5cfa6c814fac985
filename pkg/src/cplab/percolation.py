"""Percolation observables of occupancy fields.

Clusters of occupied vertices under 4-neighbour adjacency and their size
tail, box-crossing events, the cylinder crossing event with its square-root
trick decomposition, Monte Carlo event probabilities, the mixing/positive
association report for distant boxes, and the finite-size criterion report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, optimize, special

from . import rng
from .spacetime import Box, GeometryPlan, RateParams, sample_diagram
from .reachability import OccupancyField, occupancy_field, sample_occupancy_field

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass
class ClusterStats:
    """Multiset of occupied 4-connected cluster sizes on a box."""

    sizes: np.ndarray
    box: Box
    count: int

    @property
    def occupied(self) -> int:
        return int(self.sizes.sum())


def extract_clusters(field: OccupancyField) -> ClusterStats:
    """Label occupied clusters (4-adjacency; seam-aware on cylinders)."""
    labels, n = ndimage.label(field.bits, structure=_FOUR_CONN)
    sizes = np.bincount(labels.ravel())[1:]
    if field.wrap_columns is not None and field.box.width >= field.wrap_columns:
        # merge clusters touching across the seam column
        parent = list(range(n + 1))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        left, right = labels[0, :], labels[-1, :]
        for a, b in zip(left, right):
            if a and b:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[rb] = ra
        merged = {}
        for lbl in range(1, n + 1):
            merged.setdefault(find(lbl), 0)
            merged[find(lbl)] += sizes[lbl - 1]
        sizes = np.array(sorted(merged.values()), dtype=np.int64)
    else:
        sizes = np.sort(sizes.astype(np.int64))
    return ClusterStats(sizes=sizes, box=field.box, count=len(sizes))


@dataclass
class TailFit:
    """One tail model fitted by maximum likelihood on sizes >= tail_floor."""

    model: str
    rate_or_exponent: float
    tail_floor: int
    goodness: float
    degenerate: bool = False


@dataclass
class TailFitPair:
    exponential: TailFit
    power_law: TailFit
    n_tail: int
    note: str = ("fit policy: both models are always reported; choosing "
                 "between them is the caller's scientific judgement")


class InsufficientTailError(ValueError):
    """Fewer than 50 clusters at or above the tail floor."""


def fit_tail(stats: ClusterStats | np.ndarray, tail_floor: int = 10) -> TailFitPair:
    """Fit exponential (geometric) and power-law (zeta) tails side by side.

    Both models are always reported; no selection is made here.  The
    exponential rate is the MLE of P(S = s) ~ exp(-rate * s) on integers
    s >= tail_floor; the power-law exponent is the MLE of s^(-a)/zeta(a, floor).
    """
    sizes = stats.sizes if isinstance(stats, ClusterStats) else np.asarray(stats)
    tail = sizes[sizes >= tail_floor].astype(np.float64)
    if tail.size < 50:
        raise InsufficientTailError(
            f"need >= 50 clusters with size >= {tail_floor}, have {tail.size}")
    excess = tail - tail_floor
    mean_excess = float(excess.mean())
    if mean_excess == 0.0:
        exp_fit = TailFit("exponential", math.inf, tail_floor, math.nan,
                          degenerate=True)
        pl_fit = TailFit("power_law", math.inf, tail_floor, math.nan,
                         degenerate=True)
        return TailFitPair(exp_fit, pl_fit, int(tail.size))
    # geometric MLE: P(S = floor + k) = (1 - e^-r) e^{-r k}
    r = math.log1p(1.0 / mean_excess)
    ll_exp = tail.size * math.log(-math.expm1(-r)) - r * float(excess.sum())
    exp_fit = TailFit("exponential", r, tail_floor, ll_exp)

    logs = float(np.log(tail).sum())

    def neg_ll(a):
        return a * logs + tail.size * math.log(special.zeta(a, tail_floor))

    res = optimize.minimize_scalar(neg_ll, bounds=(1.000001, 40.0),
                                   method="bounded")
    pl_fit = TailFit("power_law", float(res.x), tail_floor, -float(res.fun))
    return TailFitPair(exp_fit, pl_fit, int(tail.size))


@dataclass(frozen=True)
class CrossingSpec:
    """An occupied-crossing event of a rectangle within a field."""

    rect: Box
    direction: str = "horizontal"
    wrap: str = "none"

    def __post_init__(self):
        if self.direction not in ("horizontal", "vertical"):
            raise ValueError(f"bad direction {self.direction!r}")
        if self.wrap not in ("none", "cylinder"):
            raise ValueError(f"bad wrap {self.wrap!r}")


def _window_bits(field: OccupancyField, rect: Box) -> np.ndarray:
    """Bits of a rectangle; x-range may wrap around a cylinder field."""
    b = field.box
    ys = slice(rect.y0 - b.y0, rect.y1 - b.y0 + 1)
    if field.wrap_columns is not None:
        cols = np.arange(rect.x0, rect.x1 + 1) % field.wrap_columns
        return field.bits[cols - b.x0][:, ys]
    if not b.contains_box(rect):
        raise ValueError(f"rect {rect} outside field box {b}")
    return field.bits[rect.x0 - b.x0: rect.x1 - b.x0 + 1, ys]


def has_crossing(field: OccupancyField, spec: CrossingSpec) -> int:
    """1 iff an occupied 4-connected path joins the two opposite sides."""
    if spec.wrap == "cylinder" and spec.rect.width != field.wrap_columns:
        raise ValueError("cylinder wrap applies to the full wrapped width only")
    bits = _window_bits(field, spec.rect)
    if spec.direction == "vertical":
        bits = bits.T
    if not bits[0, :].any() or not bits[-1, :].any():
        return 0
    labels, _ = ndimage.label(bits, structure=_FOUR_CONN)
    if spec.wrap == "cylinder":
        # adjacency across the seam: treated by doubling the strip
        doubled = np.concatenate([bits, bits], axis=0)
        labels, _ = ndimage.label(doubled, structure=_FOUR_CONN)
        labels = labels[: bits.shape[0]]
    left = set(labels[0, :][bits[0, :]].tolist())
    right = set(labels[-1, :][bits[-1, :]].tolist())
    return 1 if left & right else 0


def crossing_h3n(geometry: GeometryPlan) -> CrossingSpec:
    """H(3n, n): horizontal crossing of [0,3n] x [0,n]."""
    n = geometry.n
    return CrossingSpec(Box(0, 0, 3 * n, n), "horizontal")


def crossing_v3n(geometry: GeometryPlan) -> CrossingSpec:
    """V(3n, n): vertical crossing of [0,3n] x [0,n]."""
    n = geometry.n
    return CrossingSpec(Box(0, 0, 3 * n, n), "vertical")


def translate_crossings(field: OccupancyField, n: int) -> list[int]:
    """Square-root trick: crossings of the six 3n x n translates
    [j n, (j+3) n (mod 6n)] x [n, 2n] of the cylinder band."""
    out = []
    for j in range(6):
        rect = Box(j * n, n, (j + 3) * n, 2 * n)
        out.append(has_crossing(field, CrossingSpec(rect, "horizontal")))
    return out


def cylinder_event(field: OccupancyField, n: int) -> int:
    """1 iff some horizontal translate of L_n on the cylinder has an
    occupied horizontal crossing (translates [a, a+4n] x [n, 2n], all a)."""
    if field.wrap_columns is None:
        raise ValueError("cylinder_event needs a field on the wrapped B-box")
    cols = field.wrap_columns
    for a in range(cols):
        rect = Box(a, n, a + 4 * n, 2 * n)
        if has_crossing(field, CrossingSpec(rect, "horizontal")):
            return 1
    return 0


@dataclass
class EventEstimate:
    """Monte Carlo frequency with a binomial (Wald) confidence interval."""

    estimate: float
    ci_lo: float
    ci_hi: float
    se: float
    replicas: int
    successes: int
    level: float

    def to_dict(self) -> dict:
        return dict(estimate=self.estimate, ci_lo=self.ci_lo, ci_hi=self.ci_hi,
                    se=self.se, replicas=self.replicas,
                    successes=self.successes, level=self.level)


def binomial_estimate(successes: int, replicas: int, level: float = 0.95) -> EventEstimate:
    from scipy.stats import norm
    p = successes / replicas
    se = math.sqrt(p * (1.0 - p) / replicas)
    z = float(norm.ppf(0.5 + level / 2.0))
    return EventEstimate(p, max(0.0, p - z * se), min(1.0, p + z * se),
                         se, replicas, successes, level)


def estimate_event_probability(event, geometry: GeometryPlan,
                               params: RateParams, replicas: int, seed: int,
                               level: float = 0.95,
                               field_box: Box | None = None) -> EventEstimate:
    """Monte Carlo frequency of ``event`` over sampled truncated fields.

    ``event`` is a CrossingSpec or a callable OccupancyField -> bit; fields
    are sampled on ``field_box`` (default: the event rectangle, or box_L).
    """
    if replicas < 30:
        raise ValueError("need at least 30 replicas")
    if isinstance(event, CrossingSpec):
        spec = event
        box = field_box or spec.rect
        fn = lambda f: has_crossing(f, spec)
    else:
        fn = event
        box = field_box or geometry.box_L
    hits = 0
    for i in range(replicas):
        f = sample_occupancy_field(geometry, params,
                                   rng.replica_seed(seed, i), box=box)
        hits += int(bool(fn(f)))
    return binomial_estimate(hits, replicas, level)


@dataclass
class MixingReport:
    """Joint vs product probabilities of increasing events on distant boxes."""

    k: int
    joint: EventEstimate
    marginals: list
    product_of_marginals: float
    footprints_disjoint: bool
    positive_association_ok: bool
    factorization_exact: bool
    replicas: int
    note: str = ("stationary-measure quantities are proxied by the truncated "
                 "field at the same scale n")

    def to_dict(self) -> dict:
        return dict(k=self.k, joint=self.joint.to_dict(),
                    marginals=[m.to_dict() for m in self.marginals],
                    product_of_marginals=self.product_of_marginals,
                    footprints_disjoint=self.footprints_disjoint,
                    positive_association_ok=self.positive_association_ok,
                    factorization_exact=self.factorization_exact,
                    replicas=self.replicas, note=self.note)


def mixing_check(geometry: GeometryPlan, params: RateParams,
                 rectangles: list[Box], events: list[CrossingSpec] | None,
                 replicas: int, seed: int, level: float = 0.95) -> MixingReport:
    """Empirical check of positive association and exact factorization of
    the truncated field over boxes at pairwise distance > 2 floor(sqrt n).

    All events are evaluated on fields computed from one shared diagram per
    replica; each field only reads its own dependency footprint, so when the
    footprints are disjoint the joint law factorizes exactly (structural
    independence), which the report asserts alongside the sampled estimates.
    """
    n = geometry.n
    r = geometry.trunc_radius
    k = len(rectangles)
    for i in range(k):
        for j in range(i + 1, k):
            d = rectangles[i].distance(rectangles[j])
            if d <= 2 * r:
                raise ValueError(
                    f"rectangles {i},{j} at distance {d} <= 2*{r}")
    if events is None:
        events = [CrossingSpec(b, "horizontal") for b in rectangles]
    # disjointness of the dilated footprints is what factorization rests on
    dil = [b.dilate(r) for b in rectangles]
    disjoint = all(dil[i].distance(dil[j]) >= 1
                   for i in range(k) for j in range(i + 1, k))
    bounding = Box(min(b.x0 for b in dil), min(b.y0 for b in dil),
                   max(b.x1 for b in dil), max(b.y1 for b in dil))
    joint_hits = 0
    hits = [0] * k
    for i in range(replicas):
        dia = sample_diagram(geometry, params, rng.replica_seed(seed, i),
                             box=bounding, depth=geometry.trunc_depth)
        vals = []
        for rect, ev in zip(rectangles, events):
            f = occupancy_field(dia, n, box=rect)
            vals.append(has_crossing(f, ev))
        for j, v in enumerate(vals):
            hits[j] += v
        joint_hits += int(all(vals))
    joint = binomial_estimate(joint_hits, replicas, level)
    margs = [binomial_estimate(h, replicas, level) for h in hits]
    prod = float(np.prod([m.estimate for m in margs]))
    se_prod = prod * math.sqrt(sum((m.se / m.estimate) ** 2
                                   for m in margs if m.estimate > 0))
    pa_ok = prod <= joint.estimate + 3 * math.hypot(joint.se, se_prod)
    return MixingReport(k=k, joint=joint, marginals=margs,
                        product_of_marginals=prod,
                        footprints_disjoint=disjoint,
                        positive_association_ok=bool(pa_ok),
                        factorization_exact=bool(disjoint),
                        replicas=replicas)


@dataclass
class FiniteSizeReport:
    """Which branch of the finite-size criterion the estimates fall in."""

    eps_hat: float
    v_estimate: EventEstimate
    h_estimate: EventEstimate
    branch: str  # "a", "b", or "neither"

    def to_dict(self) -> dict:
        return dict(eps_hat=self.eps_hat, v=self.v_estimate.to_dict(),
                    h=self.h_estimate.to_dict(), branch=self.branch)


def finite_size_report(geometry: GeometryPlan, params: RateParams,
                       eps_hat: float, replicas: int, seed: int,
                       level: float = 0.95) -> FiniteSizeReport:
    """Estimate V(3N,N) and H(3N,N) and report branch (a), (b) or neither:
    (a) vertical crossing of the wide box is rare (< eps_hat), the
    exponential-decay side; (b) horizontal crossing is overwhelming
    (> 1 - eps_hat), the percolation side."""
    v = estimate_event_probability(crossing_v3n(geometry), geometry, params,
                                   replicas, rng.replica_seed(seed, 101), level)
    h = estimate_event_probability(crossing_h3n(geometry), geometry, params,
                                   replicas, rng.replica_seed(seed, 102), level)
    if v.estimate < eps_hat:
        branch = "a"
    elif h.estimate > 1.0 - eps_hat:
        branch = "b"
    else:
        branch = "neither"
    return FiniteSizeReport(eps_hat=eps_hat, v_estimate=v, h_estimate=h,
                            branch=branch)
