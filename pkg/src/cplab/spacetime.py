"""Lattice geometry, rate parametrizations, and the marked space-time diagram.

The diagram is the graphical representation of the contact process: on the
time axis of every vertex of a finite box live Poisson points, each marked
as one of four infection arrows (right/left/up/down, unit lattice steps) or
as a recovery mark (star).  Everything downstream (truncated occupancy,
crossings, couplings) is a deterministic function of one sampled diagram.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field as dataclasses_field
from fractions import Fraction

import numpy as np

from . import rng

# Mark codes.  Arrows carry the lattice step of the infection jump.
RIGHT, LEFT, UP, DOWN, STAR = 0, 1, 2, 3, 4
MARK_NAMES = ("right", "left", "up", "down", "star")
MARK_CODES = {name: code for code, name in enumerate(MARK_NAMES)}
ARROW_STEPS = ((1, 0), (-1, 0), (0, 1), (0, -1))

Q_MODE = "q_mode"
LAMBDA_MODE = "lambda_mode"


class InvariantViolation(RuntimeError):
    """A hard model invariant failed at runtime (exit code 3 in the CLI)."""


@dataclass(frozen=True)
class Box:
    """Integer rectangle [x0,x1] x [y0,y1], bounds inclusive."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise ValueError(f"empty box {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0 + 1

    @property
    def height(self) -> int:
        return self.y1 - self.y0 + 1

    @property
    def n_vertices(self) -> int:
        return self.width * self.height

    def contains(self, vx: int, vy: int) -> bool:
        return self.x0 <= vx <= self.x1 and self.y0 <= vy <= self.y1

    def contains_box(self, other: "Box") -> bool:
        return (self.x0 <= other.x0 and other.x1 <= self.x1
                and self.y0 <= other.y0 and other.y1 <= self.y1)

    def dilate(self, margin: int) -> "Box":
        return Box(self.x0 - margin, self.y0 - margin,
                   self.x1 + margin, self.y1 + margin)

    def distance(self, other: "Box") -> int:
        """L-infinity distance between two boxes (0 if they intersect)."""
        dx = max(self.x0 - other.x1, other.x0 - self.x1, 0)
        dy = max(self.y0 - other.y1, other.y0 - self.y1, 0)
        return max(dx, dy)

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)


def linf(v, w) -> int:
    return max(abs(v[0] - w[0]), abs(v[1] - w[1]))


@dataclass(frozen=True)
class GeometryPlan:
    """Scale-n boxes and truncation radii of the standard construction.

    The large box B = [0,6n] x [0,3n] holds the diagram, the inner box
    L = [n,5n] x [n,2n] holds the observed field; the truncation shell has
    L-infinity radius floor(sqrt(n)) and the time floor sits at -sqrt(n).
    ``cylinder`` identifies column 6n with column 0 (horizontal wrap).
    """

    n: int
    box_B: Box
    box_L: Box
    time_depth: float
    trunc_radius: int
    trunc_depth: float
    cylinder: bool = False

    @property
    def columns(self) -> int:
        """Number of distinct lattice columns (6n on the cylinder)."""
        return self.box_B.width - 1 if self.cylinder else self.box_B.width


def make_geometry(n: int, cylinder: bool = False) -> GeometryPlan:
    """Standard geometry at scale n. Rejects n < 1."""
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"scale n must be a positive integer, got {n!r}")
    n = int(n)
    r = math.isqrt(n)
    geom = GeometryPlan(
        n=n,
        box_B=Box(0, 0, 6 * n, 3 * n),
        box_L=Box(n, n, 5 * n, 2 * n),
        time_depth=float(n),
        trunc_radius=r,
        trunc_depth=math.sqrt(n),
        cylinder=cylinder,
    )
    # Sanity: shell of any vertex of L stays inside B, with room to spare
    # (the margin exceeds the truncation radius strictly for n >= 2).
    assert geom.box_L.x0 - geom.box_B.x0 >= n >= r
    assert geom.time_depth >= geom.trunc_depth
    return geom


@dataclass(frozen=True)
class RateParams:
    """Infection/recovery rates in one of two equivalent parametrizations.

    q_mode: every vertex carries a unit-density marked Poisson process and
    each point is an arrow of a given direction with probability q/4 or a
    star with probability 1-q.  lambda_mode: independent processes of rate
    lam per arrow direction and rate 1 for stars (total density 4*lam + 1).

    The parameter is held internally as an exact rational (the shortest
    decimal reading of the float, so q=0.8 means 4/5); mode conversions are
    exact and therefore round-trip exactly.
    """

    mode: str
    q: float | None = None
    lam: float | None = None
    exact: Fraction | None = dataclasses_field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.mode == Q_MODE:
            if self.q is None or not (0.0 < self.q < 1.0):
                raise ValueError(f"q must lie in (0,1), got {self.q!r}")
            if self.lam is not None:
                raise ValueError("q_mode params must not carry lam")
            if self.exact is None:
                object.__setattr__(self, "exact", Fraction(repr(self.q)))
        elif self.mode == LAMBDA_MODE:
            if self.lam is None or not (self.lam > 0.0):
                raise ValueError(f"lambda must be > 0, got {self.lam!r}")
            if self.q is not None:
                raise ValueError("lambda_mode params must not carry q")
            if self.exact is None:
                object.__setattr__(self, "exact", Fraction(repr(self.lam)))
        else:
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def total_rate(self) -> float:
        if self.mode == Q_MODE:
            return 1.0
        return 4.0 * self.lam + 1.0

    @property
    def arrow_prob(self) -> float:
        """Probability that a single point is an arrow of one fixed direction."""
        if self.mode == Q_MODE:
            return self.q / 4.0
        return self.lam / (4.0 * self.lam + 1.0)

    @property
    def star_prob(self) -> float:
        if self.mode == Q_MODE:
            return 1.0 - self.q
        return 1.0 / (4.0 * self.lam + 1.0)

    @property
    def q_value(self) -> float:
        """The q of the unit-density parametrization (converts if needed)."""
        if self.mode == Q_MODE:
            return self.q
        return reparametrize(self).q

    def to_dict(self) -> dict:
        return {"mode": self.mode, "q": self.q, "lam": self.lam}


def q_params(q: float) -> RateParams:
    return RateParams(mode=Q_MODE, q=float(q))


def lambda_params(lam: float) -> RateParams:
    return RateParams(mode=LAMBDA_MODE, lam=float(lam))


def reparametrize(params: RateParams) -> RateParams:
    """Convert q_mode <-> lambda_mode.

    lam = q / (4(1-q)) and q = 4*lam / (1 + 4*lam), evaluated on the exact
    rational parameter; composing the two directions is the identity.
    """
    if params.mode == Q_MODE:
        lam = params.exact / (4 * (1 - params.exact))
        return RateParams(mode=LAMBDA_MODE, lam=float(lam), exact=lam)
    q = 4 * params.exact / (1 + 4 * params.exact)
    return RateParams(mode=Q_MODE, q=float(q), exact=q)


@dataclass(frozen=True)
class MarkedPoint:
    """A single marked Poisson point (single-point API; bulk data is array-based)."""

    vertex: tuple[int, int]
    time: float
    mark: str

    def __post_init__(self):
        if self.mark not in MARK_CODES:
            raise ValueError(f"unknown mark {self.mark!r}")
        if self.time > 0:
            raise ValueError("diagram times are <= 0")


class Grid:
    """Row-major vertex indexing of a box, optionally wrapped in x (cylinder).

    On a cylinder of ``wrap_columns`` columns the x coordinate is taken
    modulo that count; the y direction never wraps.
    """

    def __init__(self, box: Box, wrap_columns: int | None = None):
        self.box = box
        self.wrap = wrap_columns is not None
        self.nx = wrap_columns if self.wrap else box.width
        self.ny = box.height
        self.n_vertices = self.nx * self.ny

    def vid(self, vx, vy):
        """Vertex id; vectorized over numpy inputs."""
        ix = vx - self.box.x0
        if self.wrap:
            ix = ix % self.nx
        return ix * self.ny + (vy - self.box.y0)

    def vertex(self, vid: int) -> tuple[int, int]:
        ix, iy = divmod(int(vid), self.ny)
        return (ix + self.box.x0, iy + self.box.y0)

    def in_grid(self, vx, vy):
        ok_y = (self.box.y0 <= vy) & (vy <= self.box.y1)
        if self.wrap:
            return ok_y
        return ok_y & (self.box.x0 <= vx) & (vx <= self.box.x1)

    def distance(self, v, w) -> int:
        """L-infinity distance, around the cylinder if wrapped."""
        dx = abs(v[0] - w[0])
        if self.wrap:
            dx = dx % self.nx
            dx = min(dx, self.nx - dx)
        return max(dx, abs(v[1] - w[1]))


class Diagram:
    """A sampled marked Poisson diagram on box x [-depth, 0].

    Points are stored vertex-major with times strictly decreasing within
    each vertex (exact float ties are nudged by one ulp at construction).
    Immutable by convention; safe to share across workers.
    """

    def __init__(self, geometry: GeometryPlan, params: RateParams, seed: int,
                 grid: Grid, depth: float,
                 vx: np.ndarray, vy: np.ndarray, t: np.ndarray, mark: np.ndarray):
        self.geometry = geometry
        self.params = params
        self.seed = seed
        self.grid = grid
        self.depth = float(depth)
        self.vx = vx
        self.vy = vy
        self.t = t
        self.mark = mark
        vids = grid.vid(vx, vy)
        counts = np.bincount(vids, minlength=grid.n_vertices)
        self.start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self._star_env = None

    @property
    def n_points(self) -> int:
        return self.t.shape[0]

    def points_for(self, vx: int, vy: int):
        """(times, marks) at one vertex, times strictly decreasing."""
        v = self.grid.vid(vx, vy)
        lo, hi = self.start[v], self.start[v + 1]
        return self.t[lo:hi], self.mark[lo:hi]

    def slice_for_vid_range(self, vid_lo: int, vid_hi: int):
        """Contiguous point range [lo, hi) covering vids [vid_lo, vid_hi]."""
        return int(self.start[vid_lo]), int(self.start[vid_hi + 1])

    # -- serialization (line-oriented debugging/regression format) --

    def dump_text(self, path) -> None:
        header = {
            "geometry": _geometry_to_dict(self.geometry),
            "params": self.params.to_dict(),
            "seed": int(self.seed),
            "depth": self.depth,
            "n_points": int(self.n_points),
        }
        with open(path, "w") as fh:
            fh.write(json.dumps(header) + "\n")
            for i in range(self.n_points):
                fh.write(f"{self.vx[i]} {self.vy[i]} {float(self.t[i])!r} "
                         f"{MARK_NAMES[self.mark[i]]}\n")


def _geometry_to_dict(g: GeometryPlan) -> dict:
    d = asdict(g)
    d["box_B"] = g.box_B.as_tuple()
    d["box_L"] = g.box_L.as_tuple()
    return d


def _geometry_from_dict(d: dict) -> GeometryPlan:
    d = dict(d)
    d["box_B"] = Box(*d["box_B"])
    d["box_L"] = Box(*d["box_L"])
    return GeometryPlan(**d)


def load_diagram_text(path) -> Diagram:
    with open(path) as fh:
        header = json.loads(fh.readline())
        vx, vy, t, mark = [], [], [], []
        for line in fh:
            a, b, c, d = line.split()
            vx.append(int(a))
            vy.append(int(b))
            t.append(float(c))
            mark.append(MARK_CODES[d])
    geometry = _geometry_from_dict(header["geometry"])
    params = RateParams(**header["params"])
    grid = Grid(geometry.box_B,
                geometry.columns if geometry.cylinder else None)
    return diagram_from_points(
        geometry, params, header["seed"], grid, header["depth"],
        np.asarray(vx, np.int32), np.asarray(vy, np.int32),
        np.asarray(t, np.float64), np.asarray(mark, np.int8))


def diagram_from_points(geometry, params, seed, grid, depth,
                        vx, vy, t, mark) -> Diagram:
    """Canonicalize raw point arrays into a Diagram.

    Sorts vertex-major / time-descending and resolves exact time ties within
    one vertex by one-ulp nudges so downstream sweeps see a strict order.
    """
    if np.any(t > 0) or np.any(t < -depth - 1e-9):
        raise ValueError("point times outside [-depth, 0]")
    if not np.all(grid.in_grid(vx, vy)):
        raise ValueError("points outside the diagram box")
    t = np.array(t, np.float64, copy=True)
    # Nudge exact time ties globally (measure zero, but float draws can
    # collide) so every sweep and oracle sees one strict event order.
    while True:
        order = np.argsort(t, kind="stable")
        ts = t[order]
        dup = np.flatnonzero(ts[1:] == ts[:-1])
        if dup.size == 0:
            break
        t[order[dup + 1]] = np.nextafter(t[order[dup + 1]], -np.inf)
    vids = grid.vid(vx, vy)
    order = np.lexsort((-t, vids))
    return Diagram(geometry, params, seed, grid, depth,
                   vx[order], vy[order], t[order], mark[order])


def sample_diagram(geometry: GeometryPlan, params: RateParams, seed: int,
                   box: Box | None = None, depth: float | None = None) -> Diagram:
    """Sample the marked Poisson diagram on box x [-depth, 0].

    Identical (seed, geometry, params, box, depth) reproduce the diagram
    bit for bit.  ``box``/``depth`` default to the geometry's B-box and
    time depth; tests and custom experiments may override them.
    """
    if box is None:
        box = geometry.box_B
    if depth is None:
        depth = geometry.time_depth
    if depth <= 0:
        raise ValueError("depth must be positive")
    wrap = geometry.columns if geometry.cylinder else None
    if wrap is not None and box is not geometry.box_B:
        raise ValueError("cylinder diagrams are sampled on the full B-box")
    grid = Grid(box, wrap)
    gen = rng.generator(seed, rng.DIAGRAM)
    counts = gen.poisson(params.total_rate * depth, grid.n_vertices)
    total = int(counts.sum())
    t = gen.uniform(-depth, 0.0, total)
    u = gen.random(total)
    a = params.arrow_prob
    cuts = np.array([a, 2 * a, 3 * a, 4 * a])
    mark = np.searchsorted(cuts, u, side="right").astype(np.int8)
    vids = np.repeat(np.arange(grid.n_vertices), counts)
    ix, iy = np.divmod(vids, grid.ny)
    vx = (ix + box.x0).astype(np.int32)
    vy = (iy + box.y0).astype(np.int32)
    return diagram_from_points(geometry, params, seed, grid, depth, vx, vy, t, mark)
