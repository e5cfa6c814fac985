"""Time-discretized indicator variables and certified occupancy.

Each vertex's time axis is cut into intervals of length delta; for every
(vertex, interval, mark type) a single bit records whether at least one
point of that type landed there.  The bits are independent across cells
because they read disjoint Poisson processes.

``certified_occupancy`` decides occupancy from the bits alone: it searches
for an interval-level path whose every dwell is star-free and whose jumps
are guarded (star bits clear on both endpoints over the jump interval and
its two neighbours), with consecutive jumps in strictly decreasing interval
indices.  A verdict of 1 is sound: every precise diagram consistent with
the bits contains an active path from the shell or the time floor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import rng
from .spacetime import (ARROW_STEPS, Box, Diagram, GeometryPlan, Grid,
                        InvariantViolation, MARK_NAMES, RateParams, STAR,
                        diagram_from_points)
from .reachability import boundary_for, delta_stable_reachable, reachable

_BALL_DIRS = tuple(enumerate(ARROW_STEPS))


@dataclass
class XField:
    """Per-cell presence bits of the five point types on a delta grid.

    bits[ix, iy, k, mark] with k the interval index counted downward from
    time 0 (interval k covers (-(k+1)delta, -k delta]).  The bottom cell is
    shortened to the diagram depth; ``cell_length(k)`` returns exact lengths.
    """

    box: Box
    bits: np.ndarray
    delta: float
    K: int
    depth: float
    params: RateParams
    seed: int | None = None
    alpha: float | None = None
    wrap_columns: int | None = None

    def cell_length(self, k: int) -> float:
        return min(self.depth, (k + 1) * self.delta) - k * self.delta

    @property
    def nx(self) -> int:
        return self.bits.shape[0]

    @property
    def ny(self) -> int:
        return self.bits.shape[1]

    def dump(self, path) -> None:
        header = dict(box=self.box.as_tuple(), delta=self.delta, K=self.K,
                      depth=self.depth, params=self.params.to_dict(),
                      seed=self.seed, alpha=self.alpha,
                      wrap_columns=self.wrap_columns,
                      shape=list(self.bits.shape))
        packed = np.packbits(self.bits.reshape(-1).view(np.uint8))
        with open(path, "w") as fh:
            fh.write(json.dumps(header) + "\n")
            fh.write(packed.tobytes().hex() + "\n")


def load_xfield(path) -> XField:
    with open(path) as fh:
        header = json.loads(fh.readline())
        raw = bytes.fromhex(fh.readline().strip())
    shape = tuple(header["shape"])
    total = int(np.prod(shape))
    bits = np.unpackbits(np.frombuffer(raw, np.uint8))[:total].reshape(shape)
    return XField(box=Box(*header["box"]), bits=bits.astype(bool),
                  delta=header["delta"], K=header["K"], depth=header["depth"],
                  params=RateParams(**header["params"]), seed=header["seed"],
                  alpha=header["alpha"], wrap_columns=header["wrap_columns"])


def default_delta(n: int, alpha: float = 0.25) -> float:
    """delta = n^(-alpha); alpha configurable, small by default."""
    return float(n) ** (-alpha)


def discretize(diagram: Diagram, delta: float) -> XField:
    """Exact indicator extraction from a diagram; deterministic."""
    if not 0 < delta <= diagram.depth:
        raise ValueError("need 0 < delta <= diagram depth")
    g = diagram.grid
    K = int(math.ceil(diagram.depth / delta - 1e-12))
    bits = np.zeros((g.nx, g.ny, K, 5), bool)
    if diagram.n_points:
        ix = (diagram.vx - g.box.x0)
        if g.wrap:
            ix = ix % g.nx
        iy = diagram.vy - g.box.y0
        k = np.clip(np.floor(-diagram.t / delta).astype(np.int64), 0, K - 1)
        bits[ix, iy, k, diagram.mark] = True
    box = Box(g.box.x0, g.box.y0, g.box.x0 + g.nx - 1, g.box.y1)
    return XField(box=box, bits=bits, delta=float(delta), K=K,
                  depth=diagram.depth, params=diagram.params,
                  seed=diagram.seed,
                  wrap_columns=g.nx if g.wrap else None)


def sample_xfield(geometry: GeometryPlan, params: RateParams, delta: float,
                  seed: int, depth: float | None = None,
                  alpha: float | None = None, box: Box | None = None) -> XField:
    """Sample the bits directly from their product law (no diagram needed):
    cell (v,k,mark) is 1 with probability 1 - exp(-rate_mark * length_k)."""
    if depth is None:
        depth = geometry.time_depth
    if box is None:
        box = geometry.box_B
    wrap = geometry.columns if geometry.cylinder and box is geometry.box_B else None
    g = Grid(box, wrap)
    K = int(math.ceil(depth / delta - 1e-12))
    lengths = np.minimum(depth, (np.arange(K) + 1) * delta) - np.arange(K) * delta
    rates = np.array([params.arrow_prob * params.total_rate] * 4
                     + [params.star_prob * params.total_rate])
    p = 1.0 - np.exp(-lengths[:, None] * rates[None, :])
    gen = rng.generator(seed, rng.XFIELD)
    bits = gen.random((g.nx, g.ny, K, 5)) < p[None, None, :, :]
    box = Box(g.box.x0, g.box.y0, g.box.x0 + g.nx - 1, g.box.y1)
    return XField(box=box, bits=bits, delta=float(delta), K=K,
                  depth=float(depth), params=params, seed=seed, alpha=alpha,
                  wrap_columns=wrap)


# ---------------------------------------------------------------------------
# Certified occupancy
# ---------------------------------------------------------------------------

def _floor_layer(xfield: XField, depth: float) -> int:
    k_f = int(math.floor(depth / xfield.delta + 1e-12))
    return min(k_f, xfield.K - 1)


def _guard3(stars: np.ndarray) -> np.ndarray:
    """stars[..., k] ored with its k-neighbours; out-of-range counts clean."""
    g = stars.copy()
    g[..., 1:] |= stars[..., :-1]
    g[..., :-1] |= stars[..., 1:]
    return g


class _CertEngine:
    """Layered interval-level reverse search, batched over a box of targets.

    State F[u] (u an offset in the closed L-inf ball of the shell radius)
    holds, for every target x of the box, whether a certified path exists
    from (x+u, any time in the current interval) to (x, 0).
    """

    def __init__(self, xfield: XField, n: int, targets: Box,
                 keep_history: bool = False):
        self.xf = xfield
        self.n = n
        self.r = math.isqrt(n)
        self.depth = math.sqrt(n)
        if self.depth > xfield.depth + 1e-9:
            raise ValueError("xfield shallower than the truncation depth")
        self.k_f = _floor_layer(xfield, self.depth)
        self.targets = targets
        self.keep_history = keep_history
        r = self.r
        self.offsets = [(ux, uy) for ux in range(-r, r + 1)
                        for uy in range(-r, r + 1)]
        self.o_index = {u: i for i, u in enumerate(self.offsets)}
        self.center = self.o_index[(0, 0)]
        # neighbour table: off_nbr[i][dir] = offset index of u + step or -1
        self.o_nbr = [[self.o_index.get((ux + s[0], uy + s[1]), -1)
                       for _, s in _BALL_DIRS]
                      for (ux, uy) in self.offsets]
        self._check_domain()

    def _check_domain(self):
        xf, r, tb = self.xf, self.r, self.targets
        if xf.wrap_columns is None:
            need = tb.dilate(r)
            if not xf.box.contains_box(need):
                raise ValueError("target footprint exceeds the xfield box")
        else:
            if not (xf.box.y0 <= tb.y0 - r and tb.y1 + r <= xf.box.y1):
                raise ValueError("target footprint exceeds the xfield rows")

    def _cell_view(self, plane: np.ndarray, u: tuple[int, int]) -> np.ndarray:
        """plane[(x + u)] for every target x; plane is (nx, ny)."""
        xf, tb = self.xf, self.targets
        ux, uy = u
        ys = slice(tb.y0 + uy - xf.box.y0, tb.y1 + uy - xf.box.y0 + 1)
        if xf.wrap_columns is not None:
            cols = (np.arange(tb.x0 + ux, tb.x1 + ux + 1)
                    % xf.wrap_columns) - xf.box.x0
            return plane[cols][:, ys]
        xs = slice(tb.x0 + ux - xf.box.x0, tb.x1 + ux - xf.box.x0 + 1)
        return plane[xs, ys]

    def run(self):
        xf, tb = self.xf, self.targets
        stars = xf.bits[:, :, :, STAR]
        guard = _guard3(stars)
        shape = (len(self.offsets), tb.width, tb.height)
        F_prev = np.zeros(shape, bool)
        F_prev[self.center] = True  # virtual layer -1: at the target itself
        verdict = np.zeros((tb.width, tb.height), bool)
        history = [] if self.keep_history else None
        shell_ids = [i for i, u in enumerate(self.offsets)
                     if max(abs(u[0]), abs(u[1])) == self.r]
        for k in range(self.k_f + 1):
            F = np.zeros(shape, bool)
            for i, u in enumerate(self.offsets):
                s_u = self._cell_view(stars[:, :, k], u)
                g_u = self._cell_view(guard[:, :, k], u)
                acc = F_prev[i].copy()
                for d, (code, step) in enumerate(_BALL_DIRS):
                    j = self.o_nbr[i][d]
                    if j < 0:
                        continue
                    prev = F_prev[j]
                    if not prev.any():
                        continue
                    a_u = self._cell_view(xf.bits[:, :, k, code], u)
                    g_v = self._cell_view(guard[:, :, k],
                                          (u[0] + step[0], u[1] + step[1]))
                    acc |= a_u & ~g_u & ~g_v & prev
                F[i] = ~s_u & acc
            if history is not None:
                history.append(F)
            for i in shell_ids:
                verdict |= F[i]
            F_prev = F
        verdict |= F_prev.any(axis=0)  # time-floor starts, any offset
        return verdict, history


def certified_field(xfield: XField, n: int, targets: Box) -> np.ndarray:
    """Certified occupancy bits for every vertex of ``targets``."""
    verdict, _ = _CertEngine(xfield, n, targets).run()
    return verdict


@dataclass
class Certificate:
    """Certified-occupancy verdict with an interval-level witness if 1."""

    target: tuple[int, int]
    n: int
    verdict: int
    witness: list | None = None

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"target": list(self.target), "n": self.n,
                       "verdict": self.verdict, "witness": self.witness},
                      fh, indent=1)


def certified_occupancy(xfield: XField, x: tuple[int, int], n: int) -> Certificate:
    """Decide occupancy of x from the bits alone; verdict 1 carries a witness."""
    tb = Box(x[0], x[1], x[0], x[1])
    eng = _CertEngine(xfield, n, tb, keep_history=True)
    verdict, history = eng.run()
    if not verdict[0, 0]:
        return Certificate(target=tuple(x), n=n, verdict=0)
    witness = _extract_witness(eng, history)
    return Certificate(target=tuple(x), n=n, verdict=1, witness=witness)


def _extract_witness(eng: _CertEngine, history) -> list:
    xf = eng.xf
    guard = _guard3(xf.bits[:, :, :, STAR])
    # accepting state: smallest k on the shell, else the floor layer
    start = None
    for k in range(eng.k_f + 1):
        for i, u in enumerate(eng.offsets):
            if history[k][i, 0, 0] and (max(abs(u[0]), abs(u[1])) == eng.r
                                        or k == eng.k_f):
                start = (k, i)
                break
        if start:
            break
    assert start is not None
    k, i = start
    steps = []
    while k >= 0:
        u = eng.offsets[i]
        prev_ok = (history[k - 1][i, 0, 0] if k > 0 else i == eng.center)
        if prev_ok and not _cell(eng, xf.bits[:, :, k, STAR], u):
            steps.append(("dwell", u, k))
            k -= 1
            continue
        for d, (code, step) in enumerate(_BALL_DIRS):
            j = eng.o_nbr[i][d]
            if j < 0:
                continue
            v = (u[0] + step[0], u[1] + step[1])
            prev_ok = (history[k - 1][j, 0, 0] if k > 0 else j == eng.center)
            if not prev_ok:
                continue
            if (_cell(eng, xf.bits[:, :, k, code], u)
                    and not _cell(eng, guard[:, :, k], u)
                    and not _cell(eng, guard[:, :, k], v)):
                steps.append(("jump", u, v, k, MARK_NAMES[code]))
                i = j
                k -= 1
                break
        else:
            raise AssertionError("witness backtrack lost the trail")
    return _format_witness(eng, steps)


def _cell(eng: _CertEngine, plane: np.ndarray, u) -> bool:
    return bool(eng._cell_view(plane, u)[0, 0])


def _format_witness(eng: _CertEngine, steps) -> list:
    x = eng.targets.x0, eng.targets.y0
    out = []
    for st in steps:
        if st[0] == "dwell":
            _, u, k = st
            v = (x[0] + u[0], x[1] + u[1])
            if out and out[-1]["type"] == "dwell" and \
                    tuple(out[-1]["vertex"]) == v and out[-1]["k_to"] == k + 1:
                out[-1]["k_to"] = k
            else:
                out.append({"type": "dwell", "vertex": list(v),
                            "k_from": k, "k_to": k})
        else:
            _, u, v, k, mark = st
            out.append({"type": "jump",
                        "frm": [x[0] + u[0], x[1] + u[1]],
                        "to": [x[0] + v[0], x[1] + v[1]],
                        "k": k, "mark": mark})
    return out


# ---------------------------------------------------------------------------
# Conditional resampling and the sandwich check
# ---------------------------------------------------------------------------

def _zero_truncated_poisson(gen: np.random.Generator, mu: np.ndarray) -> np.ndarray:
    """Counts from Poisson(mu) conditioned on >= 1, via inverse CDF."""
    u = gen.random(mu.shape)
    # target CDF over j >= 1: (CDF_pois(j) - e^-mu) / (1 - e^-mu)
    out = np.ones(mu.shape, np.int64)
    pmf = mu * np.exp(-mu) / -np.expm1(-mu)  # P(1 | >=1)
    cdf = pmf.copy()
    j = 1
    active = u > cdf
    while np.any(active):
        j += 1
        pmf = pmf * mu / j
        cdf = cdf + pmf
        out[active] = j
        active = u > cdf
        if j > 200:  # numerically impossible tail
            break
    return out


def resample_consistent(xfield: XField, seed: int,
                        geometry: GeometryPlan | None = None) -> Diagram:
    """Draw a diagram whose discretize output equals the given bits.

    Cells with bit 0 receive no points; cells with bit 1 receive a
    zero-truncated Poisson number of points of that mark, at independent
    uniform times within the cell.
    """
    gen = rng.generator(seed, rng.RESAMPLE)
    idx = np.argwhere(xfield.bits)
    if idx.size:
        ix, iy, k, mark = idx.T
        lengths = (np.minimum(xfield.depth, (k + 1) * xfield.delta)
                   - k * xfield.delta)
        rates = np.array([xfield.params.arrow_prob * xfield.params.total_rate] * 4
                         + [xfield.params.star_prob * xfield.params.total_rate])
        mu = rates[mark] * lengths
        counts = _zero_truncated_poisson(gen, mu)
        total = int(counts.sum())
        rep = np.repeat(np.arange(len(counts)), counts)
        u = gen.random(total)
        t = -(k[rep] * xfield.delta + u * lengths[rep])
        vx = (ix[rep] + xfield.box.x0).astype(np.int32)
        vy = (iy[rep] + xfield.box.y0).astype(np.int32)
        marks = mark[rep].astype(np.int8)
    else:
        vx = np.empty(0, np.int32)
        vy = np.empty(0, np.int32)
        t = np.empty(0, np.float64)
        marks = np.empty(0, np.int8)
    if geometry is None:
        from .spacetime import make_geometry
        geometry = make_geometry(max(1, int(round(xfield.depth ** 2))))
    grid = Grid(xfield.box, xfield.wrap_columns)
    return diagram_from_points(geometry, xfield.params, seed, grid,
                               xfield.depth, vx, vy, t, marks)


def sandwich_check(diagram: Diagram, delta: float, x: tuple[int, int],
                   n: int) -> tuple[int, int, int]:
    """(reachable, certified, 3delta-stable witness) on one shared diagram.

    The first inequality (reachable >= certified) is asserted: a certified
    verdict is sound for every consistent diagram, in particular this one.
    The third entry uses stability width 3*delta, matching the guard bands,
    and is reported rather than asserted.
    """
    b = boundary_for(x, n)
    b1 = reachable(diagram, b)
    xf = discretize(diagram, delta)
    b2 = certified_occupancy(xf, x, n).verdict
    b3 = delta_stable_reachable(diagram, b, 3.0 * delta)
    if b2 > b1:
        raise InvariantViolation(
            f"certified occupancy {b2} exceeds reachable {b1} at {x}, n={n}")
    return b1, b2, b3
