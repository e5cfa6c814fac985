"""Active space-time path search on marked diagrams.

The truncated occupancy of a target x is the indicator that some active
path reaches (x, 0) from the L-infinity shell at radius floor(sqrt(n)) or
from the time floor -sqrt(n).  Active paths move upward in time along
vertex axes, never across a star, and jump along arrows in the arrow's
direction.

The engine below runs the search in reverse time from the targets,
maintaining per vertex the set of targets currently reachable from that
vertex (a bitmask).  One sweep serves a single target or a whole box of
targets; a delta-stable variant treats "dirty" arrows (an arrow with a
star within L-infinity distance 1 and time distance < delta) as blocked.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .spacetime import (Box, Diagram, GeometryPlan, Grid, RateParams, STAR,
                        ARROW_STEPS, sample_diagram, linf)

_EPS = 1e-9


@dataclass(frozen=True)
class BoundarySpec:
    """Truncation boundary of one target: shell radius and time floor."""

    center: tuple[int, int]
    radius: int
    depth: float

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        if not self.depth > 0:
            raise ValueError("depth must be > 0")


def boundary_for(x: tuple[int, int], n: int) -> BoundarySpec:
    """The scale-n boundary: radius floor(sqrt(n)), depth sqrt(n)."""
    return BoundarySpec(center=(int(x[0]), int(x[1])),
                        radius=math.isqrt(n), depth=math.sqrt(n))


@dataclass(frozen=True)
class Footprint:
    """Closed dependency region ball(center, radius) x [-depth, 0]."""

    center: tuple[int, int]
    radius: int
    depth: float

    @property
    def spatial_box(self) -> Box:
        cx, cy = self.center
        r = self.radius
        return Box(cx - r, cy - r, cx + r, cy + r)

    def contains(self, vx: int, vy: int, t: float = 0.0) -> bool:
        return (linf((vx, vy), self.center) <= self.radius
                and -self.depth - _EPS <= t <= 0.0)

    def disjoint_from(self, other: "Footprint") -> bool:
        return linf(self.center, other.center) > self.radius + other.radius


def dependency_footprint(boundary: BoundarySpec) -> Footprint:
    return Footprint(boundary.center, boundary.radius, boundary.depth)


class ReadTracker:
    """Per-task record of which diagram vertices/times a sweep inspected."""

    def __init__(self):
        self.reads = []  # (vx, y_lo, y_hi, t_floor) column-range reads

    def record(self, vx: int, y_lo: int, y_hi: int, t_floor: float) -> None:
        self.reads.append((vx, y_lo, y_hi, t_floor))

    def violations(self, footprint: Footprint) -> list:
        bad = []
        for vx, y_lo, y_hi, t_floor in self.reads:
            for vy in range(y_lo, y_hi + 1):
                if not footprint.contains(vx, vy, max(t_floor, -footprint.depth)):
                    bad.append((vx, vy, t_floor))
        return bad


@dataclass(frozen=True)
class _RegionKey:
    grid_box: tuple
    wrap: int | None
    rx0: int
    ry0: int
    rnx: int
    rny: int
    tbox: tuple
    radius: int


class _Region:
    """Rectangle of grid vertices with local row-major indexing."""

    def __init__(self, grid: Grid, x0: int, y0: int, nx: int, ny: int):
        self.grid = grid
        self.x0, self.y0, self.nx, self.ny = x0, y0, nx, ny
        if grid.wrap:
            if nx != grid.nx:
                raise ValueError("cylinder regions span all columns")
        else:
            if not (grid.box.x0 <= x0 and x0 + nx - 1 <= grid.box.x1):
                raise ValueError("region exceeds diagram box (x)")
        if not (grid.box.y0 <= y0 and y0 + ny - 1 <= grid.box.y1):
            raise ValueError("region exceeds diagram box (y)")

    @property
    def n_vertices(self):
        return self.nx * self.ny

    def loc(self, vx, vy):
        ix = vx - self.x0
        if self.grid.wrap:
            ix = ix % self.grid.nx
        return ix * self.ny + (vy - self.y0)


def _region_for(grid: Grid, targets: Box, radius: int) -> _Region:
    if grid.wrap:
        return _Region(grid, grid.box.x0, targets.y0 - radius,
                       grid.nx, targets.height + 2 * radius)
    return _Region(grid, targets.x0 - radius, targets.y0 - radius,
                   targets.width + 2 * radius, targets.height + 2 * radius)


_mask_cache: dict = {}


def _masks_for(key: _RegionKey):
    """far_mask[loc] = bitmask of targets at L-inf distance >= radius."""
    if key in _mask_cache:
        return _mask_cache[key]
    if len(_mask_cache) > 32:
        _mask_cache.clear()
    tbox = Box(*key.tbox)
    rx = (key.rx0 + np.repeat(np.arange(key.rnx), key.rny)).astype(np.int32)
    ry = (key.ry0 + np.tile(np.arange(key.rny), key.rnx)).astype(np.int32)
    tx = (tbox.x0 + np.repeat(np.arange(tbox.width), tbox.height)).astype(np.int32)
    ty = (tbox.y0 + np.tile(np.arange(tbox.height), tbox.width)).astype(np.int32)
    masks = []
    chunk = max(1, 2_000_000 // max(1, tbox.n_vertices))
    for lo in range(0, rx.shape[0], chunk):
        dx = np.abs(rx[lo:lo + chunk, None] - tx[None, :])
        if key.wrap is not None:
            dx %= key.wrap
            dx = np.minimum(dx, key.wrap - dx)
        dy = np.abs(ry[lo:lo + chunk, None] - ty[None, :])
        far = np.maximum(dx, dy) >= key.radius
        packed = np.packbits(far, axis=1, bitorder="little")
        masks.extend(int.from_bytes(row.tobytes(), "little") for row in packed)
    _mask_cache[key] = masks
    return masks


def _gather_events(diagram: Diagram, region: _Region, depth: float,
                   tracker: ReadTracker | None = None):
    """Region events with t > -depth: local ids, kinds, arrow destinations,
    times (descending), and the diagram point index of each event."""
    g = diagram.grid
    parts = []
    for ixr in range(region.nx):
        gx = (region.x0 - g.box.x0 + ixr) % g.nx if g.wrap else region.x0 - g.box.x0 + ixr
        vid_lo = gx * g.ny + (region.y0 - g.box.y0)
        lo, hi = diagram.slice_for_vid_range(vid_lo, vid_lo + region.ny - 1)
        if tracker is not None:
            tracker.record(region.x0 + ixr, region.y0,
                           region.y0 + region.ny - 1, -depth)
        if hi > lo:
            parts.append(np.arange(lo, hi))
    if not parts:
        empty = np.empty(0, np.int64)
        return empty, empty, empty, np.empty(0, np.float64), empty
    idx = np.concatenate(parts)
    t = diagram.t[idx]
    keep = t > -depth
    idx, t = idx[keep], t[keep]
    order = np.argsort(-t, kind="stable")
    idx, t = idx[order], t[order]
    kind = diagram.mark[idx].astype(np.int64)
    vx = diagram.vx[idx].astype(np.int64)
    vy = diagram.vy[idx].astype(np.int64)
    loc = region.loc(vx, vy)
    dest = np.full(idx.shape, -1, np.int64)
    for code, (dxs, dys) in enumerate(ARROW_STEPS):
        sel = kind == code
        if not np.any(sel):
            continue
        wx, wy = vx[sel] + dxs, vy[sel] + dys
        ok = ((wy >= region.y0) & (wy <= region.y0 + region.ny - 1))
        if g.wrap:
            dloc = region.loc(wx, wy)
        else:
            ok &= (wx >= region.x0) & (wx <= region.x0 + region.nx - 1)
            dloc = region.loc(np.clip(wx, region.x0, region.x0 + region.nx - 1), wy)
        dest[sel] = np.where(ok, dloc, -1)
    return idx, loc, dest, t, kind


def _star_key_arrays(diagram: Diagram, region: _Region, depth: float, delta: float):
    """Sorted composite keys (vid-major, time-ascending) of stars within
    region dilated by one vertex and reaching delta below the floor."""
    g = diagram.grid
    y_lo = max(region.y0 - 1, g.box.y0)
    y_hi = min(region.y0 + region.ny - 1 + 1, g.box.y1)
    if g.wrap:
        x_cols = range(g.nx)
    else:
        x_lo = max(region.x0 - 1, g.box.x0)
        x_hi = min(region.x0 + region.nx - 1 + 1, g.box.x1)
        x_cols = range(x_lo - g.box.x0, x_hi - g.box.x0 + 1)
    parts = []
    for gx in x_cols:
        vid_lo = gx * g.ny + (y_lo - g.box.y0)
        lo, hi = diagram.slice_for_vid_range(vid_lo, vid_lo + (y_hi - y_lo))
        if hi > lo:
            parts.append(np.arange(lo, hi))
    if not parts:
        return np.empty(0, np.float64), 1.0
    idx = np.concatenate(parts)
    sel = (diagram.mark[idx] == STAR) & (diagram.t[idx] > -depth - delta)
    idx = idx[sel]
    span = diagram.depth + 2.0 * delta + 4.0
    vids = diagram.grid.vid(diagram.vx[idx].astype(np.int64),
                            diagram.vy[idx].astype(np.int64))
    keys = vids * span + (diagram.t[idx] + span / 2.0)
    return np.sort(keys), span


def _blocked_flags(diagram: Diagram, region: _Region, t: np.ndarray,
                   kind: np.ndarray, vxs: np.ndarray, vys: np.ndarray,
                   depth: float, delta: float) -> np.ndarray:
    """Per-event flag: arrow point with a star at L-inf distance <= 1 and
    time distance < delta (the delta-dirty arrows)."""
    keys, span = _star_key_arrays(diagram, region, depth, delta)
    blocked = np.zeros(t.shape, bool)
    arrows = np.flatnonzero(kind != STAR)
    if arrows.size == 0 or keys.size == 0:
        return blocked
    ax, ay, at = vxs[arrows], vys[arrows], t[arrows]
    g = diagram.grid
    hit = np.zeros(arrows.shape, bool)
    for ddx in (-1, 0, 1):
        for ddy in (-1, 0, 1):
            nx, ny = ax + ddx, ay + ddy
            ok = g.in_grid(nx, ny)
            if not np.any(ok):
                continue
            nvid = g.vid(np.where(ok, nx, g.box.x0), np.where(ok, ny, g.box.y0))
            lo = np.searchsorted(keys, nvid * span + (at - delta + span / 2.0),
                                 side="right")
            hi = np.searchsorted(keys, nvid * span + (at + delta + span / 2.0),
                                 side="left")
            hit |= ok & (hi > lo)
    blocked[arrows[hit]] = True
    return blocked


def _run_sweep(n_loc: int, init: list, far: list, loc_l: list, dest_l: list,
               kill_l: list, early_mask: int = 0) -> int:
    """Reverse-time propagation; returns the bitmask of reached targets."""
    R = [0] * n_loc
    for loc, bit in init:
        R[loc] |= bit
    H = 0
    for i in range(len(loc_l)):
        v = loc_l[i]
        if kill_l[i]:
            R[v] = 0
        else:
            d = dest_l[i]
            if d >= 0:
                rv = R[d]
                if rv:
                    rw = R[v]
                    nr = rw | rv
                    if nr != rw:
                        R[v] = nr
                        H |= nr & far[v]
                        if early_mask and (H & early_mask) == early_mask:
                            return H
    acc = 0
    for r in R:
        acc |= r
    return H | acc


def _sweep_box(diagram: Diagram, targets: Box, radius: int, depth: float,
               delta: float | None = None, tracker: ReadTracker | None = None,
               early_mask: int = 0) -> int:
    if depth > diagram.depth + _EPS:
        raise ValueError(f"boundary depth {depth} exceeds diagram depth {diagram.depth}")
    g = diagram.grid
    region = _region_for(g, targets, radius)
    key = _RegionKey(g.box.as_tuple(), g.nx if g.wrap else None,
                     region.x0, region.y0, region.nx, region.ny,
                     targets.as_tuple(), radius)
    far = _masks_for(key)
    idx, loc, dest, t, kind = _gather_events(diagram, region, depth, tracker)
    kill = kind == STAR
    if delta is not None:
        vxs = diagram.vx[idx].astype(np.int64)
        vys = diagram.vy[idx].astype(np.int64)
        kill = kill | _blocked_flags(diagram, region, t, kind,
                                     vxs, vys, depth, delta)
    init = []
    th = targets.height
    for j in range(targets.n_vertices):
        tx = targets.x0 + j // th
        ty = targets.y0 + j % th
        init.append((region.loc(tx, ty), 1 << j))
    return _run_sweep(region.n_vertices, init, far,
                      loc.tolist(), dest.tolist(), kill.tolist(), early_mask)


def reachable(diagram: Diagram, boundary: BoundarySpec,
              tracker: ReadTracker | None = None) -> int:
    """1 iff an active path runs from the shell d(x,.) = radius or the time
    floor -depth to (center, 0).  Reads only the dependency footprint;
    exits early on first boundary contact."""
    _check_boundary(diagram, boundary)
    tb = Box(boundary.center[0], boundary.center[1],
             boundary.center[0], boundary.center[1])
    h = _sweep_box(diagram, tb, boundary.radius, boundary.depth,
                   tracker=tracker, early_mask=1)
    return 1 if h else 0


def delta_stable_reachable(diagram: Diagram, boundary: BoundarySpec,
                           delta: float, tracker: ReadTracker | None = None) -> int:
    """Like reachable, but paths may not pass through any delta-dirty arrow
    point (the conservative reading: a dirty arrow blocks its axis and is
    never traversed).  Reads one vertex beyond the footprint for the star
    environment of boundary arrows."""
    if not delta > 0:
        raise ValueError("delta must be > 0")
    _check_boundary(diagram, boundary)
    tb = Box(boundary.center[0], boundary.center[1],
             boundary.center[0], boundary.center[1])
    h = _sweep_box(diagram, tb, boundary.radius, boundary.depth,
                   delta=delta, tracker=tracker, early_mask=1)
    return 1 if h else 0


def _check_boundary(diagram: Diagram, boundary: BoundarySpec) -> None:
    g = diagram.grid
    cx, cy = boundary.center
    r = boundary.radius
    ok_y = g.box.y0 <= cy - r and cy + r <= g.box.y1
    if g.wrap:
        ok_x = 2 * r + 1 <= g.nx
    else:
        ok_x = g.box.x0 <= cx - r and cx + r <= g.box.x1
    if not (ok_x and ok_y):
        raise ValueError(f"boundary ball of {boundary} exceeds diagram box")
    if boundary.depth > diagram.depth + _EPS:
        raise ValueError("boundary depth exceeds diagram depth")


# ---------------------------------------------------------------------------
# Occupancy fields
# ---------------------------------------------------------------------------

@dataclass
class OccupancyField:
    """0/1 configuration on a box with sampling provenance.

    bits[ix, iy] is the occupancy of vertex (box.x0 + ix, box.y0 + iy).
    wrap_columns is set when the box tiles a cylinder of that many columns.
    """

    box: Box
    bits: np.ndarray
    provenance: dict
    wrap_columns: int | None = None

    @property
    def occupied(self) -> int:
        return int(self.bits.sum())

    def bit(self, vx: int, vy: int) -> int:
        return int(self.bits[vx - self.box.x0, vy - self.box.y0])

    def dump(self, path) -> None:
        header = dict(self.provenance)
        header["box"] = self.box.as_tuple()
        header["wrap_columns"] = self.wrap_columns
        with open(path, "w") as fh:
            fh.write(json.dumps(header) + "\n")
            fh.write(f"P1 {self.box.width} {self.box.height}\n")
            for iy in range(self.box.height):
                fh.write("".join("1" if b else "0"
                                 for b in self.bits[:, iy]) + "\n")


def load_field(path) -> OccupancyField:
    with open(path) as fh:
        header = json.loads(fh.readline())
        magic, w, h = fh.readline().split()
        assert magic == "P1"
        bits = np.zeros((int(w), int(h)), bool)
        for iy in range(int(h)):
            row = fh.readline().strip()
            bits[:, iy] = np.frombuffer(row.encode(), np.uint8) == ord("1")
    box = Box(*header.pop("box"))
    wrap = header.pop("wrap_columns")
    return OccupancyField(box=box, bits=bits, provenance=header,
                          wrap_columns=wrap)


def _bits_from_mask(mask: int, tbox: Box) -> np.ndarray:
    nbytes = (tbox.n_vertices + 7) // 8
    raw = np.frombuffer(mask.to_bytes(nbytes, "little"), np.uint8)
    flat = np.unpackbits(raw, bitorder="little")[: tbox.n_vertices]
    return flat.reshape(tbox.width, tbox.height).astype(bool)


def field_bits(diagram: Diagram, targets: Box, radius: int, depth: float,
               delta: float | None = None,
               tracker: ReadTracker | None = None) -> np.ndarray:
    """Truncated occupancy bits for every vertex of ``targets`` in one sweep."""
    mask = _sweep_box(diagram, targets, radius, depth, delta=delta,
                      tracker=tracker)
    return _bits_from_mask(mask, targets)


def occupancy_field(diagram: Diagram, n: int, box: Box | None = None,
                    tracker: ReadTracker | None = None) -> OccupancyField:
    """Evaluate the scale-n truncated field on ``box`` (default: box_L)."""
    if box is None:
        box = diagram.geometry.box_L
    bits = field_bits(diagram, box, math.isqrt(n), math.sqrt(n),
                      tracker=tracker)
    prov = {"kind": "eta_n", "n": int(n), "params": diagram.params.to_dict(),
            "delta": None, "seed": int(diagram.seed)}
    return OccupancyField(box=box, bits=bits, provenance=prov,
                          wrap_columns=diagram.grid.nx if diagram.grid.wrap else None)


def stable_occupancy_field(diagram: Diagram, n: int, delta: float,
                           box: Box | None = None) -> OccupancyField:
    """Field of targets admitting a delta-stable witness path."""
    if box is None:
        box = diagram.geometry.box_L
    bits = field_bits(diagram, box, math.isqrt(n), math.sqrt(n), delta=delta)
    prov = {"kind": "eta_n_stable", "n": int(n),
            "params": diagram.params.to_dict(), "delta": float(delta),
            "seed": int(diagram.seed)}
    return OccupancyField(box=box, bits=bits, provenance=prov,
                          wrap_columns=diagram.grid.nx if diagram.grid.wrap else None)


def sample_occupancy_field(geometry: GeometryPlan, params: RateParams,
                           seed: int, box: Box | None = None) -> OccupancyField:
    """Sample one diagram and evaluate the truncated field on ``box``.

    The diagram is sampled only on the dependency footprint of the box
    (box dilated by the shell radius, depth sqrt(n)); any larger diagram
    yields the identical field law.
    """
    n = geometry.n
    if box is None:
        box = geometry.box_L
    r = geometry.trunc_radius
    if geometry.cylinder:
        sbox = geometry.box_B
        dia = sample_diagram(geometry, params, seed, box=sbox,
                             depth=geometry.trunc_depth)
    else:
        sbox = box.dilate(r)
        dia = sample_diagram(geometry, params, seed, box=sbox,
                             depth=geometry.trunc_depth)
    field = occupancy_field(dia, n, box=box)
    field.provenance["seed"] = int(seed)
    return field
