"""Independent brute-force oracles used to cross-check the fast implementations.

Everything here is written in the most literal style possible and stays
deliberately independent of the algorithms in cplab: forward event-by-event
state propagation for reachability, per-arrow scans for stability, BFS for
clusters, naive enumeration for the cylinder event.
"""

from __future__ import annotations

from cplab.spacetime import STAR, ARROW_STEPS, linf


def _events_ascending(diagram, depth):
    """All diagram events with t > -depth, in increasing time order."""
    ev = []
    for i in range(diagram.n_points):
        t = float(diagram.t[i])
        if t > -depth:
            ev.append((t, int(diagram.vx[i]), int(diagram.vy[i]),
                       int(diagram.mark[i]), i))
    ev.sort()
    return ev


def _wrap_d(a, b, grid):
    if grid.wrap:
        dx = abs(a[0] - b[0]) % grid.nx
        dx = min(dx, grid.nx - dx)
        return max(dx, abs(a[1] - b[1]))
    return linf(a, b)


def forward_reachable(diagram, boundary, blocked_points=frozenset()):
    """Forward simulation from all boundary sources.

    State = set of vertices v such that some active path from the boundary
    reaches (v, current time).  Starts with the whole closed ball occupied
    (time-floor sources); shell vertices are permanent sources and re-enter
    immediately after a star.  ``blocked_points`` are diagram point indices
    whose arrows are unusable and cut their axis (stability variant).
    """
    x = boundary.center
    r = boundary.radius
    g = diagram.grid
    ball = set()
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            v = (x[0] + dx, x[1] + dy)
            if g.wrap:
                v = (g.box.x0 + (v[0] - g.box.x0) % g.nx, v[1])
            ball.add(v)
    shell = {v for v in ball if _wrap_d(v, x, g) == r}
    occ = set(ball)
    for t, vx, vy, mark, i in _events_ascending(diagram, boundary.depth):
        v = (vx, vy)
        if v not in ball:
            continue
        if mark == STAR or i in blocked_points:
            occ.discard(v)
            if v in shell:
                occ.add(v)
        else:
            if v in occ:
                step = ARROW_STEPS[mark]
                w = (vx + step[0], vy + step[1])
                if g.wrap:
                    w = (g.box.x0 + (w[0] - g.box.x0) % g.nx, w[1])
                if w in ball:
                    occ.add(w)
    return 1 if x in occ else 0


def dirty_arrow_points(diagram, delta):
    """Indices of arrow points with a star at distance <= 1, |dt| < delta."""
    g = diagram.grid
    stars = [(float(diagram.t[i]), (int(diagram.vx[i]), int(diagram.vy[i])))
             for i in range(diagram.n_points) if diagram.mark[i] == STAR]
    dirty = set()
    for i in range(diagram.n_points):
        if diagram.mark[i] == STAR:
            continue
        v = (int(diagram.vx[i]), int(diagram.vy[i]))
        t = float(diagram.t[i])
        for (u, w) in stars:
            if abs(u - t) < delta and _wrap_d(v, w, g) <= 1:
                dirty.add(i)
                break
    return dirty


def forward_stable_reachable(diagram, boundary, delta):
    return forward_reachable(diagram, boundary,
                             blocked_points=dirty_arrow_points(diagram, delta))


def bfs_clusters(bits, wrap_columns=None):
    """Occupied 4-neighbour cluster sizes by literal BFS."""
    nx, ny = bits.shape
    seen = [[False] * ny for _ in range(nx)]
    sizes = []
    for sx in range(nx):
        for sy in range(ny):
            if not bits[sx, sy] or seen[sx][sy]:
                continue
            size = 0
            stack = [(sx, sy)]
            seen[sx][sy] = True
            while stack:
                cx, cy = stack.pop()
                size += 1
                for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    wx, wy = cx + dx, cy + dy
                    if wrap_columns is not None:
                        wx %= wrap_columns
                    if 0 <= wx < nx and 0 <= wy < ny and bits[wx, wy] \
                            and not seen[wx][wy]:
                        seen[wx][wy] = True
                        stack.append((wx, wy))
            sizes.append(size)
    return sorted(sizes)


def naive_cylinder_event(bits, n):
    """Disjunction of horizontal crossings over all 6n translate windows,
    with the crossing itself decided by literal BFS inside the window."""
    cols = bits.shape[0]
    for a in range(cols):
        window = [[bits[(a + i) % cols, y] for y in range(n, 2 * n + 1)]
                  for i in range(4 * n + 1)]
        if _window_crossing(window):
            return 1
    return 0


def _window_crossing(window):
    w = len(window)
    h = len(window[0])
    frontier = [(0, y) for y in range(h) if window[0][y]]
    seen = set(frontier)
    while frontier:
        cx, cy = frontier.pop()
        if cx == w - 1:
            return True
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nx, ny = cx + dx, cy + dy
            if 0 <= nx < w and 0 <= ny < h and window[nx][ny] \
                    and (nx, ny) not in seen:
                seen.add((nx, ny))
                frontier.append((nx, ny))
    return False
