import numpy as np
import pytest

from cplab.spacetime import (Box, Grid, RIGHT, LEFT, DOWN, STAR,
                             make_geometry, q_params, sample_diagram,
                             diagram_from_points)
from cplab.reachability import (BoundarySpec, ReadTracker, boundary_for,
                                dependency_footprint, delta_stable_reachable,
                                field_bits, load_field,
                                reachable, sample_occupancy_field)

from oracles import forward_reachable, forward_stable_reachable


def tiny_diagram(points, box=Box(-4, -4, 4, 4), depth=4.0):
    """Build a diagram from (vx, vy, t, mark) tuples on a small box."""
    g = make_geometry(4)
    grid = Grid(box)
    vx = np.array([p[0] for p in points], np.int32)
    vy = np.array([p[1] for p in points], np.int32)
    t = np.array([p[2] for p in points], np.float64)
    mark = np.array([p[3] for p in points], np.int8)
    return diagram_from_points(g, q_params(0.5), 0, grid, depth, vx, vy, t, mark)


def random_diagram(seed, q=0.5, box=Box(-2, -2, 2, 2), depth=4.0):
    g = make_geometry(4)
    return sample_diagram(g, q_params(q), seed, box=box, depth=depth)


def test_empty_diagram_reaches_via_bare_axis():
    d = tiny_diagram([])
    assert reachable(d, BoundarySpec((0, 0), 2, 3.0)) == 1


def test_single_star_cuts_bare_axis():
    d = tiny_diagram([(0, 0, -1.5, STAR)])
    assert reachable(d, BoundarySpec((0, 0), 1, 3.0)) == 0
    assert reachable(d, BoundarySpec((0, 0), 2, 3.0)) == 0


def test_hand_built_arrow_path():
    # star cuts x's axis at -2; arrow from w=(-1,0) at -1 rescues via shell
    points = [(-1, 0, -1.0, RIGHT), (0, 0, -2.0, STAR)]
    d = tiny_diagram(points, depth=3.0)
    assert reachable(d, BoundarySpec((0, 0), 1, 3.0)) == 1
    # with radius 2, w is interior and w's own axis reaches the floor
    assert reachable(d, BoundarySpec((0, 0), 2, 3.0)) == 1
    # cut w's axis below the arrow: radius 2 now fails, radius 1 still works
    points.append((-1, 0, -2.5, STAR))
    d2 = tiny_diagram(points, depth=3.0)
    assert reachable(d2, BoundarySpec((0, 0), 1, 3.0)) == 1
    assert reachable(d2, BoundarySpec((0, 0), 2, 3.0)) == 0


def test_arrow_direction_matters():
    # arrow points away from x: no rescue
    d = tiny_diagram([(-1, 0, -1.0, LEFT), (0, 0, -2.0, STAR)], depth=3.0)
    assert reachable(d, BoundarySpec((0, 0), 1, 3.0)) == 0
    d2 = tiny_diagram([(0, 1, -1.0, DOWN), (0, 0, -2.0, STAR)], depth=3.0)
    assert reachable(d2, BoundarySpec((0, 0), 1, 3.0)) == 1


def test_oracle_equivalence_random_instances():
    # forward brute-force simulator agrees on 300 random 5x5 diagrams
    ok = 0
    for seed in range(300):
        q = (0.2, 0.5, 0.8)[seed % 3]
        d = random_diagram(seed, q=q)
        b = BoundarySpec((0, 0), 2, 4.0)
        assert reachable(d, b) == forward_reachable(d, b)
        ok += 1
    assert ok == 300


def test_stable_oracle_equivalence():
    for seed in range(150):
        d = random_diagram(seed, q=0.6)
        b = BoundarySpec((0, 0), 2, 4.0)
        delta = (0.1, 0.4, 1.0)[seed % 3]
        assert delta_stable_reachable(d, b, delta) == \
            forward_stable_reachable(d, b, delta)


def test_stable_dirty_arrow_blocks():
    # the only arrow is delta-dirty (star at same vertex, offset delta/2):
    # a jump is required, so the stable search fails
    delta = 1.0
    points = [(-1, 0, -1.0, RIGHT), (-1, 0, -1.5, STAR), (0, 0, -2.0, STAR)]
    d = tiny_diagram(points, depth=3.0)
    b = BoundarySpec((0, 0), 1, 3.0)
    assert reachable(d, b) == 1
    assert delta_stable_reachable(d, b, delta) == 0
    # with a small delta the arrow is clean again
    assert delta_stable_reachable(d, b, 0.2) == 1


def test_stable_equals_plain_without_stars():
    for seed in range(50):
        d = random_diagram(seed, q=0.999)
        if np.any(d.mark == STAR):
            continue
        b = BoundarySpec((0, 0), 2, 4.0)
        assert delta_stable_reachable(d, b, 0.7) == reachable(d, b)


def test_stable_monotone_in_delta_and_below_plain():
    for seed in range(200):
        d = random_diagram(seed, q=0.55)
        b = BoundarySpec((0, 0), 2, 4.0)
        r = reachable(d, b)
        prev = r
        for delta in (0.05, 0.2, 0.8, 2.0):
            s = delta_stable_reachable(d, b, delta)
            assert s <= prev or prev == 0
            assert s <= r
            prev = s


def test_mark_mutation_monotonicity():
    # replacing any star by an arrow never flips reachable 1 -> 0
    rng = np.random.default_rng(5)
    for seed in range(40):
        d = random_diagram(seed, q=0.4)
        b = BoundarySpec((0, 0), 2, 4.0)
        before = reachable(d, b)
        stars = np.flatnonzero(d.mark == STAR)
        if stars.size == 0:
            continue
        i = rng.choice(stars)
        mark = d.mark.copy()
        mark[i] = rng.integers(0, 4)
        d2 = diagram_from_points(d.geometry, d.params, d.seed, d.grid,
                                 d.depth, d.vx, d.vy, d.t.copy(), mark)
        assert reachable(d2, b) >= before


def test_truncation_nesting_on_shared_diagram():
    # eta^(m) <= eta^(n) bitwise for n <= m
    g = make_geometry(16)
    box = Box(40, 20, 44, 24)
    for seed in range(60):
        d = sample_diagram(g, q_params(0.7), seed, depth=4.0)
        for x in ((42, 22),):
            em = reachable(d, boundary_for(x, 16))
            en = reachable(d, boundary_for(x, 9))
            assert em <= en


def test_dependency_footprint_examples():
    b = boundary_for((0, 0), 9)
    fp = dependency_footprint(b)
    assert fp.radius == 3 and fp.depth == 3.0
    fp2 = dependency_footprint(BoundarySpec((7, 0), 3, 3.0))
    assert fp.disjoint_from(fp2)
    fp3 = dependency_footprint(BoundarySpec((6, 0), 3, 3.0))
    assert not fp.disjoint_from(fp3)


def test_read_tracker_confined_to_footprint():
    for seed in range(30):
        d = random_diagram(seed, q=0.6, box=Box(-5, -5, 5, 5))
        b = BoundarySpec((0, 0), 2, 3.5)
        tracker = ReadTracker()
        reachable(d, b, tracker=tracker)
        assert tracker.violations(dependency_footprint(b)) == []


def test_boundary_validation():
    d = random_diagram(1)
    with pytest.raises(ValueError):
        reachable(d, BoundarySpec((0, 0), 3, 4.0))  # ball exceeds box
    with pytest.raises(ValueError):
        reachable(d, BoundarySpec((0, 0), 2, 9.0))  # deeper than diagram
    with pytest.raises(ValueError):
        BoundarySpec((0, 0), 0, 1.0)
    with pytest.raises(ValueError):
        BoundarySpec((0, 0), 1, 0.0)


def test_field_matches_per_vertex_reachable():
    g = make_geometry(9)
    for seed in range(10):
        d = sample_diagram(g, q_params(0.65), seed, depth=3.0)
        tb = Box(20, 10, 26, 15)
        bits = field_bits(d, tb, 3, 3.0)
        for vx in range(20, 27):
            for vy in range(10, 16):
                want = reachable(d, BoundarySpec((vx, vy), 3, 3.0))
                assert bits[vx - 20, vy - 10] == want


def test_stable_field_matches_per_vertex():
    g = make_geometry(9)
    for seed in range(6):
        d = sample_diagram(g, q_params(0.6), seed, depth=3.0)
        tb = Box(20, 10, 24, 14)
        bits = field_bits(d, tb, 3, 3.0, delta=0.4)
        for vx in range(20, 25):
            for vy in range(10, 15):
                want = delta_stable_reachable(d, BoundarySpec((vx, vy), 3, 3.0), 0.4)
                assert bits[vx - 20, vy - 10] == want


def test_sample_occupancy_field_low_and_high_q():
    g = make_geometry(16)
    lo = sample_occupancy_field(g, q_params(0.01), seed=4)
    frac_lo = lo.occupied / lo.box.n_vertices
    # the bare-axis floor witness alone survives w.p. exp(-(1-q)sqrt(n)),
    # about 0.019 here, so the field is sparse but not below 1%
    assert frac_lo < 0.05
    hi = sample_occupancy_field(g, q_params(0.99), seed=4)
    frac_hi = hi.occupied / hi.box.n_vertices
    assert frac_hi >= 0.9
    assert hi.provenance["kind"] == "eta_n"
    assert hi.provenance["n"] == 16


def test_field_serialization_round_trip(tmp_path):
    g = make_geometry(9)
    f = sample_occupancy_field(g, q_params(0.8), seed=2, box=Box(10, 10, 10, 14))
    p = tmp_path / "field.txt"
    f.dump(p)
    f2 = load_field(p)
    assert np.array_equal(f.bits, f2.bits)
    assert f2.box == f.box
    assert f2.provenance["n"] == 9


def test_cylinder_field_wraps():
    # an arrow crossing the seam column 0 -> column 6n-1 is honoured
    g = make_geometry(2, cylinder=True)
    d = sample_diagram(g, q_params(0.5), seed=0)
    # build a fresh cylinder diagram with one seam arrow and a star
    grid = d.grid
    pts_vx = np.array([0, 11], np.int32)
    pts_vy = np.array([3, 3], np.int32)
    pts_t = np.array([-0.5, -1.0], np.float64)
    pts_mark = np.array([LEFT, STAR], np.int8)
    d2 = diagram_from_points(g, q_params(0.5), 0, grid, g.trunc_depth,
                             pts_vx, pts_vy, pts_t, pts_mark)
    b = BoundarySpec((11, 3), 1, 1.4)
    # star cuts (11,3); the LEFT arrow from column 0 wraps to column 11
    assert reachable(d2, b) == 1
