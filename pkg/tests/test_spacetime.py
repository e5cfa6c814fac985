import math

import numpy as np
import pytest
from scipy import stats

from cplab.spacetime import (Box, Grid, MarkedPoint, RateParams,
                             make_geometry, q_params, lambda_params,
                             reparametrize, sample_diagram,
                             diagram_from_points, load_diagram_text)


def test_make_geometry_examples():
    g = make_geometry(4)
    assert g.box_B == Box(0, 0, 24, 12)
    assert g.box_L == Box(4, 4, 20, 8)
    assert g.trunc_radius == 2
    assert make_geometry(1).trunc_radius == 1
    assert make_geometry(1).trunc_depth == 1.0
    assert make_geometry(10).trunc_radius == 3


def test_make_geometry_rejects_bad_n():
    with pytest.raises(ValueError):
        make_geometry(0)
    with pytest.raises(ValueError):
        make_geometry(-3)


def test_reparametrize_examples():
    assert reparametrize(lambda_params(1.0)).q == 0.8
    assert reparametrize(q_params(0.8)).lam == 1.0
    assert reparametrize(lambda_params(0.25)).q == 0.5


def test_reparametrize_round_trip_grid():
    # identity to full float precision on a 100-value grid
    for i in range(1, 101):
        q = i / 101.0
        p = q_params(q)
        assert reparametrize(reparametrize(p)) == p
    for i in range(1, 101):
        lam = 0.05 * i
        p = lambda_params(lam)
        assert reparametrize(reparametrize(p)) == p


def test_rate_params_validation():
    with pytest.raises(ValueError):
        q_params(0.0)
    with pytest.raises(ValueError):
        q_params(1.0)
    with pytest.raises(ValueError):
        lambda_params(0.0)
    with pytest.raises(ValueError):
        RateParams(mode="bogus", q=0.5)
    with pytest.raises(ValueError):
        MarkedPoint(vertex=(0, 0), time=-1.0, mark="sideways")


def test_same_seed_identical_diagram():
    g = make_geometry(4)
    p = q_params(0.7)
    d1 = sample_diagram(g, p, seed=42)
    d2 = sample_diagram(g, p, seed=42)
    assert np.array_equal(d1.t, d2.t)
    assert np.array_equal(d1.mark, d2.mark)
    assert np.array_equal(d1.vx, d2.vx)
    d3 = sample_diagram(g, p, seed=43)
    assert not np.array_equal(d1.t, d3.t)


def test_points_inside_box_and_strictly_ordered():
    g = make_geometry(3)
    d = sample_diagram(g, q_params(0.5), seed=7)
    assert d.vx.min() >= 0 and d.vx.max() <= 18
    assert d.vy.min() >= 0 and d.vy.max() <= 9
    assert d.t.min() >= -3.0 and d.t.max() <= 0.0
    for vx in (0, 5, 18):
        for vy in (0, 4, 9):
            t, _ = d.points_for(vx, vy)
            assert np.all(np.diff(t) < 0)


def test_poisson_mean_matches_q_mode():
    # per-vertex expected point count over depth n equals n, q_mode
    g = make_geometry(2)
    counts = []
    for seed in range(80):
        d = sample_diagram(g, q_params(0.5), seed=seed)
        counts.append(d.n_points / d.grid.n_vertices)
    n_vertices = 80 * make_geometry(2).box_B.n_vertices
    mean = np.mean(counts)
    se = math.sqrt(2.0 / n_vertices)  # var of Poisson(2) mean
    assert abs(mean - 2.0) < 3 * se


def test_lambda_mode_total_rate():
    lam = 0.5
    g = make_geometry(2)
    p = lambda_params(lam)
    assert p.total_rate == 3.0
    tot = sum(sample_diagram(g, p, seed=s).n_points for s in range(40))
    expect = 40 * g.box_B.n_vertices * 3.0 * 2.0
    assert abs(tot - expect) < 4 * math.sqrt(expect)


def test_mark_law_chi_square():
    # chi-square of mark counts against (q/4,...,1-q) on 1e5 points
    g = make_geometry(20)
    d = sample_diagram(g, q_params(0.8), seed=11)
    assert d.n_points > 1e5
    counts = np.bincount(d.mark, minlength=5)
    expect = d.n_points * np.array([0.2, 0.2, 0.2, 0.2, 0.2])
    chi = stats.chisquare(counts, expect)
    assert chi.pvalue > 0.01
    freqs = counts / d.n_points
    assert np.allclose(freqs, 0.2, atol=0.01)


def test_interpoint_gaps_exponential():
    # KS of within-vertex gaps against Exp(1) in q_mode
    g = make_geometry(6)
    d = sample_diagram(g, q_params(0.4), seed=3)
    gaps = []
    for vx in range(0, 37, 3):
        for vy in range(0, 19, 2):
            t, _ = d.points_for(vx, vy)
            if len(t) > 1:
                gaps.extend((-np.diff(t)).tolist())
    ks = stats.kstest(gaps, "expon")
    assert ks.pvalue > 0.01


def test_vertex_counts_exchangeable():
    # spatial homogeneity: per-vertex counts are Poisson(depth) everywhere,
    # and the two halves of the box have the same count distribution
    g = make_geometry(5)
    d = sample_diagram(g, q_params(0.6), seed=19)
    counts = np.diff(d.start)
    assert abs(counts.mean() - 5.0) < 3 * math.sqrt(5.0 / len(counts))
    assert abs(counts.var() / counts.mean() - 1.0) < 0.1
    half = len(counts) // 2
    ks = stats.ks_2samp(counts[:half], counts[half:])
    assert ks.pvalue > 0.01


def test_diagram_text_round_trip(tmp_path):
    g = make_geometry(2)
    d = sample_diagram(g, q_params(0.55), seed=9)
    path = tmp_path / "diagram.txt"
    d.dump_text(path)
    d2 = load_diagram_text(path)
    assert np.array_equal(d.t, d2.t)
    assert np.array_equal(d.mark, d2.mark)
    assert d2.params == d.params
    assert d2.geometry == d.geometry


def test_tie_nudging_gives_strict_global_order():
    g = make_geometry(1)
    grid = Grid(g.box_B)
    vx = np.array([0, 0, 1, 2], np.int32)
    vy = np.array([0, 0, 0, 0], np.int32)
    t = np.array([-0.5, -0.5, -0.5, -0.25], np.float64)
    mark = np.array([0, 4, 1, 2], np.int8)
    d = diagram_from_points(g, q_params(0.5), 0, grid, 1.0, vx, vy, t, mark)
    assert len(set(d.t.tolist())) == 4
