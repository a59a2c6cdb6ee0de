"""Chart maps: shuffle bijectivity, exact invariances, orbits, serialization.

Measure preservation gets two independent checks: finite-difference
determinants on seam-free stencils, and a histogram count of a pushed
uniform grid (no derivatives involved).
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest

from anokat.bicurve import Bicurve
from anokat.dynamics import (
    BoxShuffle,
    Compose,
    InverseMap,
    Rotation,
    empirical_measure,
    identity_map,
    jacobian_check,
    map_from_json_dict,
    pushforward,
)
from anokat.surface import DiscreteMeasure, SurfaceTag, pairwise_dist, sample_leb


def shuffle(q=2, eps=0.3) -> BoxShuffle:
    return BoxShuffle(Bicurve.from_schedule(q, eps))


def random_points(rng, m, strip_only=False, g: BoxShuffle | None = None):
    theta = rng.uniform(0, 1, m)
    if strip_only:
        assert g is not None
        s = rng.uniform(1e-9, g.strip - 1e-9, m)
        y = g.bicurve.gamma_plus(theta) - s
    else:
        y = rng.uniform(-1, 1, m)
    return theta, y


def test_round_trip_forward_inverse():
    g = shuffle()
    rng = np.random.default_rng(2)
    theta, y = random_points(rng, 20000)
    t2, y2 = g.eval_many(theta, y)
    t3, y3 = g.eval_inv_many(t2, y2)
    dt = np.abs((t3 - theta + 0.5) % 1.0 - 0.5)
    assert dt.max() < 1e-10
    assert np.abs(y3 - y).max() < 1e-10


def test_round_trip_inverse_forward():
    g = shuffle(q=3, eps=0.17)
    rng = np.random.default_rng(3)
    theta, y = random_points(rng, 20000, strip_only=True, g=g)
    t2, y2 = g.eval_inv_many(theta, y)
    t3, y3 = g.eval_many(t2, y2)
    dt = np.abs((t3 - theta + 0.5) % 1.0 - 0.5)
    assert dt.max() < 1e-10
    assert np.abs(y3 - y).max() < 1e-10


def test_identity_outside_strip_bitwise():
    g = shuffle()
    bc = g.bicurve
    rng = np.random.default_rng(4)
    theta = rng.uniform(0, 1, 5000)
    above = bc.gamma_plus(theta) + rng.uniform(0, 1, 5000) * (
        1 - bc.gamma_plus(theta))
    below = bc.gamma_minus(theta) - rng.uniform(0, 1, 5000) * (
        bc.gamma_minus(theta) + 1)
    for y in (above, below):
        t2, y2, ids = g.eval_with_pieces(theta, y)
        assert (t2 == theta).all()  # bitwise: untouched copies
        assert (y2 == y).all()
        assert (ids == 0).all()
        t3, y3, _ = g.eval_inv_with_pieces(theta, y)
        assert (t3 == theta).all()
        assert (y3 == y).all()


def test_on_curve_points_fixed():
    g = shuffle()
    bc = g.bicurve
    theta = np.linspace(0, 1, 101, endpoint=False)
    for curve in (bc.gamma_plus, bc.gamma_minus):
        y = curve(theta)
        t2, y2 = g.eval_many(theta, y)
        assert (t2 == theta).all()
        assert (y2 == y).all()


def test_strip_maps_into_strip():
    g = shuffle()
    bc = g.bicurve
    rng = np.random.default_rng(5)
    theta, y = random_points(rng, 30000, strip_only=True, g=g)
    t2, y2 = g.eval_many(theta, y)
    s2 = bc.gamma_plus(t2) - y2
    assert s2.min() > 0.0
    assert s2.max() < g.strip


def test_box_image_location():
    # center of source column c at mid depth lands in level c of the wide
    # target column of the same period
    g = shuffle()
    bc = g.bicurve
    n, P, a, H = bc.n, g.P, g.a, g.H
    for pp in range(bc.q * bc.n):
        for c in range(n):
            theta = pp * P + (c + 0.5) / bc.N
            s = 0.5 * (2 * a + H)
            y = float(bc.gamma_plus(np.array(theta)) - s)
            (t2,), (y2,), ids = g.eval_with_pieces(np.array([theta]),
                                                   np.array([y]))
            assert ids[0, 0] >> 40 == 1
            # same period, inside the wide column
            assert math.floor(t2 * bc.q * bc.n) == pp
            tp = (t2 - pp * P) / P
            assert bc.kappa < tp < 1 - bc.kappa
            s2 = float(bc.gamma_plus(np.array(t2)) - y2)
            lo = a + c * H / n + a / n
            hi = a + (c + 1) * H / n - a / n
            assert lo <= s2 <= hi


def test_box_interior_point_frozen():
    # a point strictly inside box (period 0, column 0) has a closed-form
    # image: longitude scales by P/(1/N) = n, depth shifts into level 0
    g = shuffle()
    bc = g.bicurve
    theta = 2 * bc.kappa / bc.N  # u_in = 2 kappa, inside (kappa, 1 - kappa)
    s = 3 * g.a  # inside [2a, H]
    y = float(bc.gamma_plus(np.array(theta)) - s)
    (t2,), (y2,) = g.eval_many(np.array([theta]), np.array([y]))
    assert t2 == pytest.approx(2 * bc.kappa * g.P, abs=1e-12)
    s2 = float(bc.gamma_plus(np.array(t2))) - y2
    assert s2 == pytest.approx(g.a + 2 * g.a / bc.n, abs=1e-12)


def test_commutes_with_rotation():
    g = shuffle(q=2, eps=0.3)
    bc = g.bicurve
    rng = np.random.default_rng(6)
    theta, y = random_points(rng, 4000, strip_only=True, g=g)
    for denom in (bc.q, bc.q * bc.n):
        r = Rotation(Fraction(1, denom))
        t_gr, y_gr = g.eval_many(*r.eval_many(theta, y))
        t_rg, y_rg = r.eval_many(*g.eval_many(theta, y))
        dt = np.abs((t_gr - t_rg + 0.5) % 1.0 - 0.5)
        assert dt.max() < 1e-12
        assert np.abs(y_gr - y_rg).max() < 1e-12


def test_pushed_grid_stays_near_uniform():
    # derivative-free oracle: the pushed uniform grid must stay transport-
    # close to the grid itself.  Quantization alone costs about the half
    # cell diagonal (0.035 at 32x32) on each side, the longitude stretch of
    # the boxes at most quadruples the pushed side, so anything well beyond
    # ~0.14 would mean actual mass displacement (overlapping levels, a wrong
    # fiber slope, ...), which shows up at the 0.3+ scale.
    from anokat.ot import wasserstein1_exact

    g = shuffle()
    grid = sample_leb(32, 32, SurfaceTag.CYLINDER)
    v, _ = wasserstein1_exact(pushforward(g, grid), grid,
                              max_entries=1024 * 1024 + 1)
    assert v < 0.12


def test_jacobian_dets_one():
    g = shuffle()
    rng = np.random.default_rng(7)
    theta, y = random_points(rng, 4000, strip_only=True, g=g)
    keep = np.abs(y) < 1 - 2e-5
    rep = jacobian_check(g, theta[keep], y[keep], h=1e-5)
    assert rep.n_valid > 0.5 * keep.sum()
    assert rep.max_abs_dev < 1e-6


def test_jacobian_identity_outside():
    g = shuffle()
    theta = np.linspace(0.01, 0.99, 50)
    y = np.full(50, 0.99)  # above gamma_plus <= 1 - delta + delta' ~ 0.965
    rep = jacobian_check(g, theta, y, h=1e-5)
    assert rep.n_valid == 50
    np.testing.assert_allclose(rep.dets, 1.0, atol=1e-9)


def test_piece_ids_detect_seams():
    g = shuffle()
    bc = g.bicurve
    # two points inside the same source column: same piece
    s = 0.5 * (2 * g.a + g.H)
    th = np.array([0.4 / bc.N, 0.6 / bc.N])
    yy = bc.gamma_plus(th) - s
    _, _, ids = g.eval_with_pieces(th, yy)
    assert ids[0, 0] == ids[1, 0]
    # straddling the column/gutter boundary: different pieces
    th = np.array([bc.kappa * 0.5 / bc.N, 2.0 * bc.kappa / bc.N])
    yy = bc.gamma_plus(th) - s
    _, _, ids = g.eval_with_pieces(th, yy)
    assert ids[0, 0] != ids[1, 0]


def test_rotation_exact():
    r = Rotation(Fraction(3, 7))
    theta = np.array([0.0, 0.5, 0.9])
    y = np.array([-0.3, 0.0, 0.3])
    t2, y2 = r.eval_many(theta, y)
    np.testing.assert_allclose(t2, (theta + 3 / 7) % 1.0, atol=1e-15)
    assert (y2 == y).all()
    t3, _ = r.eval_inv_many(t2, y2)
    np.testing.assert_allclose(t3, theta, atol=1e-15)


def test_compose_and_inverse():
    g = shuffle()
    r = Rotation(Fraction(1, 5))
    f = Compose([g, r])  # rotate first, then shuffle
    rng = np.random.default_rng(8)
    theta, y = random_points(rng, 1000)
    t_manual, y_manual = g.eval_many(*r.eval_many(theta, y))
    t_f, y_f = f.eval_many(theta, y)
    assert (t_f == t_manual).all() and (y_f == y_manual).all()
    finv = InverseMap(f)
    t_b, y_b = finv.eval_many(t_f, y_f)
    dt = np.abs((t_b - theta + 0.5) % 1.0 - 0.5)
    assert dt.max() < 1e-10 and np.abs(y_b - y).max() < 1e-10
    assert f.n_piece_layers == 1
    assert identity_map().n_piece_layers == 0


def test_identity_map():
    e = identity_map()
    theta = np.array([0.1, 0.7])
    y = np.array([0.2, -0.9])
    t2, y2 = e.eval_many(theta, y)
    assert (t2 == theta).all() and (y2 == y).all()


def test_json_round_trip():
    tree = Compose([
        Rotation(Fraction(7, 24)),
        InverseMap(shuffle(q=2, eps=0.3)),
        Compose([shuffle(q=3, eps=0.2), Rotation(Fraction(1, 3))]),
    ])
    back = map_from_json_dict(tree.to_json_dict())
    assert back.to_json_dict() == tree.to_json_dict()
    rng = np.random.default_rng(9)
    theta, y = rng.uniform(0, 1, 500), rng.uniform(-1, 1, 500)
    t1, y1 = tree.eval_many(theta, y)
    t2, y2 = back.eval_many(theta, y)
    assert (t1 == t2).all() and (y1 == y2).all()


def test_json_rejects_unknown_kind():
    with pytest.raises(ValueError, match="unknown map kind"):
        map_from_json_dict({"kind": "squiggle"})


def test_pushforward_preserves_weights():
    g = shuffle()
    mu = sample_leb(10, 10, SurfaceTag.SPHERE)
    nu = pushforward(g, mu, label="pushed")
    assert nu.tag is SurfaceTag.SPHERE
    assert nu.label == "pushed"
    np.testing.assert_array_equal(nu.weights, mu.weights)


def test_empirical_measure_matches_naive_iteration():
    g = shuffle(q=1, eps=0.4)
    h = Compose([g])
    alpha = Fraction(5, 17)
    f_maps = [h, Rotation(alpha), InverseMap(h)]
    x = (0.123, 0.456)
    k = 40
    # naive: iterate f = h . R . h^-1 one step at a time
    pts = [x]
    cur = x
    for _ in range(k - 1):
        t, y = np.array([cur[0]]), np.array([cur[1]])
        for m in reversed(f_maps):
            t, y = m.eval_many(t, y)
        cur = (float(t[0]), float(y[0]))
        pts.append(cur)
    naive = np.array(pts)
    emp = empirical_measure(h, alpha, x, k, SurfaceTag.CYLINDER)
    assert len(emp) == k
    d = pairwise_dist(emp.theta, emp.y, naive[:, 0], naive[:, 1],
                      SurfaceTag.CYLINDER)
    assert np.diag(d).max() < 1e-9


def test_empirical_measure_stride():
    g = shuffle(q=1, eps=0.4)
    h = Compose([g])
    alpha = Fraction(2, 9)
    full = empirical_measure(h, alpha, (0.3, 0.1), 18, SurfaceTag.CYLINDER)
    sub = empirical_measure(h, alpha, (0.3, 0.1), 18, SurfaceTag.CYLINDER,
                            stride=3)
    assert len(sub) == 6
    np.testing.assert_allclose(sub.theta, full.theta[::3], atol=0)
    np.testing.assert_allclose(sub.y, full.y[::3], atol=0)


def test_empirical_measure_bad_k():
    with pytest.raises(ValueError):
        empirical_measure(identity_map(), Fraction(1, 2), (0, 0), 0,
                          SurfaceTag.CYLINDER)


def test_jacobian_stencil_guard():
    g = shuffle()
    with pytest.raises(ValueError, match="chart"):
        jacobian_check(g, np.array([0.5]), np.array([0.99999]), h=1e-5)
