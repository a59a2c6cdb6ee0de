"""Transport layer: exact solver vs LP oracle, certificates, hull search.

The network simplex is the engine everything downstream trusts, so it is
cross-checked here against an independent dense LP (HiGHS) on random small
instances, against hand-computed frozen values, and against the assignment
fast path on equal-weight instances.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from anokat import _netsimplex
from anokat.ot import (
    HullCoordinates,
    TransportPlan,
    cost_matrix,
    dist_to_hull,
    dual_certificate_check,
    hull_search,
    lp_wasserstein1,
    wasserstein1_entropic,
    wasserstein1_exact,
)
from anokat.surface import (
    DiscreteMeasure,
    SurfaceTag,
    mixture,
    sample_leb,
    sample_mu_y,
)

ALL_TAGS = [SurfaceTag.CYLINDER, SurfaceTag.SPHERE, SurfaceTag.DISK]


def random_measure(rng, n, tag, equal_weights=False):
    theta = rng.uniform(0, 1, n)
    y = rng.uniform(-1, 1, n)
    if equal_weights:
        w = np.full(n, 1.0 / n)
    else:
        w = rng.uniform(0.05, 1.0, n)
        w = w / w.sum()
    return DiscreteMeasure(theta, y, w, tag)


# ------------------------------------------------------------ oracle agreement

def test_exact_matches_lp_oracle_small():
    rng = np.random.default_rng(2024)
    for trial in range(80):
        tag = ALL_TAGS[trial % 3]
        nr = int(rng.integers(1, 7))
        nc = int(rng.integers(1, 7))
        mu = random_measure(rng, nr, tag)
        nu = random_measure(rng, nc, tag)
        got, plan = wasserstein1_exact(mu, nu)
        want = lp_wasserstein1(mu, nu)
        assert got == pytest.approx(want, abs=1e-9), f"trial {trial}"
        row, col = plan.marginals(nr, nc)
        np.testing.assert_allclose(row, mu.weights, atol=1e-10)
        np.testing.assert_allclose(col, nu.weights, atol=1e-10)


def test_exact_matches_lp_oracle_medium():
    rng = np.random.default_rng(5)
    for tag in ALL_TAGS:
        mu = random_measure(rng, 40, tag)
        nu = random_measure(rng, 33, tag)
        got, _ = wasserstein1_exact(mu, nu)
        assert got == pytest.approx(lp_wasserstein1(mu, nu), abs=1e-9)


def test_assignment_path_matches_simplex():
    # equal counts, equal weights: Hungarian fast path must agree with the
    # network simplex called directly on the same instance
    rng = np.random.default_rng(17)
    for tag in ALL_TAGS:
        mu = random_measure(rng, 24, tag, equal_weights=True)
        nu = random_measure(rng, 24, tag, equal_weights=True)
        fast, plan = wasserstein1_exact(mu, nu)
        C = cost_matrix(mu, nu)
        slow, _, status, _ = _netsimplex.solve_transport(
            mu.weights, nu.weights, C)
        assert status == 0
        assert fast == pytest.approx(slow, abs=1e-11)
        assert plan.mass.size == 24


# ----------------------------------------------------------------- frozen values

def D(theta, y, tag=SurfaceTag.CYLINDER, w=None):
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if w is None:
        w = np.full(theta.size, 1.0 / theta.size)
    return DiscreteMeasure(theta, y, np.asarray(w, dtype=float), tag)


def test_frozen_point_to_point():
    # single atoms: distance is just the ground metric
    v, _ = wasserstein1_exact(D(0.0, 0.0), D(0.25, 0.0))
    assert v == pytest.approx(0.25, abs=1e-12)
    v, _ = wasserstein1_exact(D(0.9, -0.5), D(0.1, 0.5))
    assert v == pytest.approx(math.hypot(0.2, 1.0), abs=1e-12)


def test_frozen_split_to_point():
    # all mass must travel to the single target atom
    mu = D([0.0, 0.5], [0.0, 0.0], w=[0.3, 0.7])
    nu = D(0.25, 0.0)
    v, plan = wasserstein1_exact(mu, nu)
    assert v == pytest.approx(0.3 * 0.25 + 0.7 * 0.25, abs=1e-12)
    assert sorted(plan.pairs) == [(0, 0, pytest.approx(0.3)),
                                  (1, 0, pytest.approx(0.7))]


def test_frozen_two_by_two_crossing():
    # symmetric 2x2 where the identity matching is optimal and the crossing
    # matching costs strictly more
    mu = D([0.0, 0.5], [0.5, 0.5], w=[0.5, 0.5])
    nu = D([0.0, 0.5], [-0.5, -0.5], w=[0.5, 0.5])
    v, _ = wasserstein1_exact(mu, nu)
    assert v == pytest.approx(1.0, abs=1e-12)


def test_frozen_partial_overlap():
    # mass 0.6 stays put, 0.4 moves by 0.1 in theta
    mu = D([0.2, 0.4], [0.0, 0.0], w=[0.6, 0.4])
    nu = D([0.2, 0.5], [0.0, 0.0], w=[0.6, 0.4])
    v, _ = wasserstein1_exact(mu, nu)
    assert v == pytest.approx(0.4 * 0.1, abs=1e-12)


def test_identity_and_symmetry():
    rng = np.random.default_rng(23)
    mu = random_measure(rng, 15, SurfaceTag.CYLINDER)
    nu = random_measure(rng, 11, SurfaceTag.CYLINDER)
    v0, _ = wasserstein1_exact(mu, mu)
    assert v0 == pytest.approx(0.0, abs=1e-12)
    v1, _ = wasserstein1_exact(mu, nu)
    v2, _ = wasserstein1_exact(nu, mu)
    assert v1 == pytest.approx(v2, abs=1e-11)


def test_triangle_inequality():
    rng = np.random.default_rng(29)
    for tag in ALL_TAGS:
        a = random_measure(rng, 8, tag)
        b = random_measure(rng, 9, tag)
        c = random_measure(rng, 10, tag)
        ab = wasserstein1_exact(a, b)[0]
        bc = wasserstein1_exact(b, c)[0]
        ac = wasserstein1_exact(a, c)[0]
        assert ac <= ab + bc + 1e-9


# ----------------------------------------------------------------- guard rails

def test_entry_cap():
    rng = np.random.default_rng(31)
    mu = random_measure(rng, 30, SurfaceTag.CYLINDER)
    nu = random_measure(rng, 40, SurfaceTag.CYLINDER)
    with pytest.raises(ValueError, match="cap"):
        wasserstein1_exact(mu, nu, max_entries=1000)
    # raising the cap explicitly works
    wasserstein1_exact(mu, nu, max_entries=1200)


def test_tag_mismatch():
    mu = D(0.0, 0.0, SurfaceTag.SPHERE)
    nu = D(0.0, 0.0, SurfaceTag.DISK)
    with pytest.raises(ValueError, match="mismatch"):
        wasserstein1_exact(mu, nu)


def test_zero_weight_atoms_ignored():
    mu = D([0.0, 0.9], [0.0, 0.9], w=[1.0, 0.0])
    nu = D(0.25, 0.0)
    v, plan = wasserstein1_exact(mu, nu)
    assert v == pytest.approx(0.25, abs=1e-12)
    assert 1 not in set(plan.source_idx)


# ------------------------------------------------------------ dual certificates

def test_certificate_accepts_optimal_plans():
    rng = np.random.default_rng(37)
    for trial in range(20):
        tag = ALL_TAGS[trial % 3]
        mu = random_measure(rng, int(rng.integers(2, 20)), tag)
        nu = random_measure(rng, int(rng.integers(2, 20)), tag)
        _, plan = wasserstein1_exact(mu, nu)
        assert dual_certificate_check(mu, nu, plan)


def test_certificate_accepts_assignment_plans():
    rng = np.random.default_rng(41)
    mu = random_measure(rng, 16, SurfaceTag.SPHERE, equal_weights=True)
    nu = random_measure(rng, 16, SurfaceTag.SPHERE, equal_weights=True)
    _, plan = wasserstein1_exact(mu, nu)
    assert dual_certificate_check(mu, nu, plan)


def test_certificate_rejects_inflated_mass():
    rng = np.random.default_rng(43)
    mu = random_measure(rng, 8, SurfaceTag.CYLINDER)
    nu = random_measure(rng, 8, SurfaceTag.CYLINDER)
    _, plan = wasserstein1_exact(mu, nu)
    bump = np.ones(plan.mass.size)
    bump[int(np.argmax(plan.mass))] = 1.1
    bad = TransportPlan(plan.source_idx, plan.target_idx, plan.mass * bump,
                        plan.cost)
    assert not dual_certificate_check(mu, nu, bad)


def test_certificate_rejects_suboptimal_matching():
    # two sources, two targets, crossing matching preserves marginals but is
    # strictly worse than the parallel one
    mu = D([0.0, 0.0], [-0.5, 0.5], w=[0.5, 0.5])
    nu = D([0.1, 0.1], [-0.5, 0.5], w=[0.5, 0.5])
    crossing = TransportPlan(np.array([0, 1]), np.array([1, 0]),
                             np.array([0.5, 0.5]), 0.0)
    assert not dual_certificate_check(mu, nu, crossing)
    parallel = TransportPlan(np.array([0, 1]), np.array([0, 1]),
                             np.array([0.5, 0.5]), 0.1)
    assert dual_certificate_check(mu, nu, parallel)


def test_certificate_structural_errors():
    mu = D([0.0, 0.5], [0.0, 0.0])
    nu = D([0.1, 0.6], [0.0, 0.0])
    with pytest.raises(ValueError):
        dual_certificate_check(mu, nu, TransportPlan(
            np.array([0, 5]), np.array([0, 1]), np.array([0.5, 0.5]), 0.0))
    with pytest.raises(ValueError):
        dual_certificate_check(mu, nu, TransportPlan(
            np.array([0, 1]), np.array([0, 1]), np.array([0.5, -0.5]), 0.0))
    with pytest.raises(ValueError):
        dual_certificate_check(mu, nu, TransportPlan(
            np.array([0, 1]), np.array([0, 1]), np.array([0.5, np.nan]), 0.0))


# ------------------------------------------------------------- entropic solver

def test_entropic_close_to_exact():
    rng = np.random.default_rng(47)
    worst = 0.0
    for trial in range(50):
        tag = ALL_TAGS[trial % 3]
        mu = random_measure(rng, 64, tag, equal_weights=bool(trial % 2))
        nu = random_measure(rng, 64, tag)
        exact, _ = wasserstein1_exact(mu, nu)
        diam = 2.0 if tag is not SurfaceTag.CYLINDER else math.hypot(0.5, 2.0)
        ent = wasserstein1_entropic(mu, nu, reg=0.002 * diam)
        # rounded plan is a feasible coupling: upper bound on the exact value
        assert ent >= exact - 1e-9
        worst = max(worst, (ent - exact) / diam)
    assert worst <= 0.02


def test_entropic_self_distance_small():
    rng = np.random.default_rng(53)
    mu = random_measure(rng, 40, SurfaceTag.CYLINDER, equal_weights=True)
    reg = 0.01
    v = wasserstein1_entropic(mu, mu, reg=reg)
    assert v <= reg * math.log(40) + 1e-9


def test_entropic_bad_reg():
    mu = D(0.0, 0.0)
    with pytest.raises(ValueError):
        wasserstein1_entropic(mu, mu, reg=0.0)


def test_entropic_nonconvergence_reports_violation():
    rng = np.random.default_rng(59)
    mu = random_measure(rng, 32, SurfaceTag.CYLINDER)
    nu = random_measure(rng, 32, SurfaceTag.CYLINDER)
    with pytest.raises(RuntimeError, match="marginal violation"):
        wasserstein1_entropic(mu, nu, reg=1e-5, iters=3)


# ----------------------------------------------------------------- hull search

def small_refs(tag=SurfaceTag.CYLINDER):
    return (sample_leb(8, 8, tag), sample_mu_y(1.0, 16, tag),
            sample_mu_y(-1.0, 16, tag))


def test_hull_membership_gives_zero():
    leb, top, bot = small_refs()
    for mu, coords in [(leb, (1, 0, 0)), (top, (0, 1, 0)), (bot, (0, 0, 1))]:
        v, w = dist_to_hull(mu, leb, top, bot)
        assert v == pytest.approx(0.0, abs=1e-12)
        assert (w.a, w.b, w.c) == coords


def test_hull_recovers_interior_mixture():
    leb, top, bot = small_refs()
    target = mixture([(leb, 0.5), (top, 0.25), (bot, 0.25)])
    v, w = dist_to_hull(target, leb, top, bot)
    assert v == pytest.approx(0.0, abs=1e-12)
    assert (w.a, w.b, w.c) == (0.5, 0.25, 0.25)


def test_hull_refinement_monotone():
    # nested grids: doubling the resolution can only lower the minimum
    rng = np.random.default_rng(61)
    leb, top, bot = small_refs()
    mu = random_measure(rng, 24, SurfaceTag.CYLINDER, equal_weights=True)
    v8, _ = dist_to_hull(mu, leb, top, bot, resolution=8)
    v16, _ = dist_to_hull(mu, leb, top, bot, resolution=16)
    v32, _ = dist_to_hull(mu, leb, top, bot, resolution=32)
    assert v16 <= v8 + 1e-15
    assert v32 <= v16 + 1e-15
    default, _ = dist_to_hull(mu, leb, top, bot)
    assert default <= v8 + 1e-15


def test_hull_search_certificate_fields():
    rng = np.random.default_rng(67)
    leb, top, bot = small_refs(SurfaceTag.SPHERE)
    mu = random_measure(rng, 20, SurfaceTag.SPHERE, equal_weights=True)
    res = hull_search(mu, leb, top, bot)
    assert res.value >= 0.0
    assert res.gap_bound == pytest.approx(2.0 / 8)
    assert res.n_evals >= 45  # full coarse scan plus refinement
    # warm start from the cold answer can only match or improve
    warm = hull_search(mu, leb, top, bot, start=res.coords)
    assert warm.value <= res.value + 1e-15
    assert math.isnan(warm.gap_bound)
    assert warm.n_evals < res.n_evals


def test_hull_distance_upper_bounds_any_member():
    rng = np.random.default_rng(71)
    leb, top, bot = small_refs()
    mu = random_measure(rng, 16, SurfaceTag.CYLINDER)
    v, _ = dist_to_hull(mu, leb, top, bot)
    probe = mixture([(leb, 0.375), (top, 0.25), (bot, 0.375)])
    direct, _ = wasserstein1_exact(mu, probe)
    assert v <= direct + 1e-12


def test_hull_coordinates_validation():
    with pytest.raises(ValueError):
        HullCoordinates(0.5, 0.6, 0.2)
    with pytest.raises(ValueError):
        HullCoordinates(-0.1, 0.6, 0.5)
    HullCoordinates(0.25, 0.5, 0.25)
