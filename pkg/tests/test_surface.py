"""Geometry layer: charts, metrics, discrete measures, serialization."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anokat.surface import (
    DiscreteMeasure,
    SurfacePoint,
    SurfaceTag,
    dist,
    embed,
    mixture,
    pairwise_dist,
    project_pi,
    sample_leb,
    sample_mu_y,
    surface_diameter,
)

ALL_TAGS = [SurfaceTag.CYLINDER, SurfaceTag.SPHERE, SurfaceTag.DISK]


def P(theta, y, tag=SurfaceTag.CYLINDER):
    return SurfacePoint(theta, y, tag)


# ---------------------------------------------------------------- frozen values

FROZEN_DISTANCES = [
    # cylinder: flat product metric, wrap-around in theta
    (P(0.0, 0.0), P(0.5, 0.0), 0.5),
    (P(0.9, 0.0), P(0.1, 0.0), 0.2),
    (P(0.0, -1.0), P(0.0, 1.0), 2.0),
    (P(0.25, -1.0), P(0.75, 1.0), math.hypot(0.5, 2.0)),
    (P(0.0, 0.25), P(0.3, -0.15), math.hypot(0.3, 0.4)),
    # sphere: chordal metric in R^3
    (P(0.0, 1.0, SurfaceTag.SPHERE), P(0.37, 1.0, SurfaceTag.SPHERE), 0.0),
    (P(0.0, 1.0, SurfaceTag.SPHERE), P(0.2, -1.0, SurfaceTag.SPHERE), 2.0),
    (P(0.0, 0.0, SurfaceTag.SPHERE), P(0.5, 0.0, SurfaceTag.SPHERE), 2.0),
    (P(0.0, 0.0, SurfaceTag.SPHERE), P(0.25, 0.0, SurfaceTag.SPHERE),
     math.sqrt(2.0)),
    (P(0.1, 1.0, SurfaceTag.SPHERE), P(0.9, 0.0, SurfaceTag.SPHERE),
     math.sqrt(2.0)),
    # disk: planar chordal metric, radius sqrt((1+y)/2)
    (P(0.0, -1.0, SurfaceTag.DISK), P(0.77, -1.0, SurfaceTag.DISK), 0.0),
    (P(0.0, -1.0, SurfaceTag.DISK), P(0.3, 1.0, SurfaceTag.DISK), 1.0),
    (P(0.0, 1.0, SurfaceTag.DISK), P(0.5, 1.0, SurfaceTag.DISK), 2.0),
    (P(0.0, 1.0, SurfaceTag.DISK), P(0.25, 1.0, SurfaceTag.DISK),
     math.sqrt(2.0)),
    (P(0.0, -1.0, SurfaceTag.DISK), P(0.0, 0.0, SurfaceTag.DISK),
     math.sqrt(0.5)),
]


@pytest.mark.parametrize("p1,p2,expected", FROZEN_DISTANCES)
def test_dist_frozen(p1, p2, expected):
    assert dist(p1, p2) == pytest.approx(expected, abs=1e-12)
    assert dist(p2, p1) == pytest.approx(expected, abs=1e-12)


def test_surface_diameter_frozen():
    assert surface_diameter(SurfaceTag.CYLINDER) == pytest.approx(
        math.sqrt(4.25), abs=1e-15)
    assert surface_diameter(SurfaceTag.SPHERE) == 2.0
    assert surface_diameter(SurfaceTag.DISK) == 2.0


@pytest.mark.parametrize("tag", ALL_TAGS)
def test_diameter_dominates_samples(tag):
    rng = np.random.default_rng(7)
    th = rng.uniform(0, 1, 400)
    yy = rng.uniform(-1, 1, 400)
    D = pairwise_dist(th, yy, th, yy, tag)
    assert D.max() <= surface_diameter(tag) + 1e-12
    # and the bound is nearly attained
    assert D.max() >= 0.95 * surface_diameter(tag)


# ------------------------------------------------------------------- embeddings

def test_embed_sphere_unit_norm():
    rng = np.random.default_rng(0)
    xyz = embed(rng.uniform(0, 1, 200), rng.uniform(-1, 1, 200),
                SurfaceTag.SPHERE)
    assert xyz.shape == (200, 3)
    np.testing.assert_allclose(np.linalg.norm(xyz, axis=1), 1.0, atol=1e-12)


def test_embed_disk_in_unit_disc():
    rng = np.random.default_rng(1)
    xy = embed(rng.uniform(0, 1, 200), rng.uniform(-1, 1, 200), SurfaceTag.DISK)
    assert xy.shape == (200, 2)
    assert (np.linalg.norm(xy, axis=1) <= 1 + 1e-12).all()


def test_project_pi_matches_embed():
    p = P(0.3, 0.4, SurfaceTag.SPHERE)
    np.testing.assert_allclose(
        project_pi(p),
        embed(np.array([0.3]), np.array([0.4]), SurfaceTag.SPHERE)[0])


# ----------------------------------------------------------------- metric axioms

coords = st.tuples(st.floats(0, 1, exclude_max=True), st.floats(-1, 1))


@settings(max_examples=200, deadline=None)
@given(coords, coords, st.sampled_from(ALL_TAGS))
def test_metric_symmetry_nonneg(c1, c2, tag):
    p1, p2 = P(*c1, tag), P(*c2, tag)
    d = dist(p1, p2)
    assert d >= 0.0
    assert d == pytest.approx(dist(p2, p1), abs=1e-14)


@settings(max_examples=200, deadline=None)
@given(coords, coords, coords, st.sampled_from(ALL_TAGS))
def test_metric_triangle(c1, c2, c3, tag):
    p1, p2, p3 = (P(*c, tag) for c in (c1, c2, c3))
    assert dist(p1, p3) <= dist(p1, p2) + dist(p2, p3) + 1e-12


@settings(max_examples=100, deadline=None)
@given(coords, st.sampled_from(ALL_TAGS))
def test_metric_identity(c, tag):
    p = P(*c, tag)
    assert dist(p, p) == 0.0


def test_collapsed_points_identified():
    # sphere poles and disk center collapse in the chart
    assert P(0.1, 1.0, SurfaceTag.SPHERE) == P(0.8, 1.0, SurfaceTag.SPHERE)
    assert hash(P(0.1, 1.0, SurfaceTag.SPHERE)) == hash(P(0.8, 1.0, SurfaceTag.SPHERE))
    assert P(0.1, -1.0, SurfaceTag.DISK) == P(0.8, -1.0, SurfaceTag.DISK)
    assert P(0.1, 1.0, SurfaceTag.DISK) != P(0.8, 1.0, SurfaceTag.DISK)
    assert P(0.1, 1.0) != P(0.8, 1.0)  # cylinder never collapses


def test_theta_wraps():
    assert P(1.25, 0.0).theta == pytest.approx(0.25)
    assert P(-0.25, 0.0).theta == pytest.approx(0.75)


def test_invalid_y_rejected():
    with pytest.raises(ValueError):
        P(0.0, 1.5)
    with pytest.raises(ValueError):
        P(0.0, -1.0000001)


def test_dist_tag_mismatch():
    with pytest.raises(ValueError):
        dist(P(0, 0, SurfaceTag.SPHERE), P(0, 0, SurfaceTag.DISK))


@pytest.mark.parametrize("tag", ALL_TAGS)
def test_pairwise_matches_scalar(tag):
    rng = np.random.default_rng(3)
    t1, y1 = rng.uniform(0, 1, 12), rng.uniform(-1, 1, 12)
    t2, y2 = rng.uniform(0, 1, 9), rng.uniform(-1, 1, 9)
    D = pairwise_dist(t1, y1, t2, y2, tag)
    assert D.shape == (12, 9)
    for i in (0, 5, 11):
        for j in (0, 4, 8):
            assert D[i, j] == pytest.approx(
                dist(P(t1[i], y1[i], tag), P(t2[j], y2[j], tag)), abs=1e-12)


# ------------------------------------------------------------- DiscreteMeasure

def test_measure_validation():
    with pytest.raises(ValueError):
        DiscreteMeasure(np.array([0.0]), np.array([0.0]), np.array([0.5]),
                        SurfaceTag.CYLINDER)
    with pytest.raises(ValueError):
        DiscreteMeasure(np.array([0.0, 0.1]), np.array([0.0, 0.0]),
                        np.array([1.5, -0.5]), SurfaceTag.CYLINDER)
    with pytest.raises(ValueError):
        DiscreteMeasure(np.array([0.0]), np.array([3.0]), np.array([1.0]),
                        SurfaceTag.CYLINDER)


def test_sample_mu_y():
    mu = sample_mu_y(0.25, 16, SurfaceTag.CYLINDER)
    assert len(mu) == 16
    assert (mu.y == 0.25).all()
    np.testing.assert_allclose(mu.weights, 1 / 16)
    np.testing.assert_allclose(mu.theta, (np.arange(16) + 0.5) / 16)


def test_sample_leb():
    mu = sample_leb(8, 4, SurfaceTag.SPHERE)
    assert len(mu) == 32
    assert mu.weights.sum() == pytest.approx(1.0, abs=1e-15)
    assert mu.y.min() == pytest.approx(-0.75)
    assert mu.y.max() == pytest.approx(0.75)


def test_mixture_drops_zero_components():
    a = sample_mu_y(0.5, 4, SurfaceTag.CYLINDER)
    b = sample_mu_y(-0.5, 4, SurfaceTag.CYLINDER)
    mix = mixture([(a, 0.25), (b, 0.75)])
    assert len(mix) == 8
    assert mix.weights.sum() == pytest.approx(1.0, abs=1e-12)
    mix0 = mixture([(a, 0.0), (b, 1.0)])
    assert len(mix0) == 4
    np.testing.assert_allclose(mix0.y, -0.5)


def test_csv_round_trip():
    rng = np.random.default_rng(11)
    w = rng.uniform(0.1, 1.0, 10)
    mu = DiscreteMeasure(rng.uniform(0, 1, 10), rng.uniform(-1, 1, 10),
                         w / w.sum(), SurfaceTag.DISK, label="orbit-3")
    text = mu.to_csv_str()
    assert text.splitlines()[0] == "# anokat measure tag=disk label=orbit-3"
    assert text.splitlines()[1] == "theta,y,weight"
    back = DiscreteMeasure.from_csv_str(text)
    assert back.tag is SurfaceTag.DISK
    assert back.label == "orbit-3"
    np.testing.assert_array_equal(back.theta, mu.theta)
    np.testing.assert_array_equal(back.y, mu.y)
    np.testing.assert_array_equal(back.weights, mu.weights)
    # writing again is byte-identical (repr floats are stable)
    assert back.to_csv_str() == text


def test_csv_file_round_trip(tmp_path):
    mu = sample_leb(4, 4, SurfaceTag.CYLINDER)
    path = tmp_path / "m.csv"
    mu.to_csv(path)
    back = DiscreteMeasure.from_csv(path)
    np.testing.assert_array_equal(back.theta, mu.theta)
    assert back.tag is SurfaceTag.CYLINDER


def test_tag_parse():
    assert SurfaceTag.parse("cylinder") is SurfaceTag.CYLINDER
    assert SurfaceTag.parse("SPHERE") is SurfaceTag.SPHERE
    with pytest.raises(ValueError):
        SurfaceTag.parse("torus")
