"""Surfaces, the chart embedding, metrics, and discrete reference measures.

Everything lives in cylinder coordinates (theta, y) with theta in R/Z and
y in [-1, 1].  The three surfaces share those coordinates and differ only in
the metric (induced by the chart embedding) and in which horizontal circles
collapse to a point: both ends on the sphere, the y = -1 end (the center) on
the disk, neither on the cylinder.
"""

from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

__all__ = [
    "SurfaceTag",
    "SurfacePoint",
    "DiscreteMeasure",
    "project_pi",
    "embed",
    "dist",
    "pairwise_dist",
    "elementwise_dist",
    "theta_arc_dist",
    "surface_diameter",
    "sample_mu_y",
    "sample_leb",
    "mixture",
]

_WEIGHT_TOL = 1e-12


class SurfaceTag(enum.Enum):
    CYLINDER = "cylinder"
    SPHERE = "sphere"
    DISK = "disk"

    @classmethod
    def parse(cls, name: str) -> "SurfaceTag":
        key = name.strip().lower()
        for tag in cls:
            if tag.value == key:
                return tag
        raise ValueError(f"unknown surface {name!r}; expected one of "
                         f"{[t.value for t in cls]}")

    @property
    def collapses_top(self) -> bool:
        return self is SurfaceTag.SPHERE

    @property
    def collapses_bottom(self) -> bool:
        return self in (SurfaceTag.SPHERE, SurfaceTag.DISK)


def _wrap_theta(theta: float) -> float:
    t = math.fmod(theta, 1.0)
    if t < 0.0:
        t += 1.0
    return 0.0 if t == 1.0 else t


@dataclass(frozen=True)
class SurfacePoint:
    """A point in the (theta, y) chart with its surface tag.

    Points on a collapsed circle (sphere poles, disk center) compare equal
    regardless of theta.
    """

    theta: float
    y: float
    tag: SurfaceTag

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", _wrap_theta(float(self.theta)))
        y = float(self.y)
        if not -1.0 <= y <= 1.0:
            raise ValueError(f"y = {y} outside [-1, 1]")
        object.__setattr__(self, "y", y)

    def _collapsed(self) -> bool:
        if self.y == 1.0 and self.tag.collapses_top:
            return True
        if self.y == -1.0 and self.tag.collapses_bottom:
            return True
        return False

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SurfacePoint):
            return NotImplemented
        if self.tag is not other.tag:
            return False
        if self.y == other.y and self._collapsed():
            return True
        return self.theta == other.theta and self.y == other.y

    def __hash__(self) -> int:
        if self._collapsed():
            return hash((self.tag, self.y))
        return hash((self.tag, self.theta, self.y))


def embed(theta: np.ndarray, y: np.ndarray, tag: SurfaceTag) -> np.ndarray:
    """Chart embedding of (theta, y) arrays into ambient space.

    Cylinder points stay as (theta, y) rows; sphere points map to
    (sqrt(1-y^2) cos 2 pi theta, sqrt(1-y^2) sin 2 pi theta, y); disk points
    map to sqrt((1+y)/2) (cos 2 pi theta, sin 2 pi theta).
    """
    theta = np.asarray(theta, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if tag is SurfaceTag.CYLINDER:
        return np.stack([theta, y], axis=-1)
    ang = 2.0 * np.pi * theta
    if tag is SurfaceTag.SPHERE:
        r = np.sqrt(np.clip(1.0 - y * y, 0.0, None))
        return np.stack([r * np.cos(ang), r * np.sin(ang), y], axis=-1)
    r = np.sqrt(np.clip((1.0 + y) / 2.0, 0.0, None))
    return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=-1)


def project_pi(p: SurfacePoint) -> np.ndarray:
    """Image of a single point under the chart embedding."""
    return embed(np.float64(p.theta), np.float64(p.y), p.tag).reshape(-1)


def theta_arc_dist(t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
    d = np.abs(np.asarray(t1, dtype=np.float64) - np.asarray(t2, dtype=np.float64))
    d = np.mod(d, 1.0)
    return np.minimum(d, 1.0 - d)


def dist(p1: SurfacePoint, p2: SurfacePoint) -> float:
    if p1.tag is not p2.tag:
        raise ValueError(f"tag mismatch: {p1.tag} vs {p2.tag}")
    if p1.tag is SurfaceTag.CYLINDER:
        dt = theta_arc_dist(p1.theta, p2.theta)
        return float(np.hypot(dt, p1.y - p2.y))
    a = project_pi(p1)
    b = project_pi(p2)
    return float(np.linalg.norm(a - b))


def pairwise_dist(theta1: np.ndarray, y1: np.ndarray,
                  theta2: np.ndarray, y2: np.ndarray,
                  tag: SurfaceTag) -> np.ndarray:
    """Dense (len(1), len(2)) matrix of surface distances."""
    theta1 = np.asarray(theta1, dtype=np.float64)
    theta2 = np.asarray(theta2, dtype=np.float64)
    y1 = np.asarray(y1, dtype=np.float64)
    y2 = np.asarray(y2, dtype=np.float64)
    if tag is SurfaceTag.CYLINDER:
        dt = np.abs(theta1[:, None] - theta2[None, :])
        dt = np.mod(dt, 1.0)
        np.minimum(dt, 1.0 - dt, out=dt)
        return np.hypot(dt, y1[:, None] - y2[None, :])
    e1 = embed(theta1, y1, tag)
    e2 = embed(theta2, y2, tag)
    return cdist(e1, e2)


def elementwise_dist(theta1: np.ndarray, y1: np.ndarray,
                     theta2: np.ndarray, y2: np.ndarray,
                     tag: SurfaceTag) -> np.ndarray:
    """Surface distances between paired points (same-shape arrays)."""
    theta1 = np.asarray(theta1, dtype=np.float64)
    theta2 = np.asarray(theta2, dtype=np.float64)
    y1 = np.asarray(y1, dtype=np.float64)
    y2 = np.asarray(y2, dtype=np.float64)
    if tag is SurfaceTag.CYLINDER:
        return np.hypot(theta_arc_dist(theta1, theta2), y1 - y2)
    e1 = embed(theta1, y1, tag)
    e2 = embed(theta2, y2, tag)
    return np.linalg.norm(e1 - e2, axis=-1)


def surface_diameter(tag: SurfaceTag) -> float:
    if tag is SurfaceTag.CYLINDER:
        return math.hypot(0.5, 2.0)
    return 2.0


@dataclass(eq=False)
class DiscreteMeasure:
    """Weighted atoms on one surface; weights sum to 1.

    Atom coordinates are stored as flat arrays for vectorized pushforwards
    and cost matrices.  ``label`` is free-form provenance.
    """

    theta: np.ndarray
    y: np.ndarray
    weights: np.ndarray
    tag: SurfaceTag
    label: str = ""

    def __post_init__(self) -> None:
        self.theta = np.mod(np.asarray(self.theta, dtype=np.float64).ravel(), 1.0)
        self.theta[self.theta == 1.0] = 0.0
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if not (self.theta.shape == self.y.shape == self.weights.shape):
            raise ValueError("atom arrays must have equal length")
        if self.theta.size == 0:
            raise ValueError("measure needs at least one atom")
        if np.any(self.y < -1.0 - 1e-15) or np.any(self.y > 1.0 + 1e-15):
            raise ValueError("atom height outside [-1, 1]")
        np.clip(self.y, -1.0, 1.0, out=self.y)
        if np.any(self.weights < 0.0):
            raise ValueError("negative atom weight")
        total = float(self.weights.sum())
        if abs(total - 1.0) > _WEIGHT_TOL:
            raise ValueError(f"weights sum to {total}, not 1")

    def __len__(self) -> int:
        return int(self.theta.size)

    @property
    def atoms(self) -> list[tuple[SurfacePoint, float]]:
        return [(SurfacePoint(t, h, self.tag), float(w))
                for t, h, w in zip(self.theta, self.y, self.weights)]

    def with_label(self, label: str) -> "DiscreteMeasure":
        return DiscreteMeasure(self.theta.copy(), self.y.copy(),
                               self.weights.copy(), self.tag, label)

    def retag(self, tag: SurfaceTag) -> "DiscreteMeasure":
        """Same atoms in (theta, y) coordinates, different metric."""
        return DiscreteMeasure(self.theta.copy(), self.y.copy(),
                               self.weights.copy(), tag, self.label)

    # --- serialization -----------------------------------------------------

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv_str())

    def to_csv_str(self) -> str:
        buf = io.StringIO()
        buf.write(f"# anokat measure tag={self.tag.value} label={self.label}\n")
        buf.write("theta,y,weight\n")
        for t, h, w in zip(self.theta, self.y, self.weights):
            buf.write(f"{float(t)!r},{float(h)!r},{float(w)!r}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path: str | Path) -> "DiscreteMeasure":
        return cls.from_csv_str(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def from_csv_str(cls, text: str) -> "DiscreteMeasure":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ValueError("missing measure header comment")
        head = lines[0].lstrip("# ").strip()
        fields = dict(part.split("=", 1) for part in head.split()
                      if "=" in part)
        tag = SurfaceTag.parse(fields.get("tag", "cylinder"))
        label = fields.get("label", "")
        if len(lines) < 2 or lines[1].strip() != "theta,y,weight":
            raise ValueError("missing theta,y,weight column header")
        rows = [ln.split(",") for ln in lines[2:] if ln.strip()]
        data = np.array([[float(a), float(b), float(c)] for a, b, c in rows])
        return cls(data[:, 0], data[:, 1], data[:, 2], tag, label)


def sample_mu_y(y: float, m: int, tag: SurfaceTag) -> DiscreteMeasure:
    """Stratified m-atom discretization of the longitude measure at height y:
    atoms at theta = (j + 1/2)/m, equal weights."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if not -1.0 <= y <= 1.0:
        raise ValueError("y outside [-1, 1]")
    theta = (np.arange(m) + 0.5) / m
    return DiscreteMeasure(theta, np.full(m, float(y)), np.full(m, 1.0 / m),
                           tag, label=f"mu_y(y={y})")


def sample_leb(m_theta: int, m_y: int, tag: SurfaceTag) -> DiscreteMeasure:
    """Stratified grid discretization of the uniform measure: midpoints of an
    m_theta x m_y partition of the chart, equal weights.  Uniform in
    (theta, y) is the invariant normalization on all three surfaces."""
    if m_theta < 1 or m_y < 1:
        raise ValueError("grid counts must be >= 1")
    t = (np.arange(m_theta) + 0.5) / m_theta
    h = -1.0 + 2.0 * (np.arange(m_y) + 0.5) / m_y
    tt, hh = np.meshgrid(t, h, indexing="ij")
    m = m_theta * m_y
    return DiscreteMeasure(tt.ravel(), hh.ravel(), np.full(m, 1.0 / m),
                           tag, label=f"leb({m_theta}x{m_y})")


def mixture(components: list[tuple[DiscreteMeasure, float]],
            label: str = "") -> DiscreteMeasure:
    """Convex combination as atom concatenation; zero-weight parts dropped."""
    kept = [(mu, w) for mu, w in components if w > 0.0]
    if not kept:
        raise ValueError("mixture needs at least one positive weight")
    tag = kept[0][0].tag
    for mu, _ in kept:
        if mu.tag is not tag:
            raise ValueError("mixture components must share a surface tag")
    theta = np.concatenate([mu.theta for mu, _ in kept])
    y = np.concatenate([mu.y for mu, _ in kept])
    weights = np.concatenate([mu.weights * w for mu, w in kept])
    weights = weights / weights.sum()
    return DiscreteMeasure(theta, y, weights, tag, label)
