"""Named verification suites.

Each suite re-derives a property of the construction through an independent
route (brute-force linear programming, finite differences, direct orbit
iteration, Monte-Carlo region sampling) and compares against the production
code path.  Suites return a :class:`SuiteReport` whose checks carry the
measured value, the bound it must satisfy, and a pass flag; the command-line
wrapper turns ``passed`` into its exit code.

All randomness is drawn from ``numpy.random.default_rng`` seeded per suite,
so reports are reproducible bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from anokat.appendix import appendix_a_suite
from anokat.bicurve import Bicurve
from anokat.config import RunConfig
from anokat.dynamics import BoxShuffle, jacobian_check, pushforward
from anokat.ot import (
    lp_wasserstein1,
    wasserstein1_exact,
    wasserstein1_sparse_exact,
)
from anokat.scheme import _hull_dist, build_references
from anokat.surface import (
    DiscreteMeasure,
    SurfaceTag,
    sample_leb,
    sample_mu_y,
    theta_arc_dist,
)

__all__ = [
    "CheckResult",
    "SuiteReport",
    "ot_oracle_suite",
    "appendix_suite",
    "lemma_finerg_suite",
    "jacobian_suite",
    "SUITES",
]


@dataclass(frozen=True)
class CheckResult:
    """One named inequality: ``value`` must not exceed ``bound``."""

    name: str
    value: float
    bound: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.value <= self.bound

    def to_json_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "bound": self.bound,
                "detail": self.detail, "passed": self.passed}


@dataclass(frozen=True)
class SuiteReport:
    suite: str
    checks: tuple[CheckResult, ...]
    elapsed_s: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            mark = "PASS" if c.passed else "FAIL"
            line = f"[{mark}] {self.suite}/{c.name}: {c.value:.3e} <= {c.bound:.3e}"
            if c.detail:
                line += f"  ({c.detail})"
            out.append(line)
        out.append(f"suite {self.suite}: "
                   f"{'PASS' if self.passed else 'FAIL'} "
                   f"in {self.elapsed_s:.1f}s")
        return out

    def to_json_dict(self) -> dict:
        return {"suite": self.suite,
                "checks": [c.to_json_dict() for c in self.checks],
                "elapsed_s": self.elapsed_s, "passed": self.passed}


# --------------------------------------------------------------- ot oracle

def _tiny_measure(rng: np.random.Generator, max_atoms: int) -> DiscreteMeasure:
    n = int(rng.integers(1, max_atoms + 1))
    w = rng.uniform(0.01, 1.0, n)
    return DiscreteMeasure(rng.uniform(0.0, 1.0, n),
                           rng.uniform(-1.0, 1.0, n),
                           w / w.sum(), SurfaceTag.CYLINDER)


def ot_oracle_suite(seed: int = 0, trials: int = 100,
                    max_atoms: int = 6) -> SuiteReport:
    """Production transport solver against a dense LP over the coupling
    polytope, on instances small enough for the LP to be beyond doubt."""
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, 0x07ac1e])
    worst = 0.0
    arg = -1
    for k in range(trials):
        mu = _tiny_measure(rng, max_atoms)
        nu = _tiny_measure(rng, max_atoms)
        fast, _ = wasserstein1_exact(mu, nu)
        slow = lp_wasserstein1(mu, nu)
        gap = abs(fast - slow)
        if gap > worst:
            worst, arg = gap, k
    checks = (CheckResult("solver_vs_lp", worst, 1e-9,
                          detail=f"{trials} pairs, worst at trial {arg}"),)
    return SuiteReport("ot-oracle", checks, time.perf_counter() - t0)


# --------------------------------------------------------------- appendix

def appendix_suite(seed: int = 0, trials: int = 200) -> SuiteReport:
    """Adapter: run the transport-identity suite and reshape its families
    into per-check rows."""
    t0 = time.perf_counter()
    rep = appendix_a_suite(seed=seed, trials=trials)
    checks = tuple(CheckResult(f.name, f.max_violation, f.tol,
                               detail=f"{f.trials} trials")
                   for f in rep.families)
    return SuiteReport("appendix-a", checks, time.perf_counter() - t0)


# ----------------------------------------------------------- lemma, desk size

def _outer_points(bc: Bicurve, rng: np.random.Generator,
                  count: int) -> tuple[np.ndarray, np.ndarray]:
    """Random points strictly outside both curves' guard bands, i.e. in the
    region the shuffle must leave pointwise fixed.  Margin: one extra band
    halfwidth beyond the band edge."""
    hw = bc.band_halfwidth
    theta = rng.uniform(0.0, 1.0, count)
    v = bc.oscillation(theta)
    top_lo = v + (1.0 - bc.delta) + 2.0 * hw
    room = 1.0 - top_lo
    if np.any(room <= 0.0):
        raise ValueError("no outer region at these parameters")
    y = top_lo + rng.uniform(0.0, 1.0, count) * room
    flip = rng.random(count) < 0.5
    y[flip] = -y[flip]
    return theta, y


def lemma_finerg_suite(q: int = 2, eps: float = 0.3, y_points: int = 64,
                       atoms: int = 512, seed: int = 0) -> SuiteReport:
    """Desk-scale run of the one-step equidistribution lemma.

    A single box shuffle built at the given accuracy must push every
    longitude circle to within ``eps`` (plus the recorded quantization
    slack) of the limit hull, leave the outer region untouched to the bit,
    and commute with the order-``q`` rotation to 1e-12.
    """
    t0 = time.perf_counter()
    tag = SurfaceTag.CYLINDER
    config = RunConfig()
    refs = build_references(tag, config)
    bc = Bicurve.from_schedule(q, eps)
    g = BoxShuffle(bc)

    ys = -1.0 + 2.0 * (np.arange(y_points) + 0.5) / y_points
    worst, worst_y = -1.0, 0.0
    coords = None
    for y in ys:
        mu = sample_mu_y(float(y), atoms, tag)
        push = pushforward(g, mu)
        d, coords = _hull_dist(push, refs, config, coords)
        if d > worst:
            worst, worst_y = float(d), float(y)

    mu1 = pushforward(g, sample_mu_y(worst_y, atoms, tag))
    mu2 = pushforward(g, sample_mu_y(worst_y, 2 * atoms, tag))
    slack = refs.hull_slack + wasserstein1_exact(
        mu1, mu2, max_entries=config.slack_entries)[0]

    rng = np.random.default_rng([seed, 0xf17e])
    ot, oy = _outer_points(bc, rng, 1000)
    gt, gy = g.eval_many(ot, oy)
    moved = max(float(np.max(np.abs(gt - ot))), float(np.max(np.abs(gy - oy))))

    rt = rng.uniform(0.0, 1.0, 10000)
    ry = rng.uniform(-1.0, 1.0, 10000)
    shift = 1.0 / q
    t1, y1 = g.eval_many((rt + shift) % 1.0, ry)
    t2, y2 = g.eval_many(rt, ry)
    t2 = (t2 + shift) % 1.0
    comm = max(float(np.max(theta_arc_dist(t1, t2))),
               float(np.max(np.abs(y1 - y2))))

    checks = (
        CheckResult("hull_sup", worst, eps + slack,
                    detail=f"argmax y={worst_y:.4f}, slack={slack:.4f}"),
        CheckResult("slack_small", slack, 0.05),
        CheckResult("outer_fixed", moved, 0.0, detail="1000 points, bitwise"),
        CheckResult("rotation_commutes", comm, 1e-12,
                    detail="10000 points"),
    )
    return SuiteReport("lemma-finerg", checks, time.perf_counter() - t0)


# ------------------------------------------------------------- unit Jacobian

def _interior_dets(g: BoxShuffle, bc: Bicurve, rng: np.random.Generator,
                   want: int, h: float) -> np.ndarray:
    """Central-difference determinants at ``want`` random points interior to
    the shuffled region (inside the curves, clear of the guard bands), with
    seam-straddling stencils discarded by the checker itself."""
    dets: list[np.ndarray] = []
    got = 0
    hw = bc.band_halfwidth
    for _ in range(64):
        theta = rng.uniform(0.0, 1.0, 4 * want)
        y = rng.uniform(-1.0 + 3 * h, 1.0 - 3 * h, 4 * want)
        v = bc.oscillation(theta)
        inner = ((y < v + (1.0 - bc.delta) - 2 * hw)
                 & (y > v - (1.0 - bc.delta) + 2 * hw))
        rep = jacobian_check(g, theta[inner], y[inner], h=h)
        dets.append(rep.dets[rep.valid])
        got += int(rep.n_valid)
        if got >= want:
            break
    out = np.concatenate(dets)
    if out.size < want:
        raise RuntimeError(f"only {out.size} clean stencils out of {want}")
    return out[:want]


def jacobian_suite(seed: int = 0, points: int = 1000, fd_step: float = 1e-5,
                   q: int = 2, eps: float = 0.3) -> SuiteReport:
    """Area preservation, twice over.

    Pointwise: finite-difference Jacobian determinants of the box shuffle at
    interior points must sit at 1 to 1e-6.  Measure-level: pushing a uniform
    grid forward must stay within the recorded two-sided quantization slack
    of the grid itself (the pushed family's own refinement distance plus the
    plain grid's), at 32x32 and 64x64.
    """
    t0 = time.perf_counter()
    tag = SurfaceTag.CYLINDER
    bc = Bicurve.from_schedule(q, eps)
    g = BoxShuffle(bc)
    rng = np.random.default_rng([seed, 0xde7])

    dets = _interior_dets(g, bc, rng, points, fd_step)
    dev = float(np.max(np.abs(dets - 1.0)))
    checks = [CheckResult("det_deviation", dev, 1e-6,
                          detail=f"{points} interior stencils, h={fd_step:g}")]

    for side in (32, 64):
        leb = sample_leb(side, side, tag)
        leb2 = sample_leb(2 * side, 2 * side, tag)
        push = pushforward(g, leb)
        push2 = pushforward(g, leb2)
        s_base = wasserstein1_sparse_exact(leb, leb2)[0]
        s_push = wasserstein1_sparse_exact(push, push2)[0]
        d = wasserstein1_exact(push, leb, max_entries=20_000_000)[0]
        checks.append(CheckResult(
            f"grid_transport_{side}", d, s_push + s_base,
            detail=f"slack = {s_push:.4f} pushed + {s_base:.4f} grid"))

    return SuiteReport("jacobians", tuple(checks), time.perf_counter() - t0)


SUITES = {
    "ot-oracle": ot_oracle_suite,
    "appendix-a": appendix_suite,
    "lemma-finerg": lemma_finerg_suite,
    "jacobians": jacobian_suite,
}
