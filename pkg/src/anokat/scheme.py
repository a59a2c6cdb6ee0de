"""Staged construction of conjugated rotations with a certified ledger.

One stage does four things, in order.  It halves an accuracy target until a
freshly built box-exchange layer brings every pushed longitude circle within
half the current accuracy of the reference hull.  It composes that layer
onto the conjugacy.  It then perturbs the rotation number by 1/(M*q_n),
doubling the integer multiplier M until four admission checks hold: the
reduced denominator more than doubles (exact rational arithmetic), the
sampled uniform gap between perturbed and unperturbed maps stays below half
the current accuracy (collar points excluded, seam-straddling samples
re-drawn and counted), partial orbits of the two maps agree in transport
distance, and the orbit-equidistribution defect of the perturbed map is at
most twice the new accuracy plus recorded slack.  Finally it emits a report
whose inequalities are recomputed from raw numbers whenever the ledger is
read.

Everything is a deterministic function of the config and the stage index,
which is what makes checkpoint resume reproduce the ledger byte for byte.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from anokat.bicurve import Bicurve, Region
from anokat.config import RunConfig
from anokat.dynamics import (AreaMap, BoxShuffle, Compose, empirical_measure,
                             map_from_json_dict, pushforward,
                             rotation_offsets)
from anokat.ot import (HullCoordinates, hull_search, wasserstein1_entropic,
                       wasserstein1_exact)
from anokat.surface import (DiscreteMeasure, SurfaceTag, embed, mixture,
                            sample_leb, sample_mu_y, surface_diameter,
                            theta_arc_dist)

__all__ = [
    "References",
    "build_references",
    "AccuracyEstimate",
    "estimate_accuracy",
    "C0Report",
    "sampled_c0_gap",
    "OrbitReport",
    "orbit_agreement",
    "DeltaMergReport",
    "estimate_delta_merg",
    "StageReport",
    "SchemeState",
    "initial_state",
    "advance_stage",
    "RunResult",
    "run_scheme",
    "resume_scheme",
    "load_checkpoint",
    "write_checkpoint",
    "ledger_bytes",
    "csv_bytes",
]

CHECKPOINT_FORMAT = "anokat-checkpoint-v1"
LEDGER_FORMAT = "anokat-ledger-v1"
_EPS_FLOOR = 1e-9


def _point_dists(t1: np.ndarray, y1: np.ndarray,
                 t2: np.ndarray, y2: np.ndarray, tag: SurfaceTag) -> np.ndarray:
    """Elementwise surface distance between two equally-long point lists."""
    t1 = np.asarray(t1, dtype=np.float64)
    y1 = np.asarray(y1, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    y2 = np.asarray(y2, dtype=np.float64)
    if tag is SurfaceTag.CYLINDER:
        return np.hypot(theta_arc_dist(t1, t2), y1 - y2)
    e1 = embed(t1, np.clip(y1, -1.0, 1.0), tag)
    e2 = embed(t2, np.clip(y2, -1.0, 1.0), tag)
    return np.linalg.norm(e1 - e2, axis=-1)


def _w1(mu: DiscreteMeasure, nu: DiscreteMeasure,
        config: RunConfig) -> float:
    """Exact transport distance, optionally falling back to an entropic
    upper bound when the instance exceeds the configured size cap."""
    try:
        return wasserstein1_exact(mu, nu, max_entries=config.max_entries)[0]
    except ValueError:
        if not config.entropic_fallback:
            raise
        reg = 1e-3 * surface_diameter(mu.tag)
        return wasserstein1_entropic(mu, nu, reg)[0]


# ----------------------------------------------------------------- references

@dataclass(frozen=True)
class References:
    """Hull reference triple plus its one-off refinement slack.

    ``hull_slack`` bounds the transport distance between any hull mixture at
    the working discretization and the same mixture at doubled resolution;
    it is the additive allowance every hull-distance estimate carries for
    the references being finite samples of continuous measures.

    The ``*_pick`` members are coarse stand-ins used only while searching
    for good mixture weights; reported distances always come from one exact
    solve against the full-resolution triple.
    """

    leb: DiscreteMeasure
    circle_top: DiscreteMeasure
    circle_bottom: DiscreteMeasure
    hull_slack: float
    leb_pick: DiscreteMeasure
    top_pick: DiscreteMeasure
    bottom_pick: DiscreteMeasure


def build_references(tag: SurfaceTag, config: RunConfig) -> References:
    leb = sample_leb(config.leb_theta, config.leb_y, tag)
    m_top = 1 if tag.collapses_top else config.circle_atoms
    m_bot = 1 if tag.collapses_bottom else config.circle_atoms
    top = sample_mu_y(1.0, m_top, tag)
    bot = sample_mu_y(-1.0, m_bot, tag)

    leb_fine = sample_leb(2 * config.leb_theta, 2 * config.leb_y, tag)
    slack = wasserstein1_exact(leb, leb_fine,
                               max_entries=config.slack_entries)[0]
    for circ, m, y in ((top, m_top, 1.0), (bot, m_bot, -1.0)):
        if m == 1:
            continue  # collapsed end: the reference is exact, no slack
        fine = sample_mu_y(y, 2 * m, tag)
        slack = max(slack, wasserstein1_exact(
            circ, fine, max_entries=config.slack_entries)[0])

    leb_pick = leb if leb.weights.size <= 256 else _coarse_copy(leb, 256)
    top_pick = top if m_top <= 32 else sample_mu_y(1.0, 32, tag)
    bot_pick = bot if m_bot <= 32 else sample_mu_y(-1.0, 32, tag)
    return References(leb, top, bot, slack, leb_pick, top_pick, bot_pick)


_COARSE_PICK_ATOMS = 640


def _coarse_copy(mu: DiscreteMeasure, atoms: int = _COARSE_PICK_ATOMS
                 ) -> DiscreteMeasure:
    """Mass-preserving binning of a measure onto bin centroids.

    Only used to pick hull-mixture weights cheaply; reported distances are
    always recomputed on the full measure.
    """
    side = max(2, int(math.sqrt(atoms)))
    it = np.minimum((mu.theta % 1.0 * side).astype(np.int64), side - 1)
    iy = np.minimum(((mu.y + 1.0) * 0.5 * side).astype(np.int64), side - 1)
    flat = it * side + iy
    w = np.bincount(flat, weights=mu.weights, minlength=side * side)
    st = np.bincount(flat, weights=mu.weights * mu.theta,
                     minlength=side * side)
    sy = np.bincount(flat, weights=mu.weights * mu.y, minlength=side * side)
    keep = w > 0
    wk = w[keep]
    return DiscreteMeasure(st[keep] / wk, sy[keep] / wk, wk, mu.tag,
                           mu.label)


def _hull_dist(mu: DiscreteMeasure, refs: References, config: RunConfig,
               start: HullCoordinates | None):
    """Upper bound on the hull distance plus the coordinates that won.

    The weight search runs on binned copies of both sides (the objective's
    minimizer moves little under binning), then the value is one exact
    transport solve of the full measure against the full-resolution winning
    mixture -- a true distance to a hull member, hence a sound upper bound.
    """
    rough = mu
    if mu.weights.size > _COARSE_PICK_ATOMS + _COARSE_PICK_ATOMS // 4:
        rough = _coarse_copy(mu)
    res = hull_search(rough, refs.leb_pick, refs.top_pick, refs.bottom_pick,
                      max_entries=config.max_entries, start=start)
    mix = mixture([(refs.leb, res.coords.a),
                   (refs.circle_top, res.coords.b),
                   (refs.circle_bottom, res.coords.c)])
    value = wasserstein1_exact(mu, mix, max_entries=config.max_entries)[0]
    return value, res.coords


# ------------------------------------------------------------------- accuracy

@dataclass(frozen=True)
class AccuracyEstimate:
    """Sup over sampled heights of hull distance of the pushed circle.

    ``slack`` is the recorded quantization allowance: the reference
    refinement slack plus the measured distance between the pushed circle at
    the working atom count and at double the atom count, taken at the
    maximizing height.
    """

    value: float
    argmax_y: float
    slack: float
    atoms: int
    ys: np.ndarray
    dists: np.ndarray

    def to_rows(self) -> list[tuple[float, float]]:
        return [(float(a), float(b)) for a, b in zip(self.ys, self.dists)]


def _height_grid(config: RunConfig) -> np.ndarray:
    """Uniform height midpoints plus geometric clustering toward the ends."""
    base = [-1.0 + 2.0 * (i + 0.5) / config.y_grid
            for i in range(config.y_grid)]
    for k in range(1, config.y_cluster_depth + 1):
        off = 1.0 - 0.5 ** k
        base.extend((off, -off))
    return np.array(sorted(set(base)))


def _is_prime(n: int) -> bool:
    if n < 2:
        return False
    if n in (2, 3):
        return True
    if n % 2 == 0 or n % 3 == 0:
        return False
    d = 5
    while d * d <= n:
        if n % d == 0 or n % (d + 2) == 0:
            return False
        d += 6
    return True


def _prime_near(n: int, limit: int) -> int:
    """A prime >= n when one fits under ``limit``, else the largest <= n."""
    for cand in range(max(2, n), limit + 1):
        if _is_prime(cand):
            return cand
    for cand in range(min(n, limit), 1, -1):
        if _is_prime(cand):
            return cand
    return 2


_GOLDEN = 0.6180339887498949


def _circle_atom_count(config: RunConfig, refs: References,
                       stretch: int, fresh_periods: int = 0) -> int:
    """Atoms per pushed circle, scaled with the conjugacy's stretching.

    A composition of exchange layers maps a longitude circle to a curve
    roughly ``stretch`` times longer (product of the layers' column counts),
    so a fixed atom count would under-resolve late stages and inflate the
    estimate with pure quantization.  The count is clipped so every hull
    evaluation stays under the transport size cap.

    The count must also avoid arithmetic alignment with the newest layer's
    column period: with m atoms against P periods, atom i sits at offset
    {i*P/m} inside its period, and when the increment {P/m} is near a small
    rational the offsets crawl, feeding each depth level long contiguous
    source arcs instead of an interleaved comb (measured to inflate the
    estimate by ~0.04 at m within 1% of P).  Choosing a prime m with {P/m}
    near the golden section makes atom index vs. period offset a Fibonacci
    lattice, the best-spread rank-1 sampling available.
    """
    hull_atoms = (refs.leb.weights.size + refs.circle_top.weights.size
                  + refs.circle_bottom.weights.size)
    want = max(config.mu_atoms, config.atoms_per_stretch * stretch)
    cap = max(2, min(config.mu_atoms_max, config.max_entries // hull_atoms))
    want = min(want, cap)
    if fresh_periods <= 0 or fresh_periods <= want // 4:
        # dense sampling: offsets advance by < 1/4 period per atom and sweep
        # every period's cell on their own, so any prime count works
        return _prime_near(want, cap)
    k_min = max(0, math.ceil(fresh_periods / cap - _GOLDEN))
    k_want = max(0, round(fresh_periods / want - _GOLDEN))
    k = max(k_min, k_want)
    target = max(16, round(fresh_periods / (k + _GOLDEN)))
    best, best_err = target, math.inf
    for off in range(0, 4 * target):
        for cand in (target + off, target - off):
            if not (16 <= cand <= cap) or not _is_prime(cand):
                continue
            frac = (fresh_periods % cand) / cand
            err = min(abs(frac - _GOLDEN), abs(frac - (1.0 - _GOLDEN)))
            if err < best_err:
                best, best_err = cand, err
            if err < 0.03:
                return cand
        if off > 200 and best_err < 0.12:
            break
    return best


def _pushed_refinement_slack(h: AreaMap, y: float, m: int,
                             tag: SurfaceTag) -> float:
    """Upper bound on W1 between the pushed m- and 2m-atom circle samples.

    Uses the parent/child coupling of the nested samples (each m-grid atom
    owns the two 2m-grid atoms inside its arc), so one vectorized push of
    both grids bounds the refinement distance without a transport solve.
    """
    parents = (np.arange(m, dtype=np.float64) + 0.5) / m
    children = (np.arange(2 * m, dtype=np.float64) + 0.5) / (2 * m)
    pt, py = h.eval_many(np.repeat(parents, 2) % 1.0,
                         np.full(2 * m, float(y)))
    ct, cy = h.eval_many(children % 1.0, np.full(2 * m, float(y)))
    return float(np.mean(_point_dists(pt, py, ct, cy, tag)))


def estimate_accuracy(h: AreaMap, tag: SurfaceTag, config: RunConfig,
                      refs: References, stretch: int = 1,
                      fresh_periods: int = 0) -> AccuracyEstimate:
    """How far the conjugated circle family sits from the reference hull.

    The first height runs the certified coarse-grid hull search; subsequent
    heights warm-start from the previous optimum (warm values stay true
    upper bounds, so the sup is conservative).  ``stretch`` scales the atom
    count with the conjugacy's expansion and ``fresh_periods`` keeps it off
    the newest layer's period arithmetic, see ``_circle_atom_count``.
    """
    m = _circle_atom_count(config, refs, stretch, fresh_periods)
    ys = _height_grid(config)
    dists = np.empty(ys.size)
    coords: HullCoordinates | None = None
    for i, yv in enumerate(ys):
        mu = sample_mu_y(float(yv), m, tag)
        nu = pushforward(h, mu)
        dists[i], coords = _hull_dist(nu, refs, config, coords)
    arg = int(np.argmax(dists))
    y_star = float(ys[arg])
    slack = refs.hull_slack + _pushed_refinement_slack(h, y_star, m, tag)
    return AccuracyEstimate(float(dists[arg]), y_star, float(slack), m,
                            ys, dists)


# ----------------------------------------------------------- sampled sup gap

@dataclass(frozen=True)
class C0Report:
    gap: float
    straddle_fraction: float
    excluded_fraction: float
    n_points: int


def sampled_c0_gap(h: AreaMap, alpha: Fraction, alpha_hat: Fraction,
                   collar: Bicurve, tag: SurfaceTag, config: RunConfig,
                   rng: np.random.Generator) -> C0Report:
    """Sampled sup distance between the two conjugated rotations.

    The sup runs over the surface minus the fresh layer's oscillation
    collars: stratified samples classified into a collar are excluded (and
    counted).  Both maps share the conjugacy, so each sample costs one
    inverse pull and two forward pushes at inner angles differing by the
    rotation offset.  A sample whose two forward piece paths differ in any
    layer straddles a seam, where the pointwise gap is an artifact of the
    exchange discontinuity rather than of the rotation offset; such samples
    are re-drawn by deterministic jitter and the replaced fraction is
    reported so the caller can cap it.
    """
    side = int(math.ceil(math.sqrt(config.c0_samples)))
    n_total = side * side
    ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    theta = ((ii.ravel() + rng.random(n_total)) / side) % 1.0
    yy = np.clip(-1.0 + 2.0 * (jj.ravel() + rng.random(n_total)) / side,
                 -1.0, 1.0)

    d_off = float(alpha_hat - alpha)
    a_float = float(alpha)

    def probe(th: np.ndarray, yv: np.ndarray):
        """(gap, collar mask, straddle mask) for a batch of sample points."""
        band = collar.classify(th, yv) == Region.BAND
        wt, wy, _ = h.eval_inv_with_pieces(th, yv)
        ft, fy, ids = h.eval_with_pieces((wt + a_float) % 1.0, wy)
        gt, gy, ids_hat = h.eval_with_pieces((wt + a_float + d_off) % 1.0, wy)
        stag = np.any(ids != ids_hat, axis=1)
        return _point_dists(ft, fy, gt, gy, tag), band, stag

    gaps, band0, st0 = probe(theta, yy)
    keep = ~band0
    excluded = int(band0.sum())
    pending = st0 & keep
    straddled = pending.copy()

    cell_t = 1.0 / side
    cell_y = 2.0 / side
    for _try in range(config.c0_jitter_tries):
        if not pending.any():
            break
        idx = np.flatnonzero(pending)
        th2 = (theta[idx] + (rng.random(idx.size) - 0.5) * cell_t) % 1.0
        y2 = np.clip(yy[idx] + (rng.random(idx.size) - 0.5) * cell_y,
                     -1.0, 1.0)
        g2, band2, st2 = probe(th2, y2)
        ok = ~band2 & ~st2
        gaps[idx[ok]] = g2[ok]
        keep[idx[band2]] = False   # collar wins over straddle accounting
        excluded += int(band2.sum())
        pending[idx[ok | band2]] = False
    # samples still straddling after every retry are dropped but counted
    keep &= ~pending

    n_used = int(keep.sum())
    gap = float(gaps[keep].max()) if n_used else 0.0
    frac = float(straddled.sum()) / max(1, n_total - int(band0.sum()))
    return C0Report(gap, frac, excluded / n_total, n_used)


# ------------------------------------------------------------ orbit agreement

@dataclass(frozen=True)
class OrbitReport:
    max_dev: float
    n_transport_solves: int
    argmax_k: int


def _iterate_counts(q: int, budget: int) -> np.ndarray:
    if q <= budget:
        return np.arange(1, q + 1, dtype=np.int64)
    ks = np.unique(np.rint(np.geomspace(1, q, budget)).astype(np.int64))
    ks[-1] = q
    return np.unique(ks)


def orbit_agreement(h: AreaMap, alpha: Fraction, alpha_hat: Fraction,
                    q: int, tag: SurfaceTag, config: RunConfig,
                    rng: np.random.Generator, threshold: float) -> OrbitReport:
    """Worst transport distance between matched partial orbits, sampled.

    For each sampled basepoint the identity pairing of iterates gives a free
    upper bound on the orbit-measure distance; only iterate counts where
    that bound exceeds the threshold pay for an exact transport solve.
    Long orbits are subsampled by an integer stride (identically on both
    sides, so matched iterates still correspond).
    """
    nb = config.orbit_basepoints
    perm = rng.permutation(nb)
    thetas = ((perm + rng.random(nb)) / nb) % 1.0
    ys = -1.0 + 2.0 * (np.arange(nb) + rng.random(nb)) / nb
    ks = _iterate_counts(q, config.orbit_check_count)
    kmax = int(ks[-1])
    stride = max(1, int(math.ceil(kmax / config.orbit_eval_cap)))
    js = np.arange(0, kmax, stride, dtype=np.int64)
    offs = rotation_offsets(alpha, js.size, stride)
    offs_hat = rotation_offsets(alpha_hat, js.size, stride)
    # how many kept iterates fall below each sampled count
    counts = np.searchsorted(js, ks, side="left")
    counts = np.maximum(counts, 1)

    worst = 0.0
    worst_k = int(ks[0])
    solves = 0
    for bt, by in zip(thetas, ys):
        wt, wy = h.eval_inv_point(float(bt), float(by))
        ft, fy = h.eval_many((wt + offs) % 1.0, np.full(js.size, wy))
        gt, gy = h.eval_many((wt + offs_hat) % 1.0, np.full(js.size, wy))
        pair = _point_dists(ft, fy, gt, gy, tag)
        cum = np.cumsum(pair)
        for k, c in zip(ks, counts):
            bound = cum[c - 1] / c
            if bound > threshold:
                # pairing too pessimistic: solve the transport exactly on
                # the kept iterates below k (same subsample both sides)
                sub = max(1, int(math.ceil(c / config.orbit_atoms)))
                sel = np.arange(0, c, sub)
                w = np.full(sel.size, 1.0 / sel.size)
                mu = DiscreteMeasure(ft[sel], np.clip(fy[sel], -1, 1), w, tag)
                nu = DiscreteMeasure(gt[sel], np.clip(gy[sel], -1, 1), w, tag)
                bound = _w1(mu, nu, config)
                solves += 1
            if bound > worst:
                worst, worst_k = float(bound), int(k)
    return OrbitReport(worst, solves, worst_k)


# -------------------------------------------------------- orbit-defect report

@dataclass(frozen=True)
class DeltaMergReport:
    """Equidistribution defect of full orbits against the reference hull."""

    value: float
    slack: float
    argmax_theta: float
    argmax_y: float
    stride: int


def _golden_orbit_step(alpha: Fraction, q_orbit: int, count: int) -> int:
    """Index step whose kept orbit points advance by ~the golden section.

    Near-golden position increments cannot lock onto any layer's column
    period, so a subsample of ``count`` points stays spread through every
    scale of the conjugacy.  A divisor-structured stride, by contrast, can
    land every kept point at the same offset inside the newest layer's
    cells, silently erasing that layer from the estimate.
    """
    if count >= q_orbit:
        return 1
    p = alpha.numerator % alpha.denominator
    if alpha.denominator != q_orbit or math.gcd(p, q_orbit) != 1:
        return max(1, q_orbit // count)
    base = round(q_orbit * 0.6180339887498949949)
    g = 1
    for d in range(q_orbit):
        hit = next((c for c in (base - d, base + d)
                    if 1 <= c < q_orbit and math.gcd(c, q_orbit) == 1), 0)
        if hit:
            g = hit
            break
    return g * pow(p, -1, q_orbit) % q_orbit


def estimate_delta_merg(h: AreaMap, alpha: Fraction, q_orbit: int,
                        tag: SurfaceTag, config: RunConfig,
                        refs: References,
                        grid: tuple[int, int] | None = None
                        ) -> DeltaMergReport:
    """Sup over a basepoint grid of hull distance of the length-q orbit.

    Every ergodic average of the conjugated rational rotation is the push of
    a uniform q-point rotation orbit, so the grid sup converges to the true
    defect as the grid refines.  Orbits longer than ``orbit_atoms`` keep
    only a golden-stepped subsample of that many points; the proxy error is
    then measured (not assumed) by one transport solve between the subsample
    and one twice its size at the worst basepoint, and added to the
    reference slack.
    """
    if q_orbit < 1:
        raise ValueError("orbit length must be >= 1")
    g_theta, g_y = grid if grid is not None else (config.merg_theta,
                                                  config.merg_y)
    count = min(q_orbit, config.orbit_atoms)
    step = _golden_orbit_step(alpha, q_orbit, count)
    thetas = (np.arange(g_theta) + 0.5) / g_theta
    heights = -1.0 + 2.0 * (np.arange(g_y) + 0.5) / g_y

    worst = -1.0
    arg = (0.0, 0.0)
    coords: HullCoordinates | None = None
    for yv in heights:
        for tv in thetas:
            e = empirical_measure(h, alpha, (float(tv), float(yv)),
                                  q_orbit, tag, stride=step, count=count)
            d, coords = _hull_dist(e, refs, config, coords)
            if d > worst:
                worst, arg = float(d), (float(tv), float(yv))

    slack = refs.hull_slack
    if count < q_orbit:
        count2 = min(q_orbit, 2 * count)
        step2 = _golden_orbit_step(alpha, q_orbit, count2)
        e1 = empirical_measure(h, alpha, arg, q_orbit, tag,
                               stride=step, count=count)
        e2 = empirical_measure(h, alpha, arg, q_orbit, tag,
                               stride=step2, count=count2)
        slack += wasserstein1_exact(e1, e2,
                                    max_entries=config.slack_entries)[0]
    return DeltaMergReport(worst, float(slack), arg[0], arg[1], step)


# --------------------------------------------------------------- stage report

_UNSET = -1.0  # sentinel for checks that were never reached; keeps entries finite


@dataclass(frozen=True)
class StageReport:
    stage: int
    accepted: bool
    rejected_condition: str
    eps_before: float
    eps_after: float
    eps_slack: float
    q_before: int
    q_n: int
    alpha_old_p: int
    alpha_old_q: int
    alpha_p: int
    alpha_q: int
    m_mult: int
    n: int
    delta: float
    delta_prime: float
    sign: int
    c0_gap: float
    straddle_fraction: float
    excluded_fraction: float
    orbit_dev: float
    delta_merg: float
    delta_merg_slack: float
    attempts: int
    grids: dict[str, int]
    checks: dict[str, bool]
    accuracy_rows: tuple[tuple[float, float], ...] = ()

    def to_json_dict(self, include_rows: bool = False) -> dict:
        obj = {
            "stage": self.stage,
            "accepted": self.accepted,
            "rejected_condition": self.rejected_condition,
            "eps_before": self.eps_before,
            "eps_after": self.eps_after,
            "eps_slack": self.eps_slack,
            "q_before": self.q_before,
            "q_n": self.q_n,
            "alpha_old": {"p": self.alpha_old_p, "q": self.alpha_old_q},
            "alpha_new": {"p": self.alpha_p, "q": self.alpha_q},
            "m_mult": self.m_mult,
            "n": self.n,
            "delta": self.delta,
            "delta_prime": self.delta_prime,
            "sign": self.sign,
            "c0_gap": self.c0_gap,
            "straddle_fraction": self.straddle_fraction,
            "excluded_fraction": self.excluded_fraction,
            "orbit_dev": self.orbit_dev,
            "delta_merg": self.delta_merg,
            "delta_merg_slack": self.delta_merg_slack,
            "attempts": self.attempts,
            "grids": dict(sorted(self.grids.items())),
            "checks": dict(sorted(self.checks.items())),
        }
        if include_rows:
            obj["accuracy_rows"] = [list(r) for r in self.accuracy_rows]
        return obj

    @classmethod
    def from_json_dict(cls, obj: dict) -> "StageReport":
        rows = tuple((float(a), float(b))
                     for a, b in obj.get("accuracy_rows", []))
        return cls(
            stage=int(obj["stage"]), accepted=bool(obj["accepted"]),
            rejected_condition=str(obj["rejected_condition"]),
            eps_before=float(obj["eps_before"]),
            eps_after=float(obj["eps_after"]),
            eps_slack=float(obj["eps_slack"]),
            q_before=int(obj["q_before"]), q_n=int(obj["q_n"]),
            alpha_old_p=int(obj["alpha_old"]["p"]),
            alpha_old_q=int(obj["alpha_old"]["q"]),
            alpha_p=int(obj["alpha_new"]["p"]),
            alpha_q=int(obj["alpha_new"]["q"]),
            m_mult=int(obj["m_mult"]), n=int(obj["n"]),
            delta=float(obj["delta"]),
            delta_prime=float(obj["delta_prime"]), sign=int(obj["sign"]),
            c0_gap=float(obj["c0_gap"]),
            straddle_fraction=float(obj["straddle_fraction"]),
            excluded_fraction=float(obj["excluded_fraction"]),
            orbit_dev=float(obj["orbit_dev"]),
            delta_merg=float(obj["delta_merg"]),
            delta_merg_slack=float(obj["delta_merg_slack"]),
            attempts=int(obj["attempts"]),
            grids={k: int(v) for k, v in obj["grids"].items()},
            checks={k: bool(v) for k, v in obj["checks"].items()},
            accuracy_rows=rows)

    def recomputed_checks(self) -> dict[str, bool]:
        """Re-derive every claimed inequality from the raw numbers."""
        return {
            "eps_halved": self.eps_after <= self.eps_before / 2.0,
            "c0": self.c0_gap <= self.eps_before / 2.0,
            "straddle": 0.0 <= self.straddle_fraction <= 1.0,
            "orbit": self.orbit_dev <= self.eps_before / 2.0,
            "merg": self.delta_merg
            <= 2.0 * self.eps_after + self.delta_merg_slack,
            "q_growth": self.q_n > 2 * self.q_before,
        }


# ----------------------------------------------------------------- run state

@dataclass
class SchemeState:
    tag: SurfaceTag
    alpha: Fraction
    layers: tuple[BoxShuffle, ...]
    eps: float
    eps0: float
    stage: int
    reports: list[StageReport] = field(default_factory=list)

    @property
    def q(self) -> int:
        return self.alpha.denominator

    def conjugacy(self) -> Compose:
        return Compose(self.layers)

    def to_json_dict(self) -> dict:
        return {
            "surface": self.tag.value,
            "alpha": {"p": self.alpha.numerator, "q": self.alpha.denominator},
            "layers": [g.to_json_dict() for g in self.layers],
            "eps": self.eps,
            "eps0": self.eps0,
            "stage": self.stage,
            "reports": [r.to_json_dict(include_rows=True)
                        for r in self.reports],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "SchemeState":
        layers = tuple(map_from_json_dict(d) for d in obj["layers"])
        if not all(isinstance(g, BoxShuffle) for g in layers):
            raise ValueError("checkpoint layers must all be box-exchange maps")
        return cls(tag=SurfaceTag.parse(obj["surface"]),
                   alpha=Fraction(int(obj["alpha"]["p"]),
                                  int(obj["alpha"]["q"])),
                   layers=layers,  # type: ignore[arg-type]
                   eps=float(obj["eps"]), eps0=float(obj["eps0"]),
                   stage=int(obj["stage"]),
                   reports=[StageReport.from_json_dict(r)
                            for r in obj["reports"]])


def initial_state(config: RunConfig, refs: References) -> SchemeState:
    tag = config.tag
    est = estimate_accuracy(Compose(()), tag, config, refs)
    return SchemeState(tag=tag, alpha=Fraction(0, 1), layers=(),
                       eps=est.value, eps0=est.value, stage=0)


def _preferred_sign(stage: int, alpha: Fraction, d: Fraction) -> int:
    """Perturbation direction: alternate by stage, stay inside (0, 1)."""
    sign = 1 if stage % 2 == 1 else -1
    if not Fraction(0) < alpha + sign * d < Fraction(1):
        sign = -sign
    return sign


# ------------------------------------------------------------- stage advance

def advance_stage(state: SchemeState, config: RunConfig,
                  refs: References,
                  log: Callable[[str], None] | None = None
                  ) -> tuple[SchemeState | None, StageReport]:
    """Search for an admissible next stage; never weakens a failed check.

    Target-halving runs first and fixes the fresh layer; the multiplier
    search then doubles M until the four admission checks pass, cheapest
    first.  Returns ``(None, report)`` with the violated condition named
    when a budget is exhausted.
    """
    def say(msg: str) -> None:
        if log is not None:
            log(msg)

    stage = state.stage + 1
    tag = state.tag
    eps_n = state.eps
    q_n = state.q
    alpha = state.alpha
    attempts = 0
    grids = {"y_grid": config.y_grid, "mu_atoms": config.mu_atoms,
             "c0_samples": config.c0_samples,
             "orbit_basepoints": config.orbit_basepoints,
             "merg_theta": config.merg_theta, "merg_y": config.merg_y,
             "orbit_atoms": config.orbit_atoms}

    def rejection(cond: str, **kw) -> StageReport:
        base = dict(stage=stage, accepted=False, rejected_condition=cond,
                    eps_before=eps_n, eps_after=_UNSET, eps_slack=_UNSET,
                    q_before=q_n, q_n=q_n, alpha_old_p=alpha.numerator,
                    alpha_old_q=q_n, alpha_p=alpha.numerator, alpha_q=q_n,
                    m_mult=0, n=0, delta=_UNSET, delta_prime=_UNSET,
                    sign=0, c0_gap=_UNSET, straddle_fraction=_UNSET,
                    excluded_fraction=_UNSET, orbit_dev=_UNSET,
                    delta_merg=_UNSET, delta_merg_slack=_UNSET,
                    attempts=attempts, grids=grids,
                    checks={}, accuracy_rows=())
        base.update(kw)
        return StageReport(**base)

    # -- (1)+(2): halve the accuracy target until the fresh layer certifies
    base_stretch = 1
    for layer in state.layers:
        base_stretch *= layer.bicurve.n
    # starting coarse keeps the accepted estimate just under its target,
    # which leaves the next stage the most room above the measurement floor
    # (targets halve every stage; the floor does not)
    eps_prime = 0.5
    acc = None
    bc = None
    g = None
    h_new = None
    last_n = 0
    while eps_prime >= _EPS_FLOOR:
        cand = Bicurve.from_schedule(q_n, eps_prime)
        if cand.n == last_n:
            eps_prime /= 2.0
            continue
        last_n = cand.n
        attempts += 1
        bc = cand
        g = BoxShuffle(bc)
        h_new = Compose((*state.layers, g))
        acc = estimate_accuracy(h_new, tag, config, refs,
                                stretch=base_stretch * bc.n,
                                fresh_periods=q_n * bc.n)
        say(f"stage {stage} attempt {attempts}: eps_prime={eps_prime:.6g} "
            f"n={bc.n} -> eps_new={acc.value:.6g} (need <= {eps_n / 2:.6g})")
        if acc.value <= eps_n / 2.0:
            break
        eps_prime /= 2.0
    else:
        return None, rejection("accuracy")
    assert acc is not None and bc is not None and g is not None \
        and h_new is not None
    grids = dict(grids, mu_atoms=acc.atoms)

    # -- (4): grow the rotation-offset denominator until all checks hold
    last_fail = "q_growth"
    m_mult = 1
    m_index = 0
    c0 = None
    orb = None
    merg = None
    while m_mult <= config.m_max:
        attempts += 1
        m_index += 1
        rng = np.random.default_rng([config.seed, stage, m_index])
        d = Fraction(1, m_mult * q_n)
        sign = _preferred_sign(stage, alpha, d)
        alpha_hat = alpha + sign * d
        q_hat = alpha_hat.denominator
        checks = {"eps_halved": True, "q_growth": q_hat > 2 * q_n,
                  "c0": False, "straddle": False, "orbit": False,
                  "merg": False}
        say(f"stage {stage} attempt {attempts}: M={m_mult} sign={sign:+d} "
            f"alpha_hat={alpha_hat.numerator}/{q_hat}")
        if not checks["q_growth"]:
            last_fail = "q_growth"
            m_mult *= 2
            continue

        c0 = sampled_c0_gap(h_new, alpha, alpha_hat, bc, tag, config, rng)
        checks["c0"] = c0.gap <= eps_n / 2.0
        checks["straddle"] = (c0.straddle_fraction
                              <= config.max_straddle_fraction)
        say(f"  c0_gap={c0.gap:.6g} straddle={c0.straddle_fraction:.4f} "
            f"excluded={c0.excluded_fraction:.4f}")
        if not (checks["c0"] and checks["straddle"]):
            last_fail = "c0" if not checks["c0"] else "straddle"
            m_mult *= 2
            continue

        orb = orbit_agreement(h_new, alpha, alpha_hat, q_n, tag, config,
                              rng, threshold=eps_n / 2.0)
        checks["orbit"] = orb.max_dev <= eps_n / 2.0
        say(f"  orbit_dev={orb.max_dev:.6g} at k={orb.argmax_k} "
            f"(solves={orb.n_transport_solves})")
        if not checks["orbit"]:
            last_fail = "orbit"
            m_mult *= 2
            continue

        merg = estimate_delta_merg(h_new, alpha_hat, q_hat, tag, config,
                                   refs)
        checks["merg"] = merg.value <= 2.0 * acc.value + merg.slack
        say(f"  delta_merg={merg.value:.6g} slack={merg.slack:.6g} "
            f"bound={2.0 * acc.value + merg.slack:.6g}")
        if not checks["merg"]:
            last_fail = "merg"
            m_mult *= 2
            continue

        report = StageReport(
            stage=stage, accepted=True, rejected_condition="",
            eps_before=eps_n, eps_after=acc.value, eps_slack=acc.slack,
            q_before=q_n, q_n=q_hat,
            alpha_old_p=alpha.numerator, alpha_old_q=q_n,
            alpha_p=alpha_hat.numerator, alpha_q=q_hat,
            m_mult=m_mult, n=bc.n, delta=bc.delta,
            delta_prime=bc.delta_prime, sign=sign,
            c0_gap=c0.gap, straddle_fraction=c0.straddle_fraction,
            excluded_fraction=c0.excluded_fraction,
            orbit_dev=orb.max_dev, delta_merg=merg.value,
            delta_merg_slack=merg.slack, attempts=attempts,
            grids=grids, checks=checks,
            accuracy_rows=tuple(acc.to_rows()))
        new_state = SchemeState(
            tag=tag, alpha=alpha_hat, layers=(*state.layers, g),
            eps=acc.value, eps0=state.eps0, stage=stage,
            reports=[*state.reports, report])
        return new_state, report

    return None, rejection(
        last_fail, eps_after=acc.value, eps_slack=acc.slack, n=bc.n,
        delta=bc.delta, delta_prime=bc.delta_prime, m_mult=m_mult // 2,
        c0_gap=c0.gap if c0 else _UNSET,
        straddle_fraction=c0.straddle_fraction if c0 else _UNSET,
        excluded_fraction=c0.excluded_fraction if c0 else _UNSET,
        orbit_dev=orb.max_dev if orb else _UNSET,
        delta_merg=merg.value if merg else _UNSET,
        delta_merg_slack=merg.slack if merg else _UNSET,
        accuracy_rows=tuple(acc.to_rows()))


# --------------------------------------------------------------- persistence

def ledger_bytes(config: RunConfig, state: SchemeState,
                 requested: int) -> bytes:
    """Canonical ledger serialization: sorted keys, repr floats, no clocks.

    ``all_ok`` is recomputed from the raw numbers in each report, never
    copied from the stored check flags.
    """
    ok = state.stage == requested and len(state.reports) == requested
    for r in state.reports:
        ok = ok and r.accepted and all(r.recomputed_checks().values())
    obj = {
        "format": LEDGER_FORMAT,
        "config_hash": config.content_hash(),
        "surface": state.tag.value,
        "seed": config.seed,
        "stages_requested": requested,
        "eps0": state.eps0,
        "stages": [r.to_json_dict() for r in state.reports],
        "all_ok": ok,
    }
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode()


def csv_bytes(state: SchemeState) -> bytes:
    lines = ["stage,eps,c0_gap,delta_merg,q_n"]
    for r in state.reports:
        lines.append(f"{r.stage},{r.eps_after!r},{r.c0_gap!r},"
                     f"{r.delta_merg!r},{r.q_n}")
    return ("\n".join(lines) + "\n").encode()


def accuracy_csv_bytes(report: StageReport) -> bytes:
    lines = ["y,dist_to_hull"]
    for yv, dv in report.accuracy_rows:
        lines.append(f"{yv!r},{dv!r}")
    return ("\n".join(lines) + "\n").encode()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_checkpoint(path: Path, config: RunConfig,
                     state: SchemeState, requested: int) -> None:
    obj = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_json_dict(),
        "config_hash": config.content_hash(),
        "stages_requested": requested,
        "state": state.to_json_dict(),
    }
    _atomic_write(path, (json.dumps(obj, sort_keys=True, indent=2)
                         + "\n").encode())


def load_checkpoint(path: str | Path) -> tuple[RunConfig, SchemeState, int]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a checkpoint file: {path}")
    config = RunConfig.from_json_dict(obj["config"])
    if obj.get("config_hash") != config.content_hash():
        raise ValueError("checkpoint config hash mismatch")
    state = SchemeState.from_json_dict(obj["state"])
    return config, state, int(obj["stages_requested"])


# ----------------------------------------------------------------- run/resume

@dataclass(frozen=True)
class RunResult:
    exit_code: int
    state: SchemeState
    outdir: Path

    @property
    def ledger_path(self) -> Path:
        return self.outdir / "ledger.json"


def _emit(outdir: Path, config: RunConfig, state: SchemeState,
          requested: int) -> None:
    _atomic_write(outdir / "ledger.json",
                  ledger_bytes(config, state, requested))
    _atomic_write(outdir / "stages.csv", csv_bytes(state))
    for r in state.reports:
        if r.accuracy_rows:
            _atomic_write(outdir / f"accuracy_stage_{r.stage:03d}.csv",
                          accuracy_csv_bytes(r))
    write_checkpoint(outdir / f"checkpoint_{state.stage:03d}.json",
                     config, state, requested)


def _drive(config: RunConfig, state: SchemeState, outdir: Path,
           refs: References, echo: Callable[[str], None] | None) -> RunResult:
    requested = config.stages
    logf = (outdir / "run.log").open("a", encoding="utf-8")

    def log(msg: str) -> None:
        logf.write(msg + "\n")
        logf.flush()
        if echo is not None:
            echo(msg)

    try:
        _emit(outdir, config, state, requested)
        while state.stage < requested:
            t0 = time.perf_counter()
            nxt, report = advance_stage(state, config, refs, log=log)
            dt = time.perf_counter() - t0
            if nxt is None:
                state.reports.append(report)
                state.stage = report.stage
                _emit(outdir, config, state, requested)
                log(f"stage {report.stage} REJECTED "
                    f"({report.rejected_condition}) after "
                    f"{report.attempts} attempts ({dt:.1f}s)")
                return RunResult(3, state, outdir)
            state = nxt
            _emit(outdir, config, state, requested)
            log(f"stage {report.stage} accepted: eps={report.eps_after:.6g} "
                f"q={report.q_n} M={report.m_mult} ({dt:.1f}s)")
        return RunResult(0, state, outdir)
    finally:
        logf.close()


def run_scheme(config: RunConfig, outdir: str | Path,
               echo: Callable[[str], None] | None = None) -> RunResult:
    """Fresh run: estimate the base accuracy, then advance stage by stage.

    Writes ``ledger.json``, ``stages.csv``, per-stage accuracy curves,
    ``run.log`` and a numbered checkpoint after every stage.  Exit code 0
    means every requested stage was admitted; 3 means some stage exhausted
    its search budget.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    refs = build_references(config.tag, config)
    state = initial_state(config, refs)
    return _drive(config, state, outdir, refs, echo)


def resume_scheme(checkpoint: str | Path, outdir: str | Path,
                  echo: Callable[[str], None] | None = None) -> RunResult:
    """Continue a checkpointed run; the completed ledger is byte-identical
    to the one an uninterrupted run would have produced."""
    config, state, requested = load_checkpoint(checkpoint)
    if requested != config.stages:
        config = RunConfig.from_json_dict(
            dict(config.to_json_dict(), stages=requested))
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    refs = build_references(config.tag, config)
    return _drive(config, state, outdir, refs, echo)
