"""The oscillating curve pair bounding the twist region.

Two graphs over the longitude coordinate, gamma_plus and gamma_minus, sit
near the top and bottom of the chart; the shuffle map acts between them and
is the identity outside.  The oscillation v(theta) = delta' * cos(2 pi N
theta) has period 1/N with N = q * n^2, so the whole picture is invariant
under the rigid rotation by 1/(q n) and finer.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["Bicurve", "Region", "schedule_n", "schedule_delta",
           "schedule_delta_prime"]


class Region(enum.IntEnum):
    """Chart partition induced by the curve pair and its guard band.

    Every point gets exactly one label for a given (curve pair, kappa):
    BAND wins where it applies, the rest splits by position relative to
    the curves.
    """

    INTERIOR = 0   # strictly between the curves, clear of both bands
    ABOVE = 1      # above the upper curve, clear of its band
    BELOW = 2      # below the lower curve, clear of its band
    BAND = 3       # within the guard band of either curve


def schedule_n(eps: float) -> int:
    """Oscillation multiplicity for a target accuracy: n = max(3, ceil(2 /
    sqrt(eps)))."""
    if not 0.0 < eps:
        raise ValueError("eps must be positive")
    return max(3, math.ceil(2.0 / math.sqrt(eps)))


def schedule_delta(eps: float) -> float:
    return eps / 8.0


def schedule_delta_prime(eps: float) -> float:
    return schedule_delta(eps) / 16.0


@dataclass(frozen=True)
class Bicurve:
    """Curve pair parameters.

    q: rotation denominator the construction must commute with
    n: oscillation multiplicity (also the box-splitting count downstream)
    delta: gap between each curve and the chart boundary, over 8
           (gamma_plus oscillates around 1 - delta)
    delta_prime: oscillation amplitude
    """

    q: int
    n: int
    delta: float
    delta_prime: float

    def __post_init__(self) -> None:
        if self.q < 1 or self.n < 1:
            raise ValueError("q and n must be positive integers")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta outside (0, 1)")
        if not 0.0 < self.delta_prime < self.delta:
            raise ValueError("delta_prime must be in (0, delta)")

    @classmethod
    def from_schedule(cls, q: int, eps: float) -> "Bicurve":
        return cls(q, schedule_n(eps), schedule_delta(eps),
                   schedule_delta_prime(eps))

    @property
    def N(self) -> int:
        """Oscillation count: q * n^2."""
        return self.q * self.n * self.n

    @property
    def kappa(self) -> float:
        """Half-thickness parameter of the guard bands."""
        return self.delta_prime / 16.0

    @property
    def slope_factor(self) -> float:
        """sqrt(1 + max-slope^2): converts curve-normal thickness to the
        vertical proxy used for band membership."""
        s = 2.0 * math.pi * self.N * self.delta_prime
        return math.sqrt(1.0 + s * s)

    @property
    def band_halfwidth(self) -> float:
        """Vertical half-width of the slope-proxy enclosure at the gutter
        scale kappa; the classifier intersects this with the oscillation-slab
        neighborhood, so the realized band never reaches farther than this
        from a curve."""
        return self.kappa * self.slope_factor

    # ------------------------------------------------------------- the curves

    def oscillation(self, theta: np.ndarray) -> np.ndarray:
        """v(theta) = delta' cos(2 pi N theta), evaluated through the
        fractional part of N theta to keep full precision at large N."""
        t = np.asarray(theta, dtype=np.float64)
        frac = self.N * t - np.floor(self.N * t)
        return self.delta_prime * np.cos(2.0 * np.pi * frac)

    def gamma_plus(self, theta: np.ndarray) -> np.ndarray:
        return self.oscillation(theta) + (1.0 - self.delta)

    def gamma_minus(self, theta: np.ndarray) -> np.ndarray:
        return self.oscillation(theta) - (1.0 - self.delta)

    def classify(self, theta: np.ndarray, y: np.ndarray,
                 kappa: float | None = None) -> np.ndarray:
        """Label each point with its Region for the guard-band scale kappa
        (default: the gutter scale delta'/16).

        A point belongs to a curve's band when it lies in BOTH of two
        enclosures of the set of points within metric distance kappa of the
        curve: the slope-corrected vertical strip |y - gamma(theta)| <
        kappa * slope_factor, and the kappa-neighborhood of the curve's
        oscillation slab, |y -+ (1 - delta)| < delta' + kappa.  Each
        enclosure contains every point metrically kappa-close to the curve
        (the second because the curve's heights fill the slab), so the
        intersection still does, and the second keeps the band from
        swallowing the chart when N * delta' is large.  Returns an int8
        array of Region values.
        """
        if kappa is None:
            kappa = self.kappa
        if kappa < 0.0:
            raise ValueError("kappa must be nonnegative")
        theta = np.asarray(theta, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        v = self.oscillation(theta)
        hw = kappa * self.slope_factor
        slab = self.delta_prime + kappa
        up = v + (1.0 - self.delta)
        dn = v - (1.0 - self.delta)
        out = np.full(np.broadcast_shapes(theta.shape, y.shape),
                      Region.INTERIOR, dtype=np.int8)
        out[y > up] = Region.ABOVE
        out[y < dn] = Region.BELOW
        band = (np.abs(y - up) < hw) & (np.abs(y - (1.0 - self.delta)) < slab)
        band |= (np.abs(y - dn) < hw) & (np.abs(y + (1.0 - self.delta)) < slab)
        out[band] = Region.BAND
        return out

    def longitude_band_fraction(self, y: float,
                                kappa: float | None = None) -> float:
        """Length of {theta : (theta, y) lies in a guard band at scale kappa}.

        cos(2 pi N theta) covers each cosine level set N times per unit
        circle, so the fraction equals the arc measure of a cosine interval;
        the two bands give two intervals, merged with an overlap correction.
        A curve contributes nothing when y falls outside the
        kappa-neighborhood of its oscillation slab (the same clamp classify
        applies), so the closed form matches the classifier exactly.
        """
        if kappa is None:
            kappa = self.kappa
        if kappa < 0.0:
            raise ValueError("kappa must be nonnegative")
        hw = kappa * self.slope_factor
        slab = self.delta_prime + kappa
        dp = self.delta_prime
        in_up = abs(y - (1.0 - self.delta)) < slab
        in_dn = abs(y + (1.0 - self.delta)) < slab
        iv_up = ((y - (1.0 - self.delta) - hw) / dp,
                 (y - (1.0 - self.delta) + hw) / dp)
        iv_dn = ((y + (1.0 - self.delta) - hw) / dp,
                 (y + (1.0 - self.delta) + hw) / dp)

        def cos_measure(lo: float, hi: float) -> float:
            lo = min(max(lo, -1.0), 1.0)
            hi = min(max(hi, -1.0), 1.0)
            if hi <= lo:
                return 0.0
            return (math.acos(lo) - math.acos(hi)) / math.pi

        total = 0.0
        if in_up:
            total += cos_measure(*iv_up)
        if in_dn:
            total += cos_measure(*iv_dn)
        if in_up and in_dn:
            total -= cos_measure(max(iv_up[0], iv_dn[0]),
                                 min(iv_up[1], iv_dn[1]))
        return total

    # ---------------------------------------------------------- serialization

    def to_json_dict(self) -> dict:
        return {"q": self.q, "n": self.n, "N": self.N,
                "delta": self.delta, "delta_prime": self.delta_prime}

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), sort_keys=True),
                              encoding="utf-8")

    @classmethod
    def from_json_dict(cls, obj: dict) -> "Bicurve":
        bc = cls(int(obj["q"]), int(obj["n"]), float(obj["delta"]),
                 float(obj["delta_prime"]))
        if "N" in obj and int(obj["N"]) != bc.N:
            raise ValueError(
                f"inconsistent oscillation count: file says {obj['N']}, "
                f"q*n^2 = {bc.N}")
        return bc

    @classmethod
    def from_json(cls, path: str | Path) -> "Bicurve":
        return cls.from_json_dict(json.loads(Path(path).read_text(
            encoding="utf-8")))
