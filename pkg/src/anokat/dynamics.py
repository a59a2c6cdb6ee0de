"""Area-preserving chart maps: rotations, the box shuffle, compositions.

All maps act on (theta, y) chart coordinates, theta mod 1.  The box shuffle
is the workhorse: inside the open strip between the two guard curves it
permutes n thin source columns of each commuting period into n stacked
levels of one wide column (slope n in theta, 1/n in depth, determinant one
exactly), and transports the leftover gutters and caps by a closed-form
piecewise-linear rearrangement, also with determinant one.  Outside the open
strip every map here is the identity, bitwise.

Every evaluation can also report a per-layer "piece id" describing which
linearity cell of each shuffle layer the point used; equal id paths for two
nearby points certify that the segment between them crossed no seam.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from anokat.bicurve import Bicurve
from anokat.surface import DiscreteMeasure, SurfaceTag

__all__ = [
    "AreaMap",
    "Rotation",
    "BoxShuffle",
    "Compose",
    "InverseMap",
    "identity_map",
    "pushforward",
    "empirical_measure",
    "rotation_offsets",
    "jacobian_check",
    "JacobianReport",
    "map_from_json_dict",
    "map_to_json",
    "map_from_json",
]

_GUTTER, _COLUMN = 0, 1

# piece id packing: kind << 40 | primary index << 20 | secondary index
_KIND_BOX = 1 << 40
_KIND_RESIDUAL = 2 << 40


class AreaMap:
    """Base class; subclasses implement vectorized forward/inverse action."""

    n_piece_layers: int = 0

    def eval_many(self, theta: np.ndarray, y: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray]:
        t, h, _ = self.eval_with_pieces(theta, y)
        return t, h

    def eval_inv_many(self, theta: np.ndarray, y: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
        t, h, _ = self.eval_inv_with_pieces(theta, y)
        return t, h

    def eval_point(self, theta: float, y: float) -> tuple[float, float]:
        t, h = self.eval_many(np.array([theta]), np.array([y]))
        return float(t[0]), float(h[0])

    def eval_inv_point(self, theta: float, y: float) -> tuple[float, float]:
        t, h = self.eval_inv_many(np.array([theta]), np.array([y]))
        return float(t[0]), float(h[0])

    def eval_with_pieces(self, theta, y):  # pragma: no cover - abstract
        raise NotImplementedError

    def eval_inv_with_pieces(self, theta, y):  # pragma: no cover - abstract
        raise NotImplementedError

    def to_json_dict(self) -> dict:  # pragma: no cover - abstract
        raise NotImplementedError


def _no_pieces(n: int) -> np.ndarray:
    return np.zeros((n, 0), dtype=np.int64)


@dataclass(frozen=True)
class Rotation(AreaMap):
    """Rigid rotation by an exact rational angle."""

    alpha: Fraction

    n_piece_layers = 0

    def __post_init__(self) -> None:
        if not isinstance(self.alpha, Fraction):
            object.__setattr__(self, "alpha", Fraction(self.alpha))

    def eval_with_pieces(self, theta, y):
        theta = np.asarray(theta, dtype=np.float64)
        return (theta + float(self.alpha)) % 1.0, np.asarray(y), _no_pieces(theta.size)

    def eval_inv_with_pieces(self, theta, y):
        theta = np.asarray(theta, dtype=np.float64)
        return (theta - float(self.alpha)) % 1.0, np.asarray(y), _no_pieces(theta.size)

    def to_json_dict(self) -> dict:
        return {"kind": "rotation",
                "alpha": {"p": str(self.alpha.numerator),
                          "q": str(self.alpha.denominator)}}


def _cum_bounds(pieces: list[tuple[float, float]]) -> np.ndarray:
    widths = [hi - lo for lo, hi in pieces]
    return np.concatenate([[0.0], np.cumsum(widths)])


def _pos_in_pieces(pieces, cum, c):
    """Point at cumulative length c inside a piece list."""
    k = int(np.searchsorted(cum, c, side="right")) - 1
    k = min(max(k, 0), len(pieces) - 1)
    return pieces[k][0] + (c - cum[k])


def _fiber_table(src_pieces, tgt_pieces):
    """Monotone map between two interval unions, matching normalized
    cumulative length; returned as matched breakpoint arrays."""
    src_cum = _cum_bounds(src_pieces)
    tgt_cum = _cum_bounds(tgt_pieces)
    total_s = src_cum[-1]
    total_t = tgt_cum[-1]
    ratio = total_t / total_s
    cuts = np.unique(np.concatenate([src_cum, tgt_cum / ratio]))
    cuts = cuts[(cuts >= -1e-18) & (cuts <= total_s * (1 + 1e-15))]
    # drop float-duplicate cuts
    keep = np.concatenate([[True], np.diff(cuts) > 1e-15 * max(total_s, 1.0)])
    cuts = cuts[keep]
    s_bp = np.array([_pos_in_pieces(src_pieces, src_cum, c) for c in cuts])
    t_bp = np.array([_pos_in_pieces(tgt_pieces, tgt_cum, c * ratio)
                     for c in cuts])
    return s_bp, t_bp


def _piecewise_eval(bp_in: np.ndarray, bp_out: np.ndarray, x: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the monotone piecewise-linear map (bp_in -> bp_out) at x;
    also returns the piece index used."""
    k = np.searchsorted(bp_in, x, side="right") - 1
    np.clip(k, 0, bp_in.size - 2, out=k)
    width = bp_in[k + 1] - bp_in[k]
    slope = (bp_out[k + 1] - bp_out[k]) / np.where(width > 0, width, 1.0)
    return bp_out[k] + (x - bp_in[k]) * slope, k


class BoxShuffle(AreaMap):
    """The measure-preserving shuffle attached to a curve pair.

    Geometry per commuting period P = 1/(q n) (all in the sheared frame
    where depth s = gamma_plus(theta) - y):

    * n source columns of theta-width 1/N - 2a (a = kappa/N gutters on both
      sides), depth window [2a, H] with H = 2(1-delta) - 2a;
    * they map, order preserved, onto n stacked depth levels of the single
      wide target column [kappa P, (1-kappa) P], each level a/n-padded
      inside its H/n window — theta stretches by n, depth shrinks by n;
    * gutters and caps move by a separable rearrangement: a piecewise-linear
      longitude map (the cumulative-mass matching of the two leftover
      profiles) times the matching fiber map in depth, determinant one on
      every piece.
    """

    n_piece_layers = 1

    def __init__(self, bicurve: Bicurve) -> None:
        self.bicurve = bicurve
        bc = bicurve
        n = bc.n
        self.P = 1.0 / (bc.q * n)
        self.a = bc.kappa / bc.N
        self.strip = 2.0 * (1.0 - bc.delta)
        self.H = self.strip - 2.0 * self.a
        a, H, P, strip = self.a, self.H, self.P, self.strip
        if H <= 4 * a:
            raise ValueError("degenerate geometry: boxes would be empty")

        # leftover longitude profile, source side: gutter / column blocks
        src_blocks: list[tuple[float, float, int]] = [(0.0, a, _GUTTER)]
        for c in range(n):
            lo = c * P / n + a
            hi = (c + 1) * P / n - a
            src_blocks.append((lo, hi, _COLUMN))
            g_hi = (c + 1) * P / n + a if c < n - 1 else P
            src_blocks.append((hi, g_hi, _GUTTER))
        tgt_blocks = [(0.0, n * a, _GUTTER),
                      (n * a, P - n * a, _COLUMN),
                      (P - n * a, P, _GUTTER)]
        dens = {_GUTTER: strip, _COLUMN: 4.0 * a}

        src_bp = [0.0]
        tgt_bp = [0.0]
        sty: list[int] = []
        tty: list[int] = []
        i = j = 0
        ms = mt = 0.0  # mass already consumed in the current blocks
        tol = 1e-15 * strip * P
        while i < len(src_blocks) and j < len(tgt_blocks):
            slo, shi, st = src_blocks[i]
            tlo, thi, tt = tgt_blocks[j]
            rem_s = (shi - slo) * dens[st] - ms
            rem_t = (thi - tlo) * dens[tt] - mt
            take = min(rem_s, rem_t)
            if take > tol:
                ms += take
                mt += take
                src_bp.append(slo + ms / dens[st])
                tgt_bp.append(tlo + mt / dens[tt])
                sty.append(st)
                tty.append(tt)
            if rem_s - take <= tol:
                i += 1
                ms = 0.0
            if rem_t - take <= tol:
                j += 1
                mt = 0.0
        src_bp[-1] = P
        tgt_bp[-1] = P
        self.u_src = np.array(src_bp)
        self.u_tgt = np.array(tgt_bp)
        self.u_sty = np.array(sty, dtype=np.int64)
        self.u_tty = np.array(tty, dtype=np.int64)

        full = [(0.0, strip)]
        caps = [(0.0, 2 * a), (H, strip)]
        gaps = [(0.0, a + a / n)]
        gaps += [(a + k * H / n - a / n, a + k * H / n + a / n)
                 for k in range(1, n)]
        gaps += [(a + H - a / n, strip)]
        self.fibers = {
            (_GUTTER, _GUTTER): _fiber_table(full, full),
            (_GUTTER, _COLUMN): _fiber_table(full, gaps),
            (_COLUMN, _GUTTER): _fiber_table(caps, full),
            (_COLUMN, _COLUMN): _fiber_table(caps, gaps),
        }

    # ------------------------------------------------------------ evaluation

    def _split(self, theta, y):
        bc = self.bicurve
        theta = np.asarray(theta, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        gp = bc.gamma_plus(theta)
        s = gp - y
        inside = (s > 0.0) & (s < self.strip)
        qn = bc.q * bc.n
        pp = np.floor(theta * qn)
        t = theta - pp * self.P
        np.clip(t, 0.0, np.nextafter(self.P, 0.0), out=t)
        return theta, y, s, inside, pp, t

    def eval_with_pieces(self, theta, y):
        bc = self.bicurve
        n = bc.n
        theta, y, s, inside, pp, t = self._split(theta, y)
        out_t = theta.copy()
        out_y = np.asarray(y, dtype=np.float64).copy()
        ids = np.zeros((theta.size, 1), dtype=np.int64)
        if not inside.any():
            return out_t, out_y, ids

        w = t * bc.N
        col = np.floor(w)
        np.clip(col, 0, n - 1, out=col)
        u_in = w - col
        kap = bc.kappa
        in_box = inside & (u_in >= kap) & (u_in <= 1.0 - kap) \
            & (s >= 2 * self.a) & (s <= self.H)

        if in_box.any():
            m = in_box
            # position across the source column equals position across the
            # target column, so the longitude image is just u_in * P
            theta2 = pp[m] * self.P + u_in[m] * self.P
            s2 = self.a + col[m] * self.H / n + self.a / n \
                + (s[m] - 2 * self.a) / n
            out_t[m] = theta2 % 1.0
            out_y[m] = bc.gamma_plus(theta2) - s2
            ids[m, 0] = _KIND_BOX | (col[m].astype(np.int64) << 20)

        res = inside & ~in_box
        if res.any():
            m = res
            t2, k = _piecewise_eval(self.u_src, self.u_tgt, t[m])
            pair_s = self.u_sty[k]
            pair_t = self.u_tty[k]
            s2 = np.empty(t2.shape)
            fk = np.zeros(t2.shape, dtype=np.int64)
            for (ps, pt), (bp_in, bp_out) in self.fibers.items():
                sel = (pair_s == ps) & (pair_t == pt)
                if sel.any():
                    s2[sel], fk[sel] = _piecewise_eval(bp_in, bp_out, s[m][sel])
            theta2 = pp[m] * self.P + t2
            out_t[m] = theta2 % 1.0
            out_y[m] = bc.gamma_plus(theta2) - s2
            ids[m, 0] = _KIND_RESIDUAL | (k.astype(np.int64) << 20) | fk
        return out_t, out_y, ids

    def eval_inv_with_pieces(self, theta, y):
        bc = self.bicurve
        n = bc.n
        theta, y, s, inside, pp, t = self._split(theta, y)
        out_t = theta.copy()
        out_y = np.asarray(y, dtype=np.float64).copy()
        ids = np.zeros((theta.size, 1), dtype=np.int64)
        if not inside.any():
            return out_t, out_y, ids

        kap = bc.kappa
        tp = t / self.P  # position across the period, in [0, 1)
        lvl = np.floor((s - self.a) / (self.H / n))
        r = s - self.a - lvl * self.H / n
        in_img = inside & (tp >= kap) & (tp <= 1.0 - kap) & (lvl >= 0) \
            & (lvl <= n - 1) & (r >= self.a / n) & (r <= self.H / n - self.a / n)

        if in_img.any():
            m = in_img
            col = lvl[m]
            u_in = tp[m]  # unit position across the wide column = across source
            theta1 = pp[m] * self.P + (col + u_in) / bc.N
            s1 = 2 * self.a + n * (r[m] - self.a / n)
            out_t[m] = theta1 % 1.0
            out_y[m] = bc.gamma_plus(theta1) - s1
            ids[m, 0] = _KIND_BOX | (col.astype(np.int64) << 20)

        res = inside & ~in_img
        if res.any():
            m = res
            t1, k = _piecewise_eval(self.u_tgt, self.u_src, t[m])
            pair_s = self.u_sty[k]
            pair_t = self.u_tty[k]
            s1 = np.empty(t1.shape)
            fk = np.zeros(t1.shape, dtype=np.int64)
            for (ps, pt), (bp_in, bp_out) in self.fibers.items():
                sel = (pair_s == ps) & (pair_t == pt)
                if sel.any():
                    s1[sel], fk[sel] = _piecewise_eval(bp_out, bp_in, s[m][sel])
            theta1 = pp[m] * self.P + t1
            out_t[m] = theta1 % 1.0
            out_y[m] = bc.gamma_plus(theta1) - s1
            ids[m, 0] = _KIND_RESIDUAL | (k.astype(np.int64) << 20) | fk
        return out_t, out_y, ids

    def to_json_dict(self) -> dict:
        return {"kind": "shuffle", "bicurve": self.bicurve.to_json_dict()}


class Compose(AreaMap):
    """Composition; maps[-1] acts first (usual right-to-left notation)."""

    def __init__(self, maps: Sequence[AreaMap]) -> None:
        self.maps = tuple(maps)
        self.n_piece_layers = sum(m.n_piece_layers for m in self.maps)

    def eval_with_pieces(self, theta, y):
        theta = np.asarray(theta, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        cols = []
        for m in reversed(self.maps):
            theta, y, ids = m.eval_with_pieces(theta, y)
            cols.append(ids)
        if not cols:
            return theta.copy(), y.copy(), _no_pieces(theta.size)
        return theta, y, np.concatenate(cols, axis=1)

    def eval_inv_with_pieces(self, theta, y):
        theta = np.asarray(theta, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        cols = []
        for m in self.maps:
            theta, y, ids = m.eval_inv_with_pieces(theta, y)
            cols.append(ids)
        if not cols:
            return theta.copy(), y.copy(), _no_pieces(theta.size)
        return theta, y, np.concatenate(cols, axis=1)

    def to_json_dict(self) -> dict:
        return {"kind": "compose",
                "maps": [m.to_json_dict() for m in self.maps]}


class InverseMap(AreaMap):
    def __init__(self, of: AreaMap) -> None:
        self.of = of
        self.n_piece_layers = of.n_piece_layers

    def eval_with_pieces(self, theta, y):
        return self.of.eval_inv_with_pieces(theta, y)

    def eval_inv_with_pieces(self, theta, y):
        return self.of.eval_with_pieces(theta, y)

    def to_json_dict(self) -> dict:
        return {"kind": "inverse", "of": self.of.to_json_dict()}


def identity_map() -> Compose:
    return Compose(())


# -------------------------------------------------------------- serialization

def map_from_json_dict(obj: dict) -> AreaMap:
    kind = obj.get("kind")
    if kind == "rotation":
        return Rotation(Fraction(int(obj["alpha"]["p"]), int(obj["alpha"]["q"])))
    if kind == "shuffle":
        return BoxShuffle(Bicurve.from_json_dict(obj["bicurve"]))
    if kind == "compose":
        return Compose([map_from_json_dict(m) for m in obj["maps"]])
    if kind == "inverse":
        return InverseMap(map_from_json_dict(obj["of"]))
    raise ValueError(f"unknown map kind {kind!r}")


def map_to_json(m: AreaMap, path: str | Path) -> None:
    Path(path).write_text(json.dumps(m.to_json_dict(), sort_keys=True),
                          encoding="utf-8")


def map_from_json(path: str | Path) -> AreaMap:
    return map_from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------- pushforward

def pushforward(m: AreaMap, mu: DiscreteMeasure,
                label: str | None = None) -> DiscreteMeasure:
    theta, y = m.eval_many(mu.theta, mu.y)
    return DiscreteMeasure(theta, np.clip(y, -1.0, 1.0), mu.weights.copy(),
                           mu.tag, mu.label if label is None else label)


def rotation_offsets(alpha: Fraction, count: int, stride: int = 1) -> np.ndarray:
    """Exact angles {j*stride*alpha mod 1 : j < count} as float64.

    The modular arithmetic runs in integers (big ints when the products
    would overflow int64), so aliasing from rounded rationals never enters;
    only the final division to float64 loses precision.
    """
    alpha = Fraction(alpha)
    p = alpha.numerator % alpha.denominator
    q = alpha.denominator
    r = (stride * p) % q  # one exact step between kept iterates
    if count * r < 2 ** 62:
        nums = (np.arange(count, dtype=np.int64) * r) % q
        return nums.astype(np.float64) / q
    nums = [0] * count
    acc = 0
    for j in range(1, count):
        acc += r
        if acc >= q:
            acc -= q
        nums[j] = acc
    return np.array([n / q for n in nums], dtype=np.float64)


def empirical_measure(h: AreaMap, alpha: Fraction, x: tuple[float, float],
                      k: int, tag: SurfaceTag, stride: int = 1,
                      count: int | None = None,
                      label: str = "") -> DiscreteMeasure:
    """Empirical measure of the first k conjugated-rotation iterates of x.

    Uses the conjugation shortcut: pull x back through h once, advance the
    exact rational rotation j*alpha with integer arithmetic, push the whole
    orbit forward through h in one vectorized call.  With stride > 1, only
    the iterates j = i*stride are kept (uniform weights on those kept);
    ``count`` overrides how many are kept, in which case the indices run
    modulo the rotation order and the caller is responsible for choosing a
    stride that makes them distinct.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    t0, y0 = h.eval_inv_point(*x)
    m = len(range(0, k, stride)) if count is None else count
    offs = rotation_offsets(alpha, m, stride)
    theta = (t0 + offs) % 1.0
    ys = np.full(m, y0)
    th2, y2 = h.eval_many(theta, ys)
    w = np.full(m, 1.0 / m)
    return DiscreteMeasure(th2, np.clip(y2, -1.0, 1.0), w, tag, label)


# ------------------------------------------------------------ jacobian probes

@dataclass(frozen=True)
class JacobianReport:
    dets: np.ndarray
    valid: np.ndarray
    max_abs_dev: float
    n_valid: int


def _wrap_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a - b + 0.5) % 1.0 - 0.5


def jacobian_check(m: AreaMap, theta: np.ndarray, y: np.ndarray,
                   h: float = 1e-5) -> JacobianReport:
    """Central-difference determinant of the chart differential at each
    point.  A stencil is valid only when all five evaluations stay inside
    one linearity cell of every layer (equal piece-id paths); seam-crossing
    stencils are reported invalid rather than producing junk determinants.
    """
    theta = np.asarray(theta, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(np.abs(y) > 1.0 - 2 * h):
        raise ValueError("stencil would leave the chart; keep |y| < 1 - 2h")
    _, _, ids0 = m.eval_with_pieces(theta, y)
    te, ye, ide = m.eval_with_pieces((theta + h) % 1.0, y)
    tw, yw, idw = m.eval_with_pieces((theta - h) % 1.0, y)
    tn, yn, idn = m.eval_with_pieces(theta, y + h)
    ts, ys_, ids_ = m.eval_with_pieces(theta, y - h)
    valid = ((ids0 == ide) & (ids0 == idw) & (ids0 == idn)
             & (ids0 == ids_)).all(axis=1)
    dtheta_dt = _wrap_diff(te, tw) / (2 * h)
    dy_dt = (ye - yw) / (2 * h)
    dtheta_dy = _wrap_diff(tn, ts) / (2 * h)
    dy_dy = (yn - ys_) / (2 * h)
    dets = dtheta_dt * dy_dy - dtheta_dy * dy_dt
    dev = np.abs(dets - 1.0)[valid]
    return JacobianReport(dets, valid,
                          float(dev.max()) if dev.size else float("nan"),
                          int(valid.sum()))
