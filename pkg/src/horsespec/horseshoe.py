"""Finite stages f_K of the piecewise-affine 3-fold horseshoe with C^2 surgeries.

Geometry
--------
The three horizontal strips H_s = [0,1] x I_s (height 1/lambda_inf) and the
three vertical strips V_s = J_s x [0,1] (width delta_inf) sit at equal gaps
inside the unit square.  Branch s of f_0 is the diagonal affine map

    x' = cv_s + sg_s * r * (x - 1/2),     y' = sg_s * lambda_inf * (y - cy_s) + 1/2

with orientation pattern sg = (+, -, +) and horizontal rate r = delta_0 *
delta_inf on depth-(alpha+1) cells whose forward word has a 2 among its first
alpha+1 symbols (the X0(alpha) cells) and r = delta_inf elsewhere.

A level-k surgery box is the rectangle of points whose forward word of depth
k+alpha+1 and backward word of depth k+alpha-1 are prescribed, computed with
the stage-(k-1) map by interval arithmetic.  Boxes whose forward word lies in
U(k) or V(k) receive a blend L_k that is linear diag(delta_k, lambda_k) (V) or
diag(delta_k, 1) (U) on an inner box and the identity outside; then
f_k = f_{k-1} o L_k.

On the invariant set every stage acts by diagonal affine maps, so all interval
and fixed-point computations are one-dimensional.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from . import construction, symbolic
from .construction import ConstructionParams
from .errors import (
    CoreViolation,
    ConfigurationError,
    DomainError,
    InvalidArgument,
    NumericalFailure,
    ShrinkRates,
    VerificationFailure,
)

log = logging.getLogger(__name__)

SIGNS = (1, -1, 1)
GRID_POINTS = 101
COLLAR_FRACTION = 2.0 / 3.0
DEFAULT_EXTRA_DEPTH = 5  # m = k + alpha + 6 = (k + alpha + 1) + 5
MAX_STAGE = 3


# -- layout and f0 -------------------------------------------------------------


@dataclass(frozen=True)
class StripLayout:
    lam: float
    delta: float
    I: tuple  # three (lo, hi) y-intervals
    J: tuple  # three (lo, hi) x-intervals

    @classmethod
    def from_params(cls, params: ConstructionParams) -> "StripLayout":
        lam, d = params.lambda_inf, params.delta_inf
        gy = (1 - 3 / lam) / 4
        gx = (1 - 3 * d) / 4
        I = tuple((gy + s * (1 / lam + gy), gy + s * (1 / lam + gy) + 1 / lam) for s in range(3))
        J = tuple((gx + s * (d + gx), gx + s * (d + gx) + d) for s in range(3))
        return cls(lam, d, I, J)

    def cy(self, s):
        return 0.5 * (self.I[s][0] + self.I[s][1])

    def cv(self, s):
        return 0.5 * (self.J[s][0] + self.J[s][1])

    @cached_property
    def y_cuts(self):
        """Partition points in the gaps between consecutive strips."""
        return (0.5 * (self.I[0][1] + self.I[1][0]), 0.5 * (self.I[1][1] + self.I[2][0]))

    def strip_of(self, y):
        y = np.asarray(y, dtype=float)
        return (y >= self.y_cuts[0]).astype(int) + (y >= self.y_cuts[1]).astype(int)

    def T(self, s, y):
        return SIGNS[s] * self.lam * (y - self.cy(s)) + 0.5

    def T_inv(self, s):
        """(a, b) with T_s^{-1}(y') = a y' + b."""
        sg = SIGNS[s]
        return sg / self.lam, self.cy(s) - sg / (2 * self.lam)


def _hull(intervals):
    lo = min(i[0] for i in intervals)
    hi = max(i[1] for i in intervals)
    return lo, hi


def _image(a, b, iv):
    u, v = a * iv[0] + b, a * iv[1] + b
    return (u, v) if u <= v else (v, u)


def _is_x0(word: str, alpha: int) -> bool:
    j = word.find("2")
    return 0 <= j <= alpha


@dataclass(frozen=True)
class AffineBranch:
    """Diagonal affine piece p -> linear * p + offset on an axis-aligned domain."""

    word: str
    domain: tuple  # (x0, x1, y0, y1)
    linear: tuple  # diagonal entries (dx, dy)
    offset: tuple

    def image(self) -> tuple:
        x0, x1, y0, y1 = self.domain
        xa = sorted((self.linear[0] * x0 + self.offset[0], self.linear[0] * x1 + self.offset[0]))
        ya = sorted((self.linear[1] * y0 + self.offset[1], self.linear[1] * y1 + self.offset[1]))
        return (xa[0], xa[1], ya[0], ya[1])


def _f0_cells(layout: StripLayout, alpha: int) -> dict:
    """y-interval of every depth-(alpha+1) forward word under f0."""
    cells = {}
    for w in itertools.product("012", repeat=alpha + 1):
        word = "".join(w)
        iv = (0.0, 1.0)
        for s in reversed(word):
            a, b = layout.T_inv(int(s))
            iv = _image(a, b, iv)
        cells[word] = iv
    return cells


# -- surgeries -----------------------------------------------------------------


def _smoothstep(u):
    """Quintic smoothstep S(u) = 6u^5 - 15u^4 + 10u^3 clipped to [0, 1], with S', S''."""
    u = np.clip(u, 0.0, 1.0)
    S = u**3 * (10 - 15 * u + 6 * u**2)
    S1 = 30 * u**2 * (1 - u) ** 2
    S2 = 60 * u * (1 - u) * (1 - 2 * u)
    return S, S1, S2


SMOOTHSTEP_MAX_SLOPE = 15.0 / 8.0


@dataclass
class SurgeryBlend:
    """L(p) = p + psi(p) (A - I)(p - c) on an outer box B, identity elsewhere.

    psi = S(u(x)) S(v(y)) with u, v the collar coordinates (0 on the outer
    boundary, 1 on the inner box) and S the quintic smoothstep, so psi is C^2,
    equal to 1 on B' and 0 off B.
    """

    level: int
    forward: str
    backward: str
    marking: str  # "U" or "V"
    outer: tuple  # (x0, x1, y0, y1)
    collar: tuple  # (wx, wy)
    rates: tuple  # (delta_k, lambda_k or 1)
    gamma: float
    f0_word: str
    f0_rate: float
    sign: int

    @property
    def center(self) -> np.ndarray:
        x0, x1, y0, y1 = self.outer
        return np.array([0.5 * (x0 + x1), 0.5 * (y0 + y1)])

    @property
    def inner(self) -> tuple:
        x0, x1, y0, y1 = self.outer
        wx, wy = self.collar
        return (x0 + wx, x1 - wx, y0 + wy, y1 - wy)

    @property
    def A(self) -> np.ndarray:
        return np.diag(self.rates)

    def contains(self, P, which="outer", pad=0.0) -> np.ndarray:
        x0, x1, y0, y1 = self.outer if which == "outer" else self.inner
        P = np.atleast_2d(P)
        return (P[:, 0] >= x0 - pad) & (P[:, 0] <= x1 + pad) & (P[:, 1] >= y0 - pad) & (P[:, 1] <= y1 + pad)

    def _psi(self, P):
        x0, x1, y0, y1 = self.outer
        wx, wy = self.collar
        x, y = P[:, 0], P[:, 1]
        lo_x, hi_x = x - x0, x1 - x
        lo_y, hi_y = y - y0, y1 - y
        ux = np.minimum(lo_x, hi_x) / wx
        uy = np.minimum(lo_y, hi_y) / wy
        dux = np.where(lo_x <= hi_x, 1.0, -1.0) / wx
        duy = np.where(lo_y <= hi_y, 1.0, -1.0) / wy
        Sx, Sx1, Sx2 = _smoothstep(ux)
        Sy, Sy1, Sy2 = _smoothstep(uy)
        psi = Sx * Sy
        px = Sx1 * dux * Sy
        py = Sx * Sy1 * duy
        pxx = Sx2 * dux**2 * Sy
        pyy = Sx * Sy2 * duy**2
        pxy = Sx1 * dux * Sy1 * duy
        return psi, px, py, pxx, pxy, pyy

    def apply(self, P) -> np.ndarray:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        psi = self._psi(P)[0]
        c = self.center
        a = np.array(self.rates) - 1.0
        return P + psi[:, None] * a[None, :] * (P - c[None, :])

    def jacobian(self, P) -> np.ndarray:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        psi, px, py, *_ = self._psi(P)
        c = self.center
        ax, ay = self.rates[0] - 1.0, self.rates[1] - 1.0
        dx, dy = P[:, 0] - c[0], P[:, 1] - c[1]
        J = np.empty((len(P), 2, 2))
        J[:, 0, 0] = 1 + ax * (psi + px * dx)
        J[:, 0, 1] = ax * py * dx
        J[:, 1, 0] = ay * px * dy
        J[:, 1, 1] = 1 + ay * (psi + py * dy)
        return J

    def hessian(self, P) -> np.ndarray:
        """H[n, i, j, l] = d^2 L_i / dp_j dp_l."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        psi, px, py, pxx, pxy, pyy = self._psi(P)
        c = self.center
        ax, ay = self.rates[0] - 1.0, self.rates[1] - 1.0
        dx, dy = P[:, 0] - c[0], P[:, 1] - c[1]
        H = np.empty((len(P), 2, 2, 2))
        H[:, 0, 0, 0] = ax * (2 * px + pxx * dx)
        H[:, 0, 0, 1] = H[:, 0, 1, 0] = ax * (py + pxy * dx)
        H[:, 0, 1, 1] = ax * pyy * dx
        H[:, 1, 0, 0] = ay * pxx * dy
        H[:, 1, 0, 1] = H[:, 1, 1, 0] = ay * (px + pxy * dy)
        H[:, 1, 1, 1] = ay * (2 * py + pyy * dy)
        return H

    def amplification(self) -> float:
        """K_psi with ||DL - I||_F <= sqrt(2) max|A - I| K_psi.

        Row i of DL - I is (a_i)(psi e_i + (p_i - c_i) grad psi), and
        |grad psi|_1 <= S'max (1/wx + 1/wy) with |p_i - c_i| <= half-width.
        """
        x0, x1, y0, y1 = self.outer
        h = 0.5 * max(x1 - x0, y1 - y0)
        wx, wy = self.collar
        return 1.0 + SMOOTHSTEP_MAX_SLOPE * h * (1 / wx + 1 / wy)

    def sample_grid(self, n: int = GRID_POINTS) -> np.ndarray:
        """n x n grid, dense in the collars: 2/5 of the points in each collar band."""
        x0, x1, y0, y1 = self.outer
        wx, wy = self.collar
        nc = (2 * n) // 5
        nm = n - 2 * nc

        def axis(a0, a1, w):
            return np.concatenate(
                [
                    np.linspace(a0, a0 + w, nc),
                    np.linspace(a0 + w, a1 - w, nm + 2)[1:-1],
                    np.linspace(a1 - w, a1, nc),
                ]
            )

        X, Y = np.meshgrid(axis(x0, x1, wx), axis(y0, y1, wy))
        return np.column_stack([X.ravel(), Y.ravel()])

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "forward": self.forward,
            "backward": self.backward,
            "marking": self.marking,
            "outer": list(self.outer),
            "inner": list(self.inner),
            "collar": list(self.collar),
            "rates": list(self.rates),
            "gamma": self.gamma,
        }


# -- interval core model -------------------------------------------------------


class CoreModel:
    """Interval arithmetic for the stage-s map on its invariant set.

    ``Y(f, e)`` encloses the y-coordinates of points whose forward word starts
    with ``f``; ``X(h, f, e)`` encloses the x-coordinates of points with
    backward word ``h`` (oldest first) and forward word starting with ``f``.
    ``e`` extra symbols of refinement beyond the given words are unioned over
    (e = 0 starts from the full interval [0, 1]).  Whenever the class or the
    box of a point is not determined by the known symbols, the images under
    every admissible map are unioned, so the results are enclosures.
    """

    def __init__(self, params: ConstructionParams, layout: StripLayout, surgeries: dict):
        self.params = params
        self.layout = layout
        self.alpha = params.alpha
        self.surgeries = surgeries  # level -> {(forward, backward): blend}
        self.s = max(surgeries, default=0)
        self._y, self._hy, self._x, self._hx = {}, {}, {}, {}
        self._v = {}
        for j, boxes in surgeries.items():
            for blend in boxes.values():
                if blend.marking == "V":
                    self._v[j] = blend
                    break

    @property
    def fwd_len(self) -> int:
        return self.s + self.alpha + 1

    # y direction

    def _y_inverse_maps(self, f: str):
        s0 = int(f[0])
        a0, b0 = self.layout.T_inv(s0)
        maps = [(a0, b0)]
        j2 = f.find("2")
        ones = lambda upto: all(c == "1" for c in f[:upto])
        levels = []
        if j2 >= 0:
            k = j2 - self.alpha
            if 1 <= k <= self.s and ones(j2):
                levels = [k]
                maps = []
        elif ones(len(f)):
            levels = [k for k in range(1, self.s + 1) if len(f) <= k + self.alpha]
        for k in levels:
            blend = self._v[k]
            cy, lam = blend.center[1], blend.rates[1]
            maps.append((a0 / lam, cy + (b0 - cy) / lam))
        return maps

    def Hy(self, e: int):
        if e == 0:
            return (0.0, 1.0)
        if e not in self._hy:
            base = self.Hy(e - 1)
            ivs = [_image(a, b, base) for s in "012" for a, b in self._y_inverse_maps(s)]
            self._hy[e] = _hull(ivs)
        return self._hy[e]

    def Y(self, f: str, e: int = 0):
        if not f:
            return self.Hy(e)
        key = (f, e)
        if key not in self._y:
            sub = self.Y(f[1:], e)
            self._y[key] = _hull([_image(a, b, sub) for a, b in self._y_inverse_maps(f)])
        return self._y[key]

    # x direction

    def _centers(self, level: int, fwd: str, hist: Optional[str]):
        boxes = self.surgeries[level]
        nb = level + self.alpha - 1
        if hist is not None and len(hist) >= nb:
            key = (fwd, hist[len(hist) - nb :] if nb else "")
            return [boxes[key]]
        h = hist or ""
        return [b for (fw, bw), b in boxes.items() if fw == fwd and bw.endswith(h)]

    def _x_maps(self, f: str, hist: Optional[str]):
        """Candidate x-maps (a, b), x' = a x + b, of the stage map at a point."""
        s0 = int(f[0])
        sg = SIGNS[s0]
        cv = self.layout.cv(s0)
        lay = self.layout
        if len(f) < self.fwd_len and "2" not in f:
            raise InvalidArgument("forward word too short to fix the class")
        j2 = f.find("2")
        r = self.params.delta_0 * lay.delta if 0 <= j2 <= self.alpha else lay.delta
        a0, b0 = sg * r, cv - sg * r / 2
        k = j2 - self.alpha
        if j2 < 0 or not (1 <= k <= self.s):
            return [(a0, b0)]
        fwd = f[: k + self.alpha + 1]
        out = []
        for blend in self._centers(k, fwd, hist):
            cx, d = blend.center[0], blend.rates[0]
            out.append((a0 * d, a0 * cx * (1 - d) + b0))
        return out

    def Hx(self, e: int, f: str):
        f = f[: self.fwd_len]
        if e == 0:
            return (0.0, 1.0)
        key = (e, f)
        if key not in self._hx:
            ivs = []
            for c in "012":
                g = (c + f)[: self.fwd_len]
                base = self.Hx(e - 1, g)
                ivs += [_image(a, b, base) for a, b in self._x_maps(c + f, None)]
            self._hx[key] = _hull(ivs)
        return self._hx[key]

    def X(self, h: str, f: str, e: int = 0):
        if not h:
            return self.Hx(e, f)
        key = (h, f[: self.fwd_len], e)
        if key not in self._x:
            g = h[-1] + f
            sub = self.X(h[:-1], g, e)
            maps = self._x_maps(g, h[:-1])
            self._x[key] = _hull([_image(a, b, sub) for a, b in maps])
        return self._x[key]


# -- boxes and gamma -----------------------------------------------------------


@dataclass(frozen=True)
class Box:
    level: int
    forward: str
    backward: str
    marking: str  # "U", "V" or "-"
    rect: tuple  # (x0, x1, y0, y1)


@dataclass
class BoxFamily:
    level: int
    boxes: list

    @property
    def marked(self) -> list:
        return [b for b in self.boxes if b.marking in ("U", "V")]

    def __len__(self):
        return len(self.boxes)


def _marking(word: str, k: int, alpha: int) -> str:
    cls = symbolic.classify_prefix(word, alpha)
    if cls.is_surgery and cls.k == k:
        return cls.tag
    return "-"


def boxes_of_level(stage: "StageMap", k: int, params: Optional[ConstructionParams] = None, marked_only=False) -> BoxFamily:
    """Level-k rectangles: forward depth k+alpha+1, backward depth k+alpha-1.

    Built with the stage-(k-1) core model; there are 3^{2(k+alpha)} of them.
    """
    if k < 1:
        raise InvalidArgument("box level must be >= 1")
    if stage.stage != k - 1:
        raise InvalidArgument(f"level-{k} boxes need the stage-{k - 1} map")
    params = params or stage.params
    a = params.alpha
    model = stage.model
    nf, nb = k + a + 1, k + a - 1
    out = []
    if marked_only:
        fwds = ["".join(w) + "2" for w in itertools.product("01", repeat=k + a)]
    else:
        fwds = ["".join(w) for w in itertools.product("012", repeat=nf)]
    for fw in fwds:
        mark = _marking(fw, k, a)
        if marked_only and mark == "-":
            continue
        y = model.Y(fw)
        for bw in itertools.product("012", repeat=nb):
            bw = "".join(bw)
            x = model.X(bw, fw)
            out.append(Box(k, fw, bw, mark, (x[0], x[1], y[0], y[1])))
    return BoxFamily(k, out)


@dataclass
class GammaCertificate:
    level: int
    gamma: float
    depth: int
    margins: dict  # (forward, backward) -> (margin_x, margin_y)


def gamma_of_level(family: BoxFamily, stage: "StageMap", m: Optional[int] = None) -> GammaCertificate:
    """Certified lower bound for gamma_k = (1/3) min_B dist(boundary B, Lambda_{k-1} in B).

    Lambda_{k-1} in B is enclosed by its depth-m cover (the box words refined
    by m - (k+alpha+1) further symbols on both sides); the distance from that
    cover to the boundary of B bounds the true distance from below.
    """
    k = family.level
    a = stage.params.alpha
    if m is None:
        m = k + a + 1 + DEFAULT_EXTRA_DEPTH
    e = m - (k + a + 1)
    if e < 1:
        raise InvalidArgument("refinement depth must exceed the box depth")
    model = stage.model
    margins = {}
    for b in family.marked:
        x0, x1, y0, y1 = b.rect
        cx = model.X(b.backward, b.forward, e)
        cy = model.Y(b.forward, e)
        margins[(b.forward, b.backward)] = (min(cx[0] - x0, x1 - cx[1]), min(cy[0] - y0, y1 - cy[1]))
    low = min(min(v) for v in margins.values())
    if not low > 0:
        raise NumericalFailure(f"margins at level {k} not resolved at depth {m}; increase the depth", depth=m)
    return GammaCertificate(k, low / 3.0, m, margins)


# -- stage map -----------------------------------------------------------------


@dataclass
class StageMap:
    stage: int
    params: ConstructionParams
    layout: StripLayout
    branches: list
    surgeries: list = field(default_factory=list)
    gammas: dict = field(default_factory=dict)
    norms: dict = field(default_factory=dict)  # level -> sampled C0/C1/C2 and budget
    families: dict = field(default_factory=dict)  # level -> BoxFamily sizes
    retries: list = field(default_factory=list)

    @cached_property
    def f0_cells(self) -> dict:
        return _f0_cells(self.layout, self.params.alpha)

    @cached_property
    def model(self) -> CoreModel:
        by_level = {}
        for s in self.surgeries:
            by_level.setdefault(s.level, {})[(s.forward, s.backward)] = s
        return CoreModel(self.params, self.layout, by_level)

    @cached_property
    def _box_arrays(self):
        if not self.surgeries:
            return np.empty((0, 4))
        return np.array([s.outer for s in self.surgeries])

    def surgery_index(self, P) -> np.ndarray:
        """Index of the surgery whose outer box contains each point, or -1."""
        P = np.atleast_2d(P)
        R = self._box_arrays
        if len(R) == 0:
            return -np.ones(len(P), dtype=int)
        inside = (
            (P[:, None, 0] >= R[None, :, 0])
            & (P[:, None, 0] <= R[None, :, 1])
            & (P[:, None, 1] >= R[None, :, 2])
            & (P[:, None, 1] <= R[None, :, 3])
        )
        idx = np.where(inside.any(axis=1), inside.argmax(axis=1), -1)
        return idx

    # f0

    def f0_word(self, y) -> np.ndarray:
        """Depth-(alpha+1) forward word (as an int code) of the f0 cell containing y."""
        lay = self.layout
        y = np.asarray(y, dtype=float).copy()
        code = np.zeros(y.shape, dtype=int)
        for _ in range(self.params.alpha + 1):
            s = lay.strip_of(y)
            code = 3 * code + s
            sg = np.array(SIGNS)[s]
            cy = np.array([lay.cy(i) for i in range(3)])[s]
            y = sg * lay.lam * (y - cy) + 0.5
        return code

    def f0_diag(self, P):
        """Diagonal (dx, dy) and offset of f0 at each point."""
        P = np.atleast_2d(P)
        lay, a = self.layout, self.params.alpha
        code = self.f0_word(P[:, 1])
        s = code // 3**a
        x0mask = np.zeros(len(P), dtype=bool)
        for i in range(a + 1):
            digit = (code // 3 ** (a - i)) % 3
            x0mask |= digit == 2
        r = np.where(x0mask, self.params.delta_0 * lay.delta, lay.delta)
        sg = np.array(SIGNS)[s]
        cv = np.array([lay.cv(i) for i in range(3)])[s]
        cy = np.array([lay.cy(i) for i in range(3)])[s]
        D = np.column_stack([sg * r, sg * lay.lam])
        off = np.column_stack([cv - sg * r / 2, 0.5 - sg * lay.lam * cy])
        return D, off

    def f0(self, P) -> np.ndarray:
        D, off = self.f0_diag(P)
        return D * np.atleast_2d(P) + off

    # f_K

    def _pre(self, P):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        idx = self.surgery_index(P)
        Q = P.copy()
        for i in np.unique(idx[idx >= 0]):
            m = idx == i
            Q[m] = self.surgeries[i].apply(P[m])
        return P, Q, idx

    def __call__(self, P) -> np.ndarray:
        _, Q, _ = self._pre(P)
        return self.f0(Q)

    def jacobian(self, P) -> np.ndarray:
        P, Q, idx = self._pre(P)
        D, _ = self.f0_diag(Q)
        J = np.zeros((len(P), 2, 2))
        J[:, 0, 0] = 1.0
        J[:, 1, 1] = 1.0
        for i in np.unique(idx[idx >= 0]):
            m = idx == i
            J[m] = self.surgeries[i].jacobian(P[m])
        return D[:, :, None] * J

    def hessian(self, P) -> np.ndarray:
        P, Q, idx = self._pre(P)
        D, _ = self.f0_diag(Q)
        H = np.zeros((len(P), 2, 2, 2))
        for i in np.unique(idx[idx >= 0]):
            m = idx == i
            H[m] = self.surgeries[i].hessian(P[m])
        return D[:, :, None, None] * H

    def level_surgeries(self, k: int) -> list:
        return [s for s in self.surgeries if s.level == k]

    def summary(self) -> dict:
        return {
            "stage": self.stage,
            "params": self.params.to_dict(),
            "x_scale": self.params.x_scale,
            "retries": list(self.retries),
            "levels": [
                {
                    "level": k,
                    "boxes": self.families.get(k, 0),
                    "surgeries": len(self.level_surgeries(k)),
                    "gamma": self.gammas[k],
                    "rates": list(construction.level_rates(self.params, k)),
                    **self.norms.get(k, {}),
                }
                for k in range(1, self.stage + 1)
            ],
        }


def build_f0(params: ConstructionParams) -> StageMap:
    """Stage 0: the piecewise-affine horseshoe with the X0(alpha) contraction change."""
    lay = StripLayout.from_params(params)
    cells = _f0_cells(lay, params.alpha)
    branches = []
    for word, (y0, y1) in sorted(cells.items()):
        s = int(word[0])
        sg = SIGNS[s]
        r = params.delta_0 * lay.delta if _is_x0(word, params.alpha) else lay.delta
        br = AffineBranch(
            word,
            (0.0, 1.0, y0, y1),
            (sg * r, sg * lay.lam),
            (lay.cv(s) - sg * r / 2, 0.5 - sg * lay.lam * lay.cy(s)),
        )
        x0, x1, ya, yb = br.image()
        if not (0 <= x0 and x1 <= 1 and -1e-12 <= ya and yb <= 1 + 1e-12):
            raise InvalidArgument(f"branch {word} leaves the unit square")
        if not (lay.J[s][0] - 1e-12 <= x0 and x1 <= lay.J[s][1] + 1e-12):
            raise InvalidArgument(f"branch {word} leaves its vertical strip")
        branches.append(br)
    for s in range(2):
        if lay.J[s][1] >= lay.J[s + 1][0] or lay.I[s][1] >= lay.I[s + 1][0]:
            raise InvalidArgument("strips overlap")
    return StageMap(0, params, lay, branches)


# -- surgery construction ------------------------------------------------------


def make_surgery(box: Box, k: int, params: ConstructionParams, margins: tuple, gamma: float, check: bool = True) -> SurgeryBlend:
    """Blend for one marked box; ``check`` runs the image-clearance and Jacobian tests."""
    if box.marking not in ("U", "V"):
        raise InvalidArgument("only U/V boxes carry a surgery")
    delta_k, lambda_k = construction.level_rates(params, k)
    rates = (delta_k, lambda_k if box.marking == "V" else 1.0)
    mx, my = margins
    collar = (COLLAR_FRACTION * mx, COLLAR_FRACTION * my)
    word = box.forward[: params.alpha + 1]
    r = params.delta_0 * params.delta_inf if _is_x0(word, params.alpha) else params.delta_inf
    blend = SurgeryBlend(k, box.forward, box.backward, box.marking, box.rect, collar, rates, gamma, word, r, SIGNS[int(word[0])])
    x0, x1, y0, y1 = box.rect
    if min(collar) < 2 * gamma * (1 - 1e-12):
        raise NumericalFailure("collar narrower than 2 gamma")
    if not (x1 - x0 > 2 * collar[0] and y1 - y0 > 2 * collar[1]):
        raise NumericalFailure("empty inner box")
    if check:
        check_surgery(blend)
    return blend


def check_surgery(blend: SurgeryBlend) -> None:
    """Image clearance and Jacobian positivity on the sampling grid; ShrinkRates otherwise."""
    k, gamma, rates = blend.level, blend.gamma, blend.rates
    x0, x1, y0, y1 = blend.outer
    # L(B') and the sampled preimage L^{-1}(B') stay gamma away from the boundary
    c = blend.center
    ix0, ix1, iy0, iy1 = blend.inner
    img = (c[0] + rates[0] * (ix0 - c[0]), c[0] + rates[0] * (ix1 - c[0]), c[1] + rates[1] * (iy0 - c[1]), c[1] + rates[1] * (iy1 - c[1]))
    d_img = min(img[0] - x0, x1 - img[1], img[2] - y0, y1 - img[3])
    G = blend.sample_grid()
    LG = blend.apply(G)
    pre = blend.contains(LG, "inner")
    d_pre = np.min(np.minimum.reduce([G[pre, 0] - x0, x1 - G[pre, 0], G[pre, 1] - y0, y1 - G[pre, 1]]))
    if not (d_img > gamma and d_pre > gamma):
        raise ShrinkRates(f"level {k} box {blend.forward}|{blend.backward}: core image too close to the boundary", factor=0.1)

    J = blend.jacobian(G)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    if not det.min() > 0:
        raise ShrinkRates(f"level {k}: Jacobian not positive", factor=0.1)


def _sampled_norms(blend: SurgeryBlend, stage: StageMap) -> tuple:
    """Sampled sup norms of f_k - f_{k-1} = Df0 (L - id) and its derivatives on B."""
    G = blend.sample_grid()
    D, _ = stage.f0_diag(G)
    c0 = np.linalg.norm(D * (blend.apply(G) - G), axis=1).max()
    J = blend.jacobian(G) - np.eye(2)[None]
    c1 = np.sqrt(((D[:, :, None] * J) ** 2).sum(axis=(1, 2))).max()
    H = blend.hessian(G)
    c2 = np.sqrt(((D[:, :, None, None] * H) ** 2).sum(axis=(1, 2, 3))).max()
    return float(c0), float(c1), float(c2)


def _rect_gap(a, b) -> float:
    """Positive if the closed rectangles are disjoint (max axis separation)."""
    return max(b[0] - a[1], a[0] - b[1], b[2] - a[3], a[2] - b[3])


def compose_stage(prev: StageMap, surgeries: list, gamma: float, n_boxes: int) -> StageMap:
    """f_k = f_{k-1} o L_k, after checking disjointness and the C^2 budget."""
    k = prev.stage + 1
    params = prev.params
    budget = 0.5 ** (k + 1) * params.eps_0
    for s in surgeries:
        for t in prev.surgeries:
            if not _rect_gap(s.outer, t.outer) > 0:
                raise VerificationFailure(f"level {k} box meets a level {t.level} box")
        cell = prev.f0_cells[s.f0_word]
        if not (cell[0] < s.outer[2] and s.outer[3] < cell[1]):
            raise VerificationFailure(f"level {k} box leaves its f0 cell")
    R = np.array([s.outer for s in surgeries])
    for i in range(len(R)):
        gaps = np.maximum.reduce([R[i + 1 :, 0] - R[i, 1], R[i, 0] - R[i + 1 :, 1], R[i + 1 :, 2] - R[i, 3], R[i, 2] - R[i + 1 :, 3]])
        if gaps.size and not gaps.min() > 0:
            raise VerificationFailure(f"level {k} boxes overlap")

    worst = np.zeros(3)
    amp = 0.0
    for s in surgeries:
        worst = np.maximum(worst, _sampled_norms(s, prev))
        amp = max(amp, s.amplification())
    norms = {
        "C0": float(worst[0]),
        "C1": float(worst[1]),
        "C2": float(worst[2]),
        "budget": budget,
        "K_psi": amp,
    }
    measured = float(worst.max())
    if not measured < budget:
        factor = min(0.9, 0.5 * budget / measured)
        raise ShrinkRates(f"level {k}: sampled C2 distance {measured:.3e} exceeds budget {budget:.3e}", factor=factor)
    for s in surgeries:
        check_surgery(s)
    stage = StageMap(
        k,
        params,
        prev.layout,
        prev.branches,
        prev.surgeries + list(surgeries),
        {**prev.gammas, k: gamma},
        {**prev.norms, k: norms},
        {**prev.families, k: n_boxes},
        list(prev.retries),
    )
    return stage


def _extend(prev: StageMap, m_extra: int = DEFAULT_EXTRA_DEPTH) -> StageMap:
    k = prev.stage + 1
    params = prev.params
    family = boxes_of_level(prev, k, marked_only=True)
    n_boxes = 3 ** (2 * (k + params.alpha))
    cert = gamma_of_level(family, prev, k + params.alpha + 1 + m_extra)
    surgeries = [make_surgery(b, k, params, cert.margins[(b.forward, b.backward)], cert.gamma, check=False) for b in family.marked]
    return compose_stage(prev, surgeries, cert.gamma, n_boxes)


def build_stage(params: ConstructionParams, K: int, max_retries: int = 3, cap: int = MAX_STAGE) -> StageMap:
    """f_K, shrinking x_scale on a budget or Jacobian failure (at most ``max_retries`` times)."""
    if K < 0:
        raise InvalidArgument("stage must be >= 0")
    if K > cap:
        raise InvalidArgument(f"stage {K} exceeds the cap {cap}")
    retries = []
    for attempt in range(max_retries + 1):
        try:
            stage = build_f0(params)
            for _ in range(K):
                stage = _extend(stage)
            stage.retries = retries
            return stage
        except ShrinkRates as exc:
            if attempt == max_retries:
                raise NumericalFailure(f"budget still violated after {max_retries} shrinks: {exc}", retries=retries) from exc
            new = params.x_scale * exc.factor
            log.info("shrinking x_scale %.6g -> %.6g (%s)", params.x_scale, new, exc)
            retries.append({"x_scale": params.x_scale, "new_x_scale": new, "reason": str(exc)})
            try:
                params = params.with_x_scale(new)
                construction.level_rates(params, K)
            except (ConfigurationError, DomainError) as dexc:
                raise NumericalFailure(f"rates degenerate after shrinking x_scale to {new:.3g}", retries=retries) from dexc
    raise AssertionError("unreachable")


# -- periodic orbits -----------------------------------------------------------


@dataclass
class PeriodicPointFix:
    itinerary: symbolic.PeriodicItinerary
    points: np.ndarray  # (n, 2), point i has forward itinerary sigma^i
    stage: int
    residual: float
    core_clearance: float
    boxes: list  # surgery index per orbit point, -1 if none

    @property
    def point(self) -> np.ndarray:
        return self.points[0]

    def to_dict(self) -> dict:
        return {
            "itinerary": symbolic.word_str(self.itinerary.generator),
            "points": self.points.tolist(),
            "stage": self.stage,
            "residual": self.residual,
            "core_clearance": self.core_clearance,
        }


def _core_maps(stage: StageMap, orbit: symbolic.PeriodicItinerary):
    """Per orbit point: 1D affine x-map, y-map and the surgery index assumed."""
    a = stage.params.alpha
    classes = symbolic.classify_periodic(orbit, a)
    lookup = {(s.level, s.forward, s.backward): i for i, s in enumerate(stage.surgeries)}
    lay = stage.layout
    out = []
    for i, cls in enumerate(classes):
        s0 = orbit.generator[i]
        sg = SIGNS[s0]
        word = symbolic.word_str(orbit.forward(i, a + 1))
        r = stage.params.delta_0 * lay.delta if _is_x0(word, a) else lay.delta
        ax, bx = sg * r, lay.cv(s0) - sg * r / 2
        ay, by = sg * lay.lam, 0.5 - sg * lay.lam * lay.cy(s0)
        idx = -1
        if cls.is_surgery and cls.k <= stage.stage:
            k = cls.k
            key = (k, symbolic.word_str(orbit.forward(i, k + a + 1)), symbolic.word_str(orbit.backward(i, k + a - 1)))
            idx = lookup[key]
            blend = stage.surgeries[idx]
            c = blend.center
            d, l = blend.rates
            ax, bx = ax * d, ax * c[0] * (1 - d) + bx
            ay, by = ay * l, ay * c[1] * (1 - l) + by
        out.append((ax, bx, ay, by, idx))
    return out


def _cycle_fixed_point(maps, start, coord):
    """Fixed point of the cyclic composition starting at ``start`` for one coordinate.

    x contracts forward, so it is composed forward; y expands, so the
    inverse maps (contractions) are composed instead.
    """
    n = len(maps)
    A, B = 1.0, 0.0
    if coord == 0:
        for t in range(n):
            ax, bx = maps[(start + t) % n][0:2]
            A, B = ax * A, ax * B + bx
    else:
        for t in range(n - 1, -1, -1):
            ay, by = maps[(start + t) % n][2:4]
            ia, ib = 1 / ay, -by / ay
            A, B = ia * A, ia * B + ib
    return B / (1 - A)


def locate_periodic(stage: StageMap, itinerary) -> PeriodicPointFix:
    """Periodic orbit of f_K with the given itinerary, found in the affine cores."""
    orbit = itinerary if isinstance(itinerary, symbolic.PeriodicItinerary) else symbolic.PeriodicItinerary.of(itinerary)
    if not orbit.primitive:
        raise InvalidArgument(f"{orbit} is not primitive")
    maps = _core_maps(stage, orbit)
    n = orbit.period
    pts = np.array([[_cycle_fixed_point(maps, i, 0), _cycle_fixed_point(maps, i, 1)] for i in range(n)])

    # strips and f0 cells
    a = stage.params.alpha
    for i in range(n):
        word = symbolic.word_str(orbit.forward(i, a + 1))
        y0, y1 = stage.f0_cells[word]
        if not (y0 < pts[i, 1] < y1):
            raise CoreViolation(f"{orbit} point {i} leaves its f0 cell")

    # cores and collars
    idx = stage.surgery_index(pts)
    assumed = np.array([m[4] for m in maps])
    clearance = math.inf
    R = stage._box_arrays
    for i in range(n):
        if idx[i] != assumed[i]:
            raise CoreViolation(f"{orbit} point {i} lies in box {idx[i]}, expected {assumed[i]}")
        p = pts[i]
        if assumed[i] >= 0:
            x0, x1, y0, y1 = stage.surgeries[assumed[i]].inner
            d = min(p[0] - x0, x1 - p[0], p[1] - y0, y1 - p[1])
        elif len(R):
            gaps = np.maximum.reduce([R[:, 0] - p[0], p[0] - R[:, 1], R[:, 2] - p[1], p[1] - R[:, 3]])
            d = float(gaps.min())
        else:
            d = math.inf
        if not d > 0:
            raise CoreViolation(f"{orbit} point {i} touches a blend collar")
        clearance = min(clearance, d)

    images = stage(pts)
    residual = float(np.abs(images - np.roll(pts, -1, axis=0)).max())
    if not residual < 1e-12:
        raise NumericalFailure(f"fixed point residual {residual:.3e} for {orbit}", residual=residual)
    return PeriodicPointFix(orbit, pts, stage.stage, residual, clearance, [int(v) for v in assumed])


def pointwise_exponents(stage: StageMap, fix: PeriodicPointFix) -> np.ndarray:
    """(-log|d_i|, log|l_i|) at each orbit point from the actual derivative of f_K."""
    J = stage.jacobian(fix.points)
    if np.any(J[:, 0, 1] != 0) or np.any(J[:, 1, 0] != 0):
        raise CoreViolation(f"non-diagonal derivative along {fix.itinerary}")
    return np.column_stack([-np.log(np.abs(J[:, 0, 0])), np.log(np.abs(J[:, 1, 1]))])


def cocycle_exponents(stage: StageMap, fix: PeriodicPointFix, params: Optional[ConstructionParams] = None) -> np.ndarray:
    """Lyapunov exponents (-(1/n) sum log|d_i|, (1/n) sum log|l_i|) of the orbit."""
    e = pointwise_exponents(stage, fix)
    n = len(e)
    return np.array([math.fsum(e[:, 0]) / n, math.fsum(e[:, 1]) / n])


def verify_phi_L(stage: StageMap, n_max: int, params: Optional[ConstructionParams] = None, tol: float = 1e-12, strict: bool = False) -> dict:
    """Compare geometric exponents with the stage-K potential on all short periodic orbits.

    Stage K sees the potential with classes above level K sent to w_inf.
    Also checks that orbit points sharing their depth-(K+alpha+1) forward
    word carry identical derivative pairs.
    """
    if stage.stage < 1:
        raise InvalidArgument("verification needs a stage K >= 1")
    params = params or stage.params
    K, a = stage.stage, params.alpha
    rows = []
    by_word = {}
    worst_point = worst_avg = 0.0
    for orbit in symbolic.enumerate_periodic(n_max):
        row = {"itinerary": symbolic.word_str(orbit.generator), "period": orbit.period}
        try:
            fix = locate_periodic(stage, orbit)
            pts = pointwise_exponents(stage, fix)
        except (CoreViolation, NumericalFailure) as exc:
            row.update(passed=False, error=str(exc))
            rows.append(row)
            continue
        classes = symbolic.classify_periodic(orbit, a)
        expect = np.array([construction.class_value(c, params, max_level=K) for c in classes])
        dev_point = float(np.abs(pts - expect).max())
        n = len(pts)
        avg = np.array([math.fsum(pts[:, 0]) / n, math.fsum(pts[:, 1]) / n])
        target = construction.phi_periodic_rv(orbit, params, max_level=K)
        dev_avg = float(np.abs(avg - target).max())
        for i in range(n):
            w = symbolic.word_str(orbit.forward(i, K + a + 1))
            by_word.setdefault(w, []).append(pts[i])
        bad = [i for i in range(n) if np.abs(pts[i] - expect[i]).max() >= tol]
        row.update(
            passed=not bad and dev_avg < tol,
            max_point_deviation=dev_point,
            average_deviation=dev_avg,
            exponents=avg.tolist(),
            expected=target.tolist(),
            residual=fix.residual,
            core_clearance=fix.core_clearance,
            failing_points=bad,
        )
        worst_point = max(worst_point, dev_point)
        worst_avg = max(worst_avg, dev_avg)
        rows.append(row)
    spread = 0.0
    for vals in by_word.values():
        v = np.array(vals)
        spread = max(spread, float(np.ptp(v, axis=0).max()))
    passed = all(r["passed"] for r in rows) and spread < tol
    report = {
        "stage": K,
        "n_max": n_max,
        "tolerance": tol,
        "itineraries": len(rows),
        "passed": passed,
        "max_point_deviation": worst_point,
        "max_average_deviation": worst_avg,
        "forward_word_spread": spread,
        "rows": rows,
    }
    if strict and not passed:
        failing = [r["itinerary"] for r in rows if not r["passed"]]
        raise VerificationFailure(f"geometric exponents disagree on {failing}")
    return report
