"""Free constants, the concave profile, the vertex family and the potential.

The potential takes four kinds of values, keyed by the class of a forward
itinerary (see :mod:`horsespec.symbolic`)::

    X0Alpha   -> w0     = (b, h(a))
    U(k)      -> u_k    = (x_k, h(a))
    V(k)      -> v_k    = (x_k, h(x_k))
    XInfinity -> w_inf  = (a, h(a))

with a = -log(delta_inf), b = -log(delta_0 * delta_inf) and the decreasing
sequence x_k = a + (b - a) * x_scale * theta**k.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import symbolic
from .errors import ConfigurationError, DomainError, InvalidArgument
from .symbolic import PrefixClass, PeriodicItinerary


@dataclass(frozen=True)
class ConstructionParams:
    lambda_inf: float = 4.0
    delta_inf: float = 0.2
    delta_0: float = 0.5
    alpha: int = 1
    theta: float = 0.5
    C: Optional[float] = None
    h_beta: float = 0.5
    x_scale: float = 0.5
    N_default: int = 8
    K_default: int = 2
    eps_0: float = 1e-2
    auto_C: bool = field(default=False, init=False, compare=False, repr=False)

    def __post_init__(self):
        if not self.lambda_inf > 3:
            raise ConfigurationError("lambda_inf must exceed 3")
        if not 0 < self.delta_inf < 1 / 3:
            raise ConfigurationError("delta_inf must lie in (0, 1/3)")
        if not 0 < self.delta_0 < 1:
            raise ConfigurationError("delta_0 must lie in (0, 1)")
        if int(self.alpha) != self.alpha or self.alpha < 0:
            raise ConfigurationError("alpha must be a non-negative integer")
        object.__setattr__(self, "alpha", int(self.alpha))
        if not 0 < self.theta < 1:
            raise ConfigurationError("theta must lie in (0, 1)")
        if not self.h_beta > 0:
            raise ConfigurationError("h_beta must be positive")
        if not 0 < self.x_scale < 1:
            raise ConfigurationError("x_scale must lie in (0, 1)")
        if not self.eps_0 > 0:
            raise ConfigurationError("eps_0 must be positive")
        if self.N_default < 1 or self.K_default < 0:
            raise ConfigurationError("N_default >= 1 and K_default >= 0 required")
        if self.C is None:
            object.__setattr__(self, "auto_C", True)
            c = (self.b - self.a) * self.x_scale * (1 + self.h_beta)
            object.__setattr__(self, "C", c)
        if not self.C > 0:
            raise ConfigurationError("C must be positive")
        if not self.a < self.b:
            raise ConfigurationError("need a < b")
        if not self.h(self.a) > math.log(3):
            raise ConfigurationError("h(a) must exceed log 3")

    @property
    def a(self) -> float:
        return -math.log(self.delta_inf)

    @property
    def b(self) -> float:
        return -math.log(self.delta_0 * self.delta_inf)

    def h(self, x: float) -> float:
        return math.log(self.lambda_inf) + self.h_beta * math.log1p(x - self.a)

    def x_seq(self, k: int) -> float:
        return self.a + (self.b - self.a) * self.x_scale * self.theta**k

    def with_x_scale(self, x_scale: float) -> "ConstructionParams":
        """Copy with a new ``x_scale``; a derived C is recomputed."""
        return dataclasses.replace(self, x_scale=x_scale, C=None if self.auto_C else self.C)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.init}
        if self.auto_C:
            d["C"] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConstructionParams":
        known = {f.name for f in dataclasses.fields(cls) if f.init}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown parameters: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc


DEFAULTS = ConstructionParams()


def h_eval(x: float, params: ConstructionParams) -> float:
    """Concave profile h(x) = log(lambda_inf) + beta * log(1 + (x - a)) on [a, b]."""
    a, b = params.a, params.b
    tol = 1e-12 * max(1.0, abs(b))
    if not a - tol <= x <= b + tol:
        raise DomainError(f"x = {x} outside [a, b] = [{a}, {b}]")
    return params.h(x)


@dataclass(frozen=True)
class VertexFamily:
    """Points w0, w_inf and the sequences x_l, u_l, v_l, w_l for l = 1..L.

    Arrays are 0-based: ``v[l - 1]`` is v_l.
    """

    w0: np.ndarray
    w_inf: np.ndarray
    x: np.ndarray
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    alpha: int

    @property
    def L(self) -> int:
        return len(self.x)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "w0": self.w0.tolist(),
            "w_inf": self.w_inf.tolist(),
            "x": self.x.tolist(),
            "u": self.u.tolist(),
            "v": self.v.tolist(),
            "w": self.w.tolist(),
        }


def make_vertices(params: ConstructionParams, L: int) -> VertexFamily:
    """Build the vertex family up to index L and check ||v_l - w_inf|| < C theta^l."""
    if L < 1:
        raise InvalidArgument("L must be >= 1")
    a, b, ha = params.a, params.b, params.h(params.a)
    al = params.alpha
    x = np.array([params.x_seq(l) for l in range(1, L + 1)])
    u = np.column_stack([x, np.full(L, ha)])
    v = np.column_stack([x, [params.h(t) for t in x]])
    w0 = np.array([b, ha])
    w_inf = np.array([a, ha])
    for l in range(1, L + 1):
        if not np.linalg.norm(v[l - 1] - w_inf) < params.C * params.theta**l:
            raise ConfigurationError(f"decay bound ||v_l - w_inf|| < C theta^l fails at l = {l}")
    w = np.empty((L, 2))
    for l in range(1, L + 1):
        for c in range(2):
            terms = [(al + 1) * w0[c]] + list(v[:l, c])
            w[l - 1, c] = math.fsum(terms) / (l + al + 1)
    return VertexFamily(w0=w0, w_inf=w_inf, x=x, u=u, v=v, w=w, alpha=al)


def rates_from_x(x_k: float, params: ConstructionParams, k: Optional[int] = None):
    """Surgery rates (delta_k, lambda_k) realizing the point (x_k, h(x_k)).

    delta_k * delta_inf = exp(-x_k) and lambda_k * lambda_inf = exp(h(x_k)).
    When ``k`` is given, ||(-log delta_k, log lambda_k)|| < C theta^k is
    enforced.
    """
    a, b = params.a, params.b
    if not a < x_k < b:
        raise DomainError(f"x_k = {x_k} outside (a, b)")
    delta_k = math.exp(-x_k) / params.delta_inf
    lambda_k = math.exp(params.h(x_k)) / params.lambda_inf
    if k is not None:
        size = math.hypot(x_k - a, params.h(x_k) - params.h(a))
        if not size < params.C * params.theta**k:
            raise ConfigurationError(f"rate condition fails at level {k}: {size} >= C theta^k")
    return delta_k, lambda_k


def level_rates(params: ConstructionParams, k: int):
    return rates_from_x(params.x_seq(k), params, k)


def class_value(cls: PrefixClass, params: ConstructionParams, max_level: Optional[int] = None) -> np.ndarray:
    """Potential value attached to a class; levels above ``max_level`` map to w_inf."""
    ha = params.h(params.a)
    if cls.tag == "X0Alpha":
        return np.array([params.b, ha])
    if cls.tag == "XInfinity" or (max_level is not None and cls.k > max_level):
        return np.array([params.a, ha])
    xk = params.x_seq(cls.k)
    if cls.tag == "U":
        return np.array([xk, ha])
    return np.array([xk, params.h(xk)])


@dataclass(frozen=True)
class TruncatedPotential:
    """Depth-N locally constant potential, one value per class."""

    depth: int
    alpha: int
    value_of_class: dict
    error_bound: float

    def __call__(self, window) -> np.ndarray:
        w = symbolic.as_word(window)
        if len(w) < self.depth:
            raise InvalidArgument(f"window shorter than depth {self.depth}")
        return self.value_of_class[symbolic.classify_prefix(w[: self.depth], self.alpha)]


def truncation_classes(N: int, alpha: int) -> list:
    """All classes a length-N window can have."""
    out = [symbolic.X0_ALPHA, symbolic.X_INFINITY]
    for k in range(1, N - alpha):
        out += [symbolic.U(k), symbolic.V(k)]
    return out


def truncated_potential(params: ConstructionParams, N: int) -> TruncatedPotential:
    values = {c: class_value(c, params) for c in truncation_classes(N, params.alpha)}
    err = truncation_error(params, N) if N > params.alpha + 1 else float("nan")
    return TruncatedPotential(N, params.alpha, values, err)


def phi_eval(window, params: ConstructionParams, N: int) -> np.ndarray:
    w = symbolic.as_word(window)
    if N < 1 or len(w) < N:
        raise InvalidArgument(f"need a window of length >= N = {N}")
    return class_value(symbolic.classify_prefix(w[:N], params.alpha), params)


def phi_values(graph: symbolic.DeBruijnGraph, params: ConstructionParams) -> np.ndarray:
    """(3^N, 2) array of Phi_N at every vertex of ``graph``."""
    classes = symbolic.window_classes(graph, params.alpha)
    cache = {}
    out = np.empty((graph.n_vertices, 2))
    for i, c in enumerate(classes):
        if c not in cache:
            cache[c] = class_value(c, params)
        out[i] = cache[c]
    return out


def phi_periodic_rv(orbit, params: ConstructionParams, max_level: Optional[int] = None) -> np.ndarray:
    """Exact orbit average of the potential over a periodic itinerary.

    With ``max_level`` set, classes U(k), V(k) with k > max_level are valued
    w_inf (the potential seen by a finite horseshoe stage).
    """
    if not isinstance(orbit, PeriodicItinerary):
        orbit = PeriodicItinerary.of(orbit)
    vals = [class_value(c, params, max_level) for c in symbolic.classify_periodic(orbit, params.alpha)]
    vals = np.array(vals)
    return np.array([math.fsum(vals[:, 0]), math.fsum(vals[:, 1])]) / orbit.period


def truncation_error(params: ConstructionParams, N: int) -> float:
    """sup |Phi - Phi_N|: largest distance to w_inf among classes merged into XInfinity.

    Windows of length N without a 2 hide the classes U(k), V(k) with
    k >= N - alpha; since x_k decreases and v_k dominates u_k, the sup is
    ||v_{N-alpha} - w_inf||.
    """
    if N <= params.alpha + 1:
        raise InvalidArgument("truncation error needs N > alpha + 1")
    k = N - params.alpha
    xk = params.x_seq(k)
    return math.hypot(xk - params.a, params.h(xk) - params.h(params.a))


def lipschitz_bound(params: ConstructionParams) -> float:
    """Depth-independent Lipschitz constant of Phi_N for the theta-metric.

    Two windows agreeing on m >= alpha + 1 symbols but not identical both
    avoid 2 on that prefix, so both values lie within C theta^{m-alpha} of
    w_inf; for m <= alpha the diameter of the value set bounds the jump.
    """
    w0 = np.array([params.b, params.h(params.a)])
    winf = np.array([params.a, params.h(params.a)])
    diam = np.linalg.norm(w0 - winf) + params.C * params.theta
    return params.theta ** (-params.alpha) * max(2 * params.C, diam)


def empirical_lipschitz(params: ConstructionParams, N: int) -> float:
    """max ||Phi_N(xi) - Phi_N(eta)|| / d_theta(xi, eta) over all window pairs."""
    g = symbolic.build_debruijn(N)
    vals = phi_values(g, params)
    d = g.digits
    n = g.n_vertices
    best = 0.0
    step = max(1, 200000 // (n * N))
    for start in range(0, n, step):
        blk = d[start : start + step]
        neq = blk[:, None, :] != d[None, :, :]
        diff = neq.any(axis=2)
        first = neq.argmax(axis=2)
        dist = params.theta ** first.astype(float)
        jump = np.linalg.norm(vals[start : start + step, None, :] - vals[None, :, :], axis=2)
        ratio = np.where(diff, jump / dist, 0.0)
        best = max(best, float(ratio.max()))
    return best
