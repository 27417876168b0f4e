"""Transfer operators, pressure and equilibrium measures for the depth-N potential.

Two equivalent presentations are provided:

* the de Bruijn operator on 3^N words, with the weight exp(<tilt, Phi_N(v)>)
  attached to the source vertex of every edge (power iteration);
* a lumped operator on O(N) states (index of the first 2, whether the symbols
  before it are all ones), exact because Phi_N only depends on that data and
  prepending a symbol updates it deterministically.

The lumped path is what the spectrum solvers use; tests pin it to the de
Bruijn path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import construction, symbolic
from .construction import ConstructionParams
from .errors import InvalidArgument, NumericalFailure

POWER_TOL = 1e-12
POWER_MAXITER = 200000


@dataclass(frozen=True)
class TiltedOperator:
    graph: symbolic.DeBruijnGraph
    tilt: tuple
    weights: np.ndarray  # exp(<tilt, Phi_N(v)> - shift)
    shift: float

    @property
    def matrix(self) -> sp.csr_matrix:
        A = self.graph.adjacency
        return sp.csr_matrix(sp.diags(self.weights) @ A)


@dataclass
class EquilibriumData:
    tilt: tuple
    rho: float
    log_rho: float
    rv: np.ndarray
    entropy: float
    right_vec: Optional[np.ndarray] = None
    left_vec: Optional[np.ndarray] = None
    vertex_measure: Optional[np.ndarray] = None
    edge_measure: Optional[np.ndarray] = None
    iterations: int = 0

    def summary(self) -> dict:
        return {
            "tilt": list(self.tilt),
            "rho": self.rho,
            "log_rho": self.log_rho,
            "rv": self.rv.tolist(),
            "entropy": self.entropy,
        }


@lru_cache(maxsize=32)
def _debruijn_data(params: ConstructionParams, N: int):
    g = symbolic.build_debruijn(N)
    return g, construction.phi_values(g, params)


def tilted_operator(p: float, q: float, params: ConstructionParams, N: int) -> TiltedOperator:
    if not (math.isfinite(p) and math.isfinite(q)):
        raise InvalidArgument("tilt must be finite")
    g, phi = _debruijn_data(params, N)
    expo = p * phi[:, 0] + q * phi[:, 1]
    shift = float(expo.max())
    return TiltedOperator(g, (p, q), np.exp(expo - shift), shift)


def _perron_power(M, transpose=False, tol=POWER_TOL, maxiter=POWER_MAXITER):
    """Perron root and vector of a primitive nonnegative matrix by power iteration.

    Stops when the Collatz-Wielandt bracket min_i (Mx)_i/x_i <= rho <=
    max_i (Mx)_i/x_i has relative width below ``tol``.
    """
    op = M.T.tocsr() if transpose else M
    x = np.ones(M.shape[0])
    lo = hi = np.nan
    for it in range(1, maxiter + 1):
        y = op @ x
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = y / x
        pos = x > 0
        lo, hi = ratio[pos].min(), ratio[pos].max()
        s = y.sum()
        if not (s > 0 and np.isfinite(s)):
            raise NumericalFailure("power iteration lost positivity", iterations=it)
        x = y / s
        if hi - lo <= tol * hi:
            return 0.5 * (lo + hi), x, it
    raise NumericalFailure(
        "power iteration did not converge", iterations=maxiter, bracket=(float(lo), float(hi))
    )


def pressure(p: float, q: float, params: ConstructionParams, N: int, method: str = "debruijn") -> float:
    """Topological pressure of p*phi_1 + q*phi_2 for the depth-N potential."""
    if method == "lumped":
        return LumpedModel.get(params, N).log_rho(p, q)
    if method != "debruijn":
        raise InvalidArgument(f"unknown method {method!r}")
    op = tilted_operator(p, q, params, N)
    rho, _, _ = _perron_power(op.matrix)
    return math.log(rho) + op.shift


def equilibrium(p: float, q: float, params: ConstructionParams, N: int, method: str = "debruijn") -> EquilibriumData:
    """Equilibrium (Gibbs-Markov) measure of the tilted potential.

    On the de Bruijn graph the entropy is the Markov entropy of the edge
    measure, computed independently of the pressure, so the Gibbs identity
    entropy + <tilt, rv> = log_rho is a genuine check.
    """
    if method == "lumped":
        return LumpedModel.get(params, N).equilibrium(p, q)
    if method != "debruijn":
        raise InvalidArgument(f"unknown method {method!r}")
    op = tilted_operator(p, q, params, N)
    M = op.matrix
    rho, r, it1 = _perron_power(M)
    rho_l, l, it2 = _perron_power(M, transpose=True)
    rho = 0.5 * (rho + rho_l)
    pi = l * r
    pi /= pi.sum()
    l = l / (l @ r)
    g = op.graph
    edges = g.edges()
    src, dst = edges[:, 0], edges[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        trans = np.where(r[src] > 0, op.weights[src] * r[dst] / (rho * r[src]), 0.0)
    mu = pi[src] * trans
    pos = mu > 0
    entropy = -float(np.sum(mu[pos] * np.log(trans[pos])))
    _, phi = _debruijn_data(params, N)
    rv = pi @ phi
    log_rho = math.log(rho) + op.shift
    return EquilibriumData(
        tilt=(p, q),
        rho=_exp(log_rho),
        log_rho=log_rho,
        rv=rv,
        entropy=entropy,
        right_vec=r,
        left_vec=l,
        vertex_measure=pi,
        edge_measure=mu,
        iterations=max(it1, it2),
    )


def _exp(x):
    return math.exp(x) if x < 709 else math.inf


def pressure_gradient(p: float, q: float, params: ConstructionParams, N: int, method: str = "debruijn") -> np.ndarray:
    """Gradient of the pressure, i.e. the rotation vector of the equilibrium measure."""
    return equilibrium(p, q, params, N, method).rv


# -- lumped presentation ------------------------------------------------------


def lumped_states(N: int):
    """States (j, ones) for the first-2 index j < N, then ``None`` for no 2."""
    states = [(0, True)]
    for j in range(1, N):
        states += [(j, True), (j, False)]
    states.append(None)
    return states


def lumped_state_class(state, alpha: int) -> symbolic.PrefixClass:
    if state is None:
        return symbolic.X_INFINITY
    j, ones = state
    return symbolic._class_from_first_two(j, ones, alpha)


def lumped_state_sizes(N: int) -> np.ndarray:
    """Number of depth-N words in each lumped state."""
    out = []
    for st in lumped_states(N):
        if st is None:
            out.append(2**N)
        else:
            j, ones = st
            out.append((1 if ones else 2**j - 1) * 3 ** (N - j - 1))
    return np.array(out, dtype=float)


def lumped_counts(N: int) -> np.ndarray:
    """Q[x, y] = number of symbols s whose prepending sends state x to state y."""
    states = lumped_states(N)
    index = {st: i for i, st in enumerate(states)}
    Q = np.zeros((len(states), len(states)))
    for st in states:
        short = None if st is None or st[0] == N - 1 else st
        for s in symbolic.ALPHABET:
            if s == 2:
                new = (0, True)
            elif short is None:
                new = None
            else:
                j, ones = short
                new = (j + 1, ones and s == 1)
            Q[index[st], index[new]] += 1
    return Q


def _perron_squaring(M, maxsq=80):
    """Right/left Perron vectors of a small primitive matrix by repeated squaring.

    M^(2^j), renormalized, converges to the rank-one projector r l^T at a
    doubly exponential rate, which stays stable for tilts with huge
    dynamic range where dense eigensolvers lose the Perron root.
    """
    B = M / M.max()
    for _ in range(maxsq):
        B2 = B @ B
        m = B2.max()
        if not (m > 0 and np.isfinite(m)):
            raise NumericalFailure("squaring lost positivity")
        B2 /= m
        if np.max(np.abs(B2 - B)) < 1e-15:
            B = B2
            break
        B = B2
    else:
        raise NumericalFailure("repeated squaring did not converge")
    i, j = np.unravel_index(np.argmax(B), B.shape)
    r = B[:, j].copy()
    l = B[i, :].copy()
    for _ in range(3):
        r = M @ r
        r /= r.max()
        l = l @ M
        l /= l.max()
    rho = float(l @ M @ r) / float(l @ r)
    return rho, r, l


class LumpedModel:
    """Depth-N pressure on the lumped state space for a fixed parameter set."""

    _cache: dict = {}

    def __init__(self, params: ConstructionParams, N: int):
        if N < 1:
            raise InvalidArgument("depth must be >= 1")
        self.params, self.N = params, N
        self.states = lumped_states(N)
        self.Q = lumped_counts(N)
        self.phi = np.array([construction.class_value(lumped_state_class(s, params.alpha), params) for s in self.states])

    @classmethod
    def get(cls, params: ConstructionParams, N: int) -> "LumpedModel":
        key = (params, N)
        if key not in cls._cache:
            if len(cls._cache) > 64:
                cls._cache.clear()
            cls._cache[key] = cls(params, N)
        return cls._cache[key]

    def _solve(self, p, q):
        if not (math.isfinite(p) and math.isfinite(q)):
            raise InvalidArgument("tilt must be finite")
        expo = p * self.phi[:, 0] + q * self.phi[:, 1]
        shift = float(expo.max())
        M = self.Q * np.exp(expo - shift)[None, :]
        rho, r, l = _perron_squaring(M)
        return rho, shift, r, l

    def log_rho(self, p, q) -> float:
        rho, shift, _, _ = self._solve(p, q)
        return math.log(rho) + shift

    def evaluate(self, p, q):
        """(pressure, rotation vector) at the tilt (p, q)."""
        rho, shift, r, l = self._solve(p, q)
        pi = l * r
        pi /= pi.sum()
        return math.log(rho) + shift, pi @ self.phi

    def equilibrium(self, p, q) -> EquilibriumData:
        rho, shift, r, l = self._solve(p, q)
        pi = l * r
        pi /= pi.sum()
        rv = pi @ self.phi
        log_rho = math.log(rho) + shift
        return EquilibriumData(
            tilt=(p, q),
            rho=_exp(log_rho),
            log_rho=log_rho,
            rv=rv,
            entropy=log_rho - p * rv[0] - q * rv[1],
            right_vec=r,
            left_vec=l,
            vertex_measure=pi,
        )
