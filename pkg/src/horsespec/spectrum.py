"""Localized entropy spectrum H_N(w) of the depth-N potential.

Two solvers are provided:

* the dual, min over tilts of P(p, q) - p w1 - q w2, by projected Newton on a
  box of tilts (the production path; any tilt gives an upper bound);
* the primal, a maximum-entropy program over stationary edge measures of the
  de Bruijn graph, solved with cvxpy (the oracle at small depth).

Also here: the inner approximation of the rotation set from periodic orbits
and the report probing the jump of H at w_inf.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import cvxpy as cp
import numpy as np
import scipy.sparse as sp

from . import construction, geometry, symbolic, thermo
from .construction import ConstructionParams, DEFAULTS
from .errors import Infeasible, InvalidArgument, NumericalFailure, ResourceLimit

INTERIOR = "interior-attained"
BOUNDARY = "boundary-limit"
INFEASIBLE = "infeasible"

PRIMAL_MAX_DEPTH = 6
PRIMAL_EDGE_CAP = 3 ** (PRIMAL_MAX_DEPTH + 1)
FACE_TOL = 1e-9


@dataclass(frozen=True)
class SpectrumQuery:
    w: tuple
    N: int
    dual_radius: float = 200.0
    tol: float = 1e-8
    params: ConstructionParams = DEFAULTS

    def __post_init__(self):
        w = tuple(float(c) for c in self.w)
        if len(w) != 2 or not all(math.isfinite(c) for c in w):
            raise InvalidArgument("w must be a finite point of R^2")
        object.__setattr__(self, "w", w)
        if not self.tol > 0:
            raise InvalidArgument("tol must be positive")
        if not self.dual_radius > 0:
            raise InvalidArgument("dual_radius must be positive")
        if int(self.N) != self.N or self.N < 1:
            raise InvalidArgument("N must be a positive integer")


@dataclass
class SpectrumResult:
    value: float
    dual_point: tuple
    status: str
    gap_estimate: float = float("nan")
    grad_norm: float = float("nan")
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "dual_point": list(self.dual_point),
            "status": self.status,
            "gap_estimate": self.gap_estimate,
            "grad_norm": self.grad_norm,
            "iterations": self.iterations,
        }


@dataclass
class PrimalResult:
    value: float
    residual: float
    vertex_measure: np.ndarray
    edge_measure: np.ndarray
    kept_vertices: np.ndarray
    solver_status: str

    def __float__(self):
        return self.value


@dataclass(frozen=True)
class RotationPolygon:
    vertices: np.ndarray
    source_period: int
    points: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def contains(self, w, tol: float = 1e-12) -> bool:
        return geometry.contains(self.vertices, w, tol)

    def distance(self, w) -> float:
        return geometry.distance_to_polygon(self.vertices, w)

    def has_vertex(self, w, tol: float = 0.0) -> bool:
        return bool(np.any(np.max(np.abs(self.vertices - np.asarray(w, float)), axis=1) <= tol))

    def to_dict(self) -> dict:
        return {"source_period": self.source_period, "vertices": self.vertices.tolist()}


# -- value hull ---------------------------------------------------------------


def value_set(params: ConstructionParams, N: int) -> np.ndarray:
    """Distinct values of Phi_N, ordered as the truncation classes."""
    vals = [construction.class_value(c, params) for c in construction.truncation_classes(N, params.alpha)]
    return np.array(vals)


def value_hull(params: ConstructionParams, N: int) -> np.ndarray:
    return geometry.convex_hull(value_set(params, N), tol=1e-14)


# -- dual ---------------------------------------------------------------------


def _fd_hessian(grad, t, h):
    H = np.empty((2, 2))
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        H[:, j] = (grad(t + e) - grad(t - e)) / (2 * h)
    return 0.5 * (H + H.T)


ATTAIN_STEP = 1e-2


def _attained(grad, t, g) -> bool:
    """Is the stationary point a genuine minimizer rather than a point on an escape ray?

    Along a ray to a boundary point of the rotation set the gradient and the
    curvature decay at the same exponential rate, so the Newton step stays of
    order one; at an attained minimizer it is of the size of the residual.
    """
    h = 1e-5 * max(1.0, float(np.abs(t).max()))
    H = _fd_hessian(grad, t, h)
    evals = np.linalg.eigvalsh(H)
    if not evals.min() > 0:
        return False
    return float(np.linalg.norm(np.linalg.solve(H, g))) < ATTAIN_STEP


def entropy_spectrum_dual(query: SpectrumQuery, maxiter: int = 500) -> SpectrumResult:
    """Upper bound (tight in the interior) for H_N(w) by Legendre duality.

    F(t) = P(t) - <t, w> is convex; any t gives F(t) >= H_N(w).  F is
    minimized over the box |t_i| <= dual_radius by projected Newton with a
    finite-difference Hessian of the (exact) gradient rv(t) - w, falling back
    to projected gradient steps when the Newton direction fails to descend.
    """
    params, N, R, tol = query.params, query.N, query.dual_radius, query.tol
    w = np.array(query.w)
    hull = value_hull(params, N)
    if not geometry.contains(hull, w, tol):
        return SpectrumResult(float("nan"), (float("nan"), float("nan")), INFEASIBLE)

    model = thermo.LumpedModel.get(params, N)

    def evaluate(t):
        P, rv = model.evaluate(float(t[0]), float(t[1]))
        return P - float(t @ w), rv - w

    def grad(t):
        return evaluate(np.clip(t, -R, R))[1]

    t = np.zeros(2)
    f, g = evaluate(t)
    edge = 1e-12 * R
    it = 0
    for it in range(1, maxiter + 1):
        at_hi = t >= R - edge
        at_lo = t <= -R + edge
        free = ~((at_hi & (g < 0)) | (at_lo & (g > 0)))
        pg = np.where(free, g, 0.0)
        if np.linalg.norm(pg) < tol:
            break
        h = 1e-5 * max(1.0, float(np.abs(t).max()))
        d = -pg
        if free.any():
            H = _fd_hessian(grad, t, h)[np.ix_(free, free)]
            evals = np.linalg.eigvalsh(H)
            if evals.min() > 1e-14 * max(1.0, evals.max()):
                d = np.zeros(2)
                d[free] = -np.linalg.solve(H, g[free])
        if d @ g >= 0:
            d = -pg
        accepted = False
        for _ in range(60):
            t_new = np.clip(t + d, -R, R)
            step = t_new - t
            if not step.any():
                break
            f_new, g_new = evaluate(t_new)
            if f_new <= f + 1e-4 * float(g @ step):
                accepted = True
                break
            d = 0.5 * d
        if not accepted and not np.array_equal(d, -pg):
            d = -pg / max(1.0, np.linalg.norm(pg))
            for _ in range(80):
                t_new = np.clip(t + d, -R, R)
                step = t_new - t
                f_new, g_new = evaluate(t_new)
                if f_new <= f + 1e-4 * float(g @ step) and step.any():
                    accepted = True
                    break
                d = 0.5 * d
        if not accepted:
            break
        t, f, g = t_new, f_new, g_new
    else:
        raise NumericalFailure("dual solver hit the iteration cap", point=t.tolist(), value=f)

    on_box = bool(np.any(np.abs(t) >= R - edge))
    gnorm = float(np.linalg.norm(g))
    if f < -tol:
        return SpectrumResult(float("nan"), tuple(t), INFEASIBLE, grad_norm=gnorm, iterations=it)
    if on_box:
        status = BOUNDARY
    elif gnorm < tol:
        status = INTERIOR if _attained(grad, t, g) else BOUNDARY
    elif f < 10 * tol or gnorm < 1e-6:
        # stalled at machine precision next to the boundary of the rotation set
        status = BOUNDARY
    else:
        raise NumericalFailure("dual solver stalled", point=t.tolist(), grad_norm=gnorm, value=f)
    return SpectrumResult(max(f, 0.0), (float(t[0]), float(t[1])), status, grad_norm=gnorm, iterations=it)


# -- primal -------------------------------------------------------------------


def _face_reduce(values: np.ndarray, w: np.ndarray, tol: float) -> np.ndarray:
    """Mask of values that can carry mass when the average must equal ``w``.

    If ``w`` lies on a proper face of conv(values), every value strictly off
    that face must get zero weight.  Repeats until ``w`` is in the relative
    interior of the hull of the surviving values.
    """
    keep = np.ones(len(values), dtype=bool)
    while True:
        pts = values[keep]
        hull = geometry.convex_hull(pts, tol=1e-14)
        if len(hull) == 1:
            if np.linalg.norm(hull[0] - w) > tol:
                raise Infeasible("w differs from the only admissible value")
            return keep
        if len(hull) == 2:
            p, q = hull
            d = q - p
            L = float(np.linalg.norm(d))
            off = abs(d[0] * (w[1] - p[1]) - d[1] * (w[0] - p[0])) / L
            s = float((w - p) @ d) / L
            if off > tol or s < -tol or s > L + tol:
                raise Infeasible("w lies outside the admissible segment")
            if s <= tol:
                new = keep & (np.linalg.norm(values - p, axis=1) <= tol)
            elif s >= L - tol:
                new = keep & (np.linalg.norm(values - q, axis=1) <= tol)
            else:
                return keep
        else:
            dist = geometry.signed_edge_distances(hull, w)
            if dist.min() < -tol:
                raise Infeasible("w lies outside the hull of the potential values")
            if dist.min() > tol:
                return keep
            i = int(np.argmin(dist))
            on = _line_distances(hull[i], hull[(i + 1) % len(hull)], values)
            new = keep & (np.abs(on) <= tol)
        if new.sum() == keep.sum():
            return keep
        keep = new


def _line_distances(p, q, pts):
    d = q - p
    return (d[0] * (pts[:, 1] - p[1]) - d[1] * (pts[:, 0] - p[0])) / np.linalg.norm(d)


def _recurrent_core(graph: symbolic.DeBruijnGraph, keep: np.ndarray) -> np.ndarray:
    """Drop kept vertices with no kept predecessor or successor, to a fixed point."""
    succ = graph.successors
    keep = keep.copy()
    while True:
        out_ok = keep[succ].any(axis=1)
        indeg = np.zeros(graph.n_vertices, dtype=int)
        src = np.repeat(np.arange(graph.n_vertices), 3)
        mask = keep[src] & keep[succ.ravel()]
        np.add.at(indeg, succ.ravel()[mask], 1)
        new = keep & out_ok & (indeg > 0)
        if new.sum() == keep.sum():
            return new
        keep = new


def _admissible_vertices(params, N, w, graph, phi, presolve):
    keep = np.ones(graph.n_vertices, dtype=bool)
    if not presolve:
        return keep
    while True:
        uniq, inv = np.unique(phi[keep], axis=0, return_inverse=True)
        vmask = _face_reduce(uniq, w, FACE_TOL)
        new = keep.copy()
        new[np.flatnonzero(keep)[~vmask[inv.ravel()]]] = False
        new = _recurrent_core(graph, new)
        if not new.any():
            raise Infeasible("no recurrent vertex carries an admissible value")
        if new.sum() == keep.sum():
            return keep
        keep = new


def _constraint_system(phi_k, w, S_out, S_in):
    """Equality rows: total mass, flow balance minus one row, projected rv."""
    n_k, m = S_out.shape
    center = phi_k.mean(axis=0)
    _, sv, Vt = np.linalg.svd(phi_k - center, full_matrices=False)
    rank = int(np.sum(sv > 1e-12 * max(1.0, sv.max(initial=0.0))))
    B = Vt[:rank].T
    rows = [sp.csr_matrix(np.ones((1, m)))]
    if n_k > 1:
        rows.append((S_out - S_in)[:-1])
    rhs = [np.ones(1), np.zeros(max(n_k - 1, 0))]
    if rank:
        rows.append(sp.csr_matrix(((phi_k - center) @ B).T @ S_out))
        rhs.append((w - center) @ B)
    return sp.vstack(rows).tocsr(), np.concatenate(rhs)


def _polish(mu, A, b, sweeps=60):
    """Weighted least-change projection onto {A mu = b}, keeping zeros at zero.

    The correction D A^T (A D A^T)^+ r with D = diag(mu) is multiplicative,
    so it is damped to keep every entry at least half its current value.
    """
    for _ in range(sweeps):
        r = b - A @ mu
        if np.abs(r).max() < 1e-15:
            break
        AD = A.multiply(mu[None, :]).tocsr()
        G = (AD @ A.T).toarray()
        y = np.linalg.lstsq(G, r, rcond=None)[0]
        step = A.T @ y
        low = step.min()
        scale = 1.0 if low >= -0.5 else -0.5 / low
        mu = mu * (1.0 + scale * step)
    return mu


def entropy_spectrum_primal(query: SpectrumQuery, presolve: bool = True, solver: str = "CLARABEL") -> PrimalResult:
    """Maximum Markov entropy over stationary edge measures with rotation vector w.

    The optimum over all invariant measures of a depth-N locally constant
    potential is attained by an order-N Markov measure, i.e. a stationary
    edge measure on the de Bruijn graph, so this equals H_N(w).
    """
    params, N = query.params, query.N
    w = np.array(query.w)
    graph, phi = thermo._debruijn_data(params, N)
    if N > PRIMAL_MAX_DEPTH and not presolve:
        raise ResourceLimit(f"the primal program is capped at depth {PRIMAL_MAX_DEPTH}")
    keep = _admissible_vertices(params, N, w, graph, phi, presolve)

    idx = np.flatnonzero(keep)
    pos = -np.ones(graph.n_vertices, dtype=np.int64)
    pos[idx] = np.arange(idx.size)
    edges = graph.edges()
    emask = keep[edges[:, 0]] & keep[edges[:, 1]]
    e_src, e_dst = pos[edges[emask, 0]], pos[edges[emask, 1]]
    m, n_k = int(emask.sum()), idx.size
    if m > PRIMAL_EDGE_CAP:
        raise ResourceLimit(f"{m} edges exceed the primal cap {PRIMAL_EDGE_CAP}")
    S_out = sp.csr_matrix((np.ones(m), (e_src, np.arange(m))), shape=(n_k, m))
    S_in = sp.csr_matrix((np.ones(m), (e_dst, np.arange(m))), shape=(n_k, m))
    phi_k = phi[idx]
    A, b = _constraint_system(phi_k, w, S_out, S_in)

    mu = cp.Variable(m, nonneg=True)
    src_mass = S_out.T @ S_out  # (m, m): mass of the source vertex of each edge
    objective = cp.Maximize(-cp.sum(cp.rel_entr(mu, src_mass @ mu)))
    prob = cp.Problem(objective, [A @ mu == b])
    try:
        prob.solve(solver=solver)
    except cp.error.SolverError as exc:
        raise NumericalFailure(f"primal solver failed: {exc}") from exc
    if prob.status in ("infeasible", "infeasible_inaccurate"):
        raise Infeasible("the primal program is infeasible")
    if mu.value is None or prob.status not in ("optimal", "optimal_inaccurate"):
        raise NumericalFailure(f"primal solver returned status {prob.status}")

    x = np.maximum(np.asarray(mu.value, dtype=float), 0.0)
    x = _polish(x, A, b)
    if (x < 0).any():
        raise NumericalFailure("polishing left the nonnegative orthant")

    pi_k = S_out @ x
    src_pi = pi_k[e_src]
    nz = x > 0
    value = -float(np.sum(x[nz] * np.log(x[nz] / src_pi[nz])))

    edge_full = np.zeros(len(edges))
    edge_full[emask] = x
    vertex_full = np.zeros(graph.n_vertices)
    vertex_full[idx] = pi_k
    flow = np.abs(_flow_residual(graph, edge_full))
    residual = max(
        abs(edge_full.sum() - 1.0),
        float(flow.max()),
        float(np.abs(vertex_full @ phi - w).max()),
    )
    return PrimalResult(value, residual, vertex_full, edge_full, keep, prob.status)


def _flow_residual(graph, edge_measure):
    edges = graph.edges()
    out = np.bincount(edges[:, 0], weights=edge_measure, minlength=graph.n_vertices)
    inn = np.bincount(edges[:, 1], weights=edge_measure, minlength=graph.n_vertices)
    return out - inn


# -- rotation set -------------------------------------------------------------


def periodic_rotation_vectors(n_max: int, params: ConstructionParams) -> np.ndarray:
    return np.array([construction.phi_periodic_rv(o, params) for o in symbolic.enumerate_periodic(n_max)])


def rotation_set_hull(n_max: int, params: ConstructionParams = DEFAULTS) -> RotationPolygon:
    """Inner approximation of the rotation set: hull of periodic-orbit averages."""
    if n_max < 1:
        raise InvalidArgument("n_max must be >= 1")
    if n_max > 14:
        raise ResourceLimit("n_max is capped at 14")
    pts = periodic_rotation_vectors(n_max, params)
    return RotationPolygon(geometry.convex_hull(pts, tol=1e-13), n_max, pts)


# -- discontinuity probe ------------------------------------------------------


def discontinuity_probe(L: int, N: int, params: ConstructionParams = DEFAULTS, dual_radius: float = 200.0) -> dict:
    """Upper bounds for H_N(w_l), l = 1..L, against H_N(w_inf); JSON-ready."""
    if L < 1:
        raise InvalidArgument("L must be >= 1")
    if L + params.alpha + 1 > N:
        raise InvalidArgument(f"w_{L} needs depth {L + params.alpha + 1} > N = {N}")
    fam = construction.make_vertices(params, L)
    rows = []
    for ell in range(1, L + 1):
        wl = fam.w[ell - 1]
        res = entropy_spectrum_dual(SpectrumQuery(tuple(wl), N, dual_radius=dual_radius, params=params))
        rows.append(
            {
                "l": ell,
                "w": list(map(float, wl)),
                "H_upper": res.value,
                "status": res.status,
                "dual_point": list(res.dual_point),
                "distance_to_w_inf": float(np.linalg.norm(wl - fam.w_inf)),
            }
        )
    prim = entropy_spectrum_primal(SpectrumQuery(tuple(fam.w_inf), N, params=params))
    worst = max(r["H_upper"] for r in rows)
    return {
        "N": N,
        "L": L,
        "dual_radius": dual_radius,
        "w_inf": list(map(float, fam.w_inf)),
        "H_w_inf": prim.value,
        "H_w_inf_residual": prim.residual,
        "levels": rows,
        "max_H_upper": worst,
        "gap": prim.value - worst,
    }


# -- grids --------------------------------------------------------------------


def _grid_row(args):
    x, y, N, params, dual_radius, tol = args
    q = SpectrumQuery((x, y), N, dual_radius=dual_radius, tol=tol, params=params)
    try:
        r = entropy_spectrum_dual(q)
    except NumericalFailure:
        nan = float("nan")
        return {"w1": x, "w2": y, "H": nan, "status": "numerical-failure", "p": nan, "q": nan}
    return {"w1": x, "w2": y, "H": r.value, "status": r.status, "p": r.dual_point[0], "q": r.dual_point[1]}


def spectrum_grid(params: ConstructionParams, N: int, shape=(16, 16), extra_points=(), dual_radius=200.0, tol=1e-8, workers=1):
    """Dual spectrum on a row-major grid over the bounding box of the value hull.

    Returns a list of dicts (w1, w2, H, status, p, q); grid points come
    first (rows of constant w2, w1 increasing), then ``extra_points``.
    Solver failures are recorded with status ``numerical-failure``.  With
    ``workers > 1`` the points are solved on a thread pool sharing the
    cached lumped operator; rows are still returned in canonical order.
    """
    W, H = shape
    if not (1 <= W <= 512 and 1 <= H <= 512):
        raise InvalidArgument("grid resolution must lie in 1..512")
    hull = value_hull(params, N)
    lo, hi = hull.min(axis=0), hull.max(axis=0)
    xs = np.linspace(lo[0], hi[0], W) if W > 1 else np.array([0.5 * (lo[0] + hi[0])])
    ys = np.linspace(lo[1], hi[1], H) if H > 1 else np.array([0.5 * (lo[1] + hi[1])])
    pts = [(float(x), float(y)) for y in ys for x in xs] + [tuple(map(float, p)) for p in extra_points]
    jobs = [(x, y, N, params, dual_radius, tol) for x, y in pts]
    thermo.LumpedModel.get(params, N)  # warm the shared cache before fanning out
    if workers <= 1:
        return [_grid_row(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_grid_row, jobs))
