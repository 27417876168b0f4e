"""Planar convex hulls and point/polygon predicates."""
from __future__ import annotations

import numpy as np


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points, tol: float = 0.0) -> np.ndarray:
    """Counterclockwise hull vertices by Andrew's monotone chain.

    Points are sorted lexicographically on (x, y).  A turn whose cross
    product is <= ``tol`` times the squared point-cloud diameter counts as
    collinear, and the middle point is dropped.  Duplicates are removed.
    """
    pts = sorted({(float(x), float(y)) for x, y in np.asarray(points, dtype=float).reshape(-1, 2)})
    if len(pts) <= 2:
        return np.array(pts, dtype=float).reshape(-1, 2)
    arr = np.array(pts)
    scale = float(np.ptp(arr, axis=0).max()) ** 2 or 1.0
    eps = tol * scale

    def chain(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and _cross(out[-2], out[-1], p) <= eps:
                out.pop()
            out.append(p)
        return out

    lower = chain(pts)
    upper = chain(reversed(pts))
    hull = lower[:-1] + upper[:-1]
    return np.array(hull, dtype=float)


def signed_edge_distances(poly: np.ndarray, w) -> np.ndarray:
    """Distance of ``w`` to each edge line of a ccw polygon, positive inside."""
    w = np.asarray(w, dtype=float)
    p = np.asarray(poly, dtype=float)
    q = np.roll(p, -1, axis=0)
    e = q - p
    length = np.hypot(e[:, 0], e[:, 1])
    cross = e[:, 0] * (w[1] - p[:, 1]) - e[:, 1] * (w[0] - p[:, 0])
    return cross / length


def segment_distance(p, q, w) -> float:
    p, q, w = (np.asarray(v, dtype=float) for v in (p, q, w))
    d = q - p
    L2 = float(d @ d)
    t = 0.0 if L2 == 0 else min(1.0, max(0.0, float((w - p) @ d) / L2))
    return float(np.linalg.norm(p + t * d - w))


def contains(poly: np.ndarray, w, tol: float = 0.0) -> bool:
    """``w`` lies in the closed convex polygon, up to ``tol`` in distance.

    Degenerate hulls (a point or a segment) are handled too.
    """
    poly = np.asarray(poly, dtype=float).reshape(-1, 2)
    if len(poly) == 0:
        return False
    if len(poly) == 1:
        return float(np.linalg.norm(poly[0] - np.asarray(w, float))) <= tol
    if len(poly) == 2:
        return segment_distance(poly[0], poly[1], w) <= tol
    return bool(signed_edge_distances(poly, w).min() >= -tol)


def distance_to_polygon(poly: np.ndarray, w) -> float:
    """Euclidean distance from ``w`` to the closed polygon (0 inside)."""
    poly = np.asarray(poly, dtype=float).reshape(-1, 2)
    if contains(poly, w):
        return 0.0
    n = len(poly)
    return min(segment_distance(poly[i], poly[(i + 1) % n], w) for i in range(n))
