"""Combinatorics on the one-sided full shift over the alphabet {0, 1, 2}.

Words are stored as tuples of ints.  Anything accepted as a word (a tuple,
list, numpy array or an ASCII digit string such as ``"112"``) is normalized
with :func:`as_word`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgument, ResourceLimit

ALPHABET = (0, 1, 2)
SAFE = frozenset((0, 1))
N_MAX_DEFAULT = 10

Word = tuple


def as_word(w) -> tuple:
    if isinstance(w, str):
        if not all(c in "012" for c in w):
            raise InvalidArgument(f"word {w!r} has characters outside 0/1/2")
        return tuple(int(c) for c in w)
    out = tuple(int(s) for s in w)
    if any(s not in ALPHABET for s in out):
        raise InvalidArgument(f"word {out!r} has symbols outside 0/1/2")
    return out


def word_str(w: Sequence[int]) -> str:
    return "".join(str(int(s)) for s in w)


@dataclass(frozen=True, order=True)
class PrefixClass:
    """Class of a forward itinerary, read off from the position of its first 2.

    ``tag`` is one of ``"X0Alpha"``, ``"U"``, ``"V"``, ``"XInfinity"``; ``k``
    is the level for U/V and 0 otherwise.
    """

    tag: str
    k: int = 0

    def __post_init__(self):
        if self.tag in ("U", "V"):
            if self.k < 1:
                raise InvalidArgument("U(k)/V(k) need k >= 1")
        elif self.tag in ("X0Alpha", "XInfinity"):
            if self.k != 0:
                raise InvalidArgument(f"{self.tag} carries no level")
        else:
            raise InvalidArgument(f"unknown class tag {self.tag!r}")

    @property
    def is_surgery(self) -> bool:
        return self.tag in ("U", "V")

    def __str__(self):
        return f"{self.tag}({self.k})" if self.is_surgery else self.tag


X0_ALPHA = PrefixClass("X0Alpha")
X_INFINITY = PrefixClass("XInfinity")


def U(k: int) -> PrefixClass:
    return PrefixClass("U", k)


def V(k: int) -> PrefixClass:
    return PrefixClass("V", k)


def _class_from_first_two(j: int, prefix_all_ones: bool, alpha: int) -> PrefixClass:
    if j <= alpha:
        return X0_ALPHA
    k = j - alpha
    return V(k) if prefix_all_ones else U(k)


def classify_prefix(window, alpha: int) -> PrefixClass:
    """Classify a finite window by the index of its first symbol 2.

    A window containing no 2 is reported as ``XInfinity`` even though the
    infinite sequence it starts may contain a 2 further on; this is the
    truncation convention behind the depth-N potential.
    """
    w = as_word(window)
    if len(w) == 0:
        raise InvalidArgument("cannot classify an empty window")
    if alpha < 0:
        raise InvalidArgument("alpha must be non-negative")
    try:
        j = w.index(2)
    except ValueError:
        return X_INFINITY
    return _class_from_first_two(j, all(s == 1 for s in w[:j]), alpha)


@dataclass(frozen=True)
class PeriodicItinerary:
    """The periodic point O(t) = t t t ... generated by a finite word t."""

    generator: tuple
    primitive: bool = field(init=False)

    def __post_init__(self):
        g = as_word(self.generator)
        if not g:
            raise InvalidArgument("periodic generator must be non-empty")
        object.__setattr__(self, "generator", g)
        object.__setattr__(self, "primitive", smallest_period(g) == len(g))

    @classmethod
    def of(cls, w) -> "PeriodicItinerary":
        return cls(as_word(w))

    @property
    def period(self) -> int:
        return len(self.generator)

    def rotation(self, i: int) -> "PeriodicItinerary":
        n = self.period
        i %= n
        return PeriodicItinerary(self.generator[i:] + self.generator[:i])

    def canonical(self) -> "PeriodicItinerary":
        n = self.period
        return min((self.rotation(i) for i in range(n)), key=lambda p: p.generator)

    def forward(self, i: int, length: int) -> tuple:
        """Symbols xi_i ... xi_{i+length-1} of the periodic sequence."""
        g, n = self.generator, self.period
        return tuple(g[(i + t) % n] for t in range(length))

    def backward(self, i: int, length: int) -> tuple:
        """Symbols xi_{i-length} ... xi_{i-1}, oldest first."""
        g, n = self.generator, self.period
        return tuple(g[(i - length + t) % n] for t in range(length))

    def __str__(self):
        return f"O({word_str(self.generator)})"


def smallest_period(w: Sequence[int]) -> int:
    n = len(w)
    for d in range(1, n + 1):
        if n % d == 0 and all(w[i] == w[i % d] for i in range(n)):
            return d
    return n


def classify_periodic(orbit, alpha: int) -> list:
    """Exact class of every shift sigma^i O(t), i = 0..n-1."""
    if not isinstance(orbit, PeriodicItinerary):
        orbit = PeriodicItinerary.of(orbit)
    g, n = orbit.generator, orbit.period
    if 2 not in g:
        return [X_INFINITY] * n
    out = []
    for i in range(n):
        j = 0
        while g[(i + j) % n] != 2:
            j += 1
        ones = all(g[(i + t) % n] == 1 for t in range(j))
        out.append(_class_from_first_two(j, ones, alpha))
    return out


def word_distance(a, b, theta: float) -> float:
    """theta ** (first index where ``a`` and ``b`` disagree); 0 if they agree."""
    if not 0.0 < theta < 1.0:
        raise InvalidArgument("theta must lie in (0, 1)")
    a, b = as_word(a), as_word(b)
    if len(a) != len(b):
        raise InvalidArgument("itinerary prefixes must have equal length")
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return theta**i
    return 0.0


def lyndon_words(n_max: int) -> Iterable[tuple]:
    """Lyndon words over {0,1,2} of length <= n_max, lexicographic order (Duval)."""
    w = [-1]
    while w:
        w[-1] += 1
        yield tuple(w)
        m = len(w)
        while len(w) < n_max:
            w.append(w[len(w) - m])
        while w and w[-1] == 2:
            w.pop()


def enumerate_periodic(n_max: int) -> list:
    """One primitive itinerary per cyclic class, period <= n_max.

    Representatives are the lexicographically minimal rotations, ordered by
    period and then lexicographically.
    """
    if n_max < 1:
        raise InvalidArgument("n_max must be >= 1")
    words = sorted(lyndon_words(n_max), key=lambda w: (len(w), w))
    return [PeriodicItinerary(w) for w in words]


@dataclass(frozen=True)
class DeBruijnGraph:
    """Words of length N with edges w -> w[1:] + s.

    Vertex ``i`` is the word whose base-3 expansion (most significant symbol
    first) is ``i``, so the vertex order is lexicographic.
    """

    depth: int

    @property
    def n_vertices(self) -> int:
        return 3**self.depth

    @property
    def n_edges(self) -> int:
        return 3 ** (self.depth + 1)

    @cached_property
    def successors(self) -> np.ndarray:
        n = self.n_vertices
        i = np.arange(n, dtype=np.int64)[:, None]
        return (i * 3) % n + np.arange(3, dtype=np.int64)[None, :]

    @cached_property
    def digits(self) -> np.ndarray:
        """(3^N, N) array; row i holds the symbols of vertex i."""
        n, N = self.n_vertices, self.depth
        idx = np.arange(n, dtype=np.int64)
        out = np.empty((n, N), dtype=np.int8)
        for t in range(N - 1, -1, -1):
            out[:, t] = idx % 3
            idx //= 3
        return out

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        n = self.n_vertices
        rows = np.repeat(np.arange(n, dtype=np.int64), 3)
        cols = self.successors.ravel()
        return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))

    def edges(self) -> np.ndarray:
        """(3^{N+1}, 2) array of (source, target); edge order matches ``successors.ravel()``."""
        n = self.n_vertices
        src = np.repeat(np.arange(n, dtype=np.int64), 3)
        return np.column_stack([src, self.successors.ravel()])

    def vertex_word(self, i: int) -> tuple:
        return tuple(int(s) for s in self.digits[i])

    def index_of(self, w) -> int:
        w = as_word(w)
        if len(w) != self.depth:
            raise InvalidArgument(f"word length {len(w)} != depth {self.depth}")
        i = 0
        for s in w:
            i = 3 * i + s
        return i


def build_debruijn(N: int, n_max: int = N_MAX_DEFAULT) -> DeBruijnGraph:
    if N < 1:
        raise InvalidArgument("de Bruijn depth must be >= 1")
    if N > n_max:
        raise ResourceLimit(f"depth {N} exceeds the cap {n_max}")
    return DeBruijnGraph(N)


def window_classes(graph: DeBruijnGraph, alpha: int) -> list:
    """classify_prefix for every vertex of ``graph`` (vectorized)."""
    d = graph.digits
    is2 = d == 2
    has2 = is2.any(axis=1)
    j = np.where(has2, is2.argmax(axis=1), -1)
    cls = []
    for row, jj in zip(d, j):
        if jj < 0:
            cls.append(X_INFINITY)
        else:
            cls.append(_class_from_first_two(int(jj), bool((row[:jj] == 1).all()), alpha))
    return cls
