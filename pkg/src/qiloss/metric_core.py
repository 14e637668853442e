"""Finite metric spaces over real vectors: Minkowski distances, pairwise
distance matrices and an exhaustive metric-axiom audit."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist, squareform

SUPPORTED_P = (1.0, 2.0, np.inf)
_PDIST_NAME = {1.0: "cityblock", 2.0: "euclidean", np.inf: "chebyshev"}


def norm_order(p) -> float:
    """Normalise a norm order given as 1, 2, ``inf`` or the string ``"inf"``."""
    if isinstance(p, str):
        p = p.strip().lower()
        p = np.inf if p in ("inf", "infinity", "max") else float(p)
    p = float(p)
    if p not in SUPPORTED_P:
        raise ValueError(f"norm order must be one of 1, 2, inf (got {p})")
    return p


def _as_vector(x) -> np.ndarray:
    v = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite components")
    return v


def _reduce(diff: np.ndarray, p: float, axis: int = -1) -> np.ndarray:
    a = np.abs(diff)
    if p == 1.0:
        return a.sum(axis=axis)
    if p == 2.0:
        return np.sqrt((a * a).sum(axis=axis))
    return a.max(axis=axis, initial=0.0)


def minkowski_dist(a, b, p=2) -> float:
    """Minkowski distance ``(sum |a_i - b_i|^p)^(1/p)`` for p in {1, 2, inf}.

    Scalars are treated as 1-vectors, so the result is exactly ``|a - b|``.
    """
    p = norm_order(p)
    u, v = _as_vector(a), _as_vector(b)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    return float(_reduce(u - v, p))


def _as_rows(xs) -> np.ndarray:
    x = np.asarray(xs, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"expected (n, C) input, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input has non-finite components")
    return x


def condensed_distances(xs, p=2) -> np.ndarray:
    """Upper-triangle distances in ``np.triu_indices(n, 1)`` order."""
    p = norm_order(p)
    x = _as_rows(xs)
    if x.shape[0] < 2:
        return np.zeros(0)
    return pdist(x, _PDIST_NAME[p])


def pairwise_matrix(xs, p=2) -> np.ndarray:
    """Dense ``n x n`` matrix of Minkowski distances between the rows of ``xs``.

    ``xs`` may be a list of vectors, a 1-D array of scalars or an ``(n, C)``
    array. The diagonal is exactly 0 and the matrix is exactly symmetric.
    """
    p = norm_order(p)
    if np.asarray(xs).size == 0:
        return np.zeros((0, 0))
    x = _as_rows(xs)
    if x.shape[0] == 1:
        return np.zeros((1, 1))
    return squareform(condensed_distances(x, p))


@dataclass
class AxiomReport:
    """Violations found by :func:`validate_metric_axioms`.

    Each list holds index tuples; ``triangle`` entries are ``(i, j, k)`` with
    ``d(i, j) > d(i, k) + d(k, j) + tol``.
    """

    n: int
    negative: list[tuple[int, int]] = field(default_factory=list)
    nonzero_diagonal: list[int] = field(default_factory=list)
    asymmetric: list[tuple[int, int]] = field(default_factory=list)
    triangle: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.negative or self.nonzero_diagonal or self.asymmetric or self.triangle)

    @property
    def n_violations(self) -> int:
        return len(self.negative) + len(self.nonzero_diagonal) + len(self.asymmetric) + len(self.triangle)


def validate_metric_axioms(m, tol: float = 1e-9) -> AxiomReport:
    """Exhaustively check non-negativity, symmetry and the triangle inequality.

    O(n^3) in time; the triangle check is vectorised one pivot ``k`` at a time.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"distance matrix must be square, got shape {m.shape}")
    n = m.shape[0]
    rep = AxiomReport(n=n)
    rep.negative = [(int(i), int(j)) for i, j in zip(*np.nonzero(m < -tol))]
    rep.nonzero_diagonal = [int(i) for i in np.nonzero(np.abs(np.diag(m)) > tol)[0]]
    iu, ju = np.nonzero(np.triu(np.abs(m - m.T) > tol, k=1))
    rep.asymmetric = [(int(i), int(j)) for i, j in zip(iu, ju)]
    for k in range(n):
        bad = m > (m[:, k][:, None] + m[k, :][None, :] + tol)
        for i, j in zip(*np.nonzero(bad)):
            rep.triangle.append((int(i), int(j), k))
    rep.triangle.sort()
    return rep
