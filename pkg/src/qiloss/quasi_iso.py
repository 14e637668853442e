"""Quasi-isometry audits between the depth space (Z, |.|) and the descriptor
space (P, ||.||_p).

A pair ``(i, j)`` with ``|z_i - z_j| <= epsilon`` violates the upper bound
(lands in ``pos``) when ``d2 > K*d1 + B`` and the lower bound (lands in
``neg``) when ``d2 < d1/K - B``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .metric_core import condensed_distances, norm_order, pairwise_matrix


@dataclass
class DescriptorSet:
    """Paired object depths and descriptors; row ``l`` of ``features`` is the
    image of ``depths[l]``."""

    depths: np.ndarray
    features: np.ndarray
    ids: list[str] | None = None

    def __post_init__(self):
        z = np.asarray(self.depths, dtype=np.float64).reshape(-1)
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim == 1:
            f = f[:, None]
        if f.ndim != 2 or f.shape[0] != z.shape[0]:
            raise ValueError(f"{z.shape[0]} depths but features of shape {f.shape}")
        if not np.all(np.isfinite(z)):
            raise ValueError("depths must be finite")
        if not np.all(np.isfinite(f)):
            raise ValueError("features must be finite")
        self.depths, self.features = z, f
        if self.ids is None:
            self.ids = [str(i) for i in range(len(z))]
        elif len(self.ids) != len(z):
            raise ValueError("ids must have one entry per object")
        else:
            self.ids = [str(i) for i in self.ids]

    def __len__(self) -> int:
        return self.depths.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "DescriptorSet":
        idx = np.asarray(idx, dtype=int)
        return DescriptorSet(self.depths[idx], self.features[idx], [self.ids[i] for i in idx])


@dataclass(frozen=True)
class QiParams:
    """Hyperparameters of the (K, B, epsilon) corridor and the loss built on it.

    ``div_guard`` is only used by the literal algorithm variant of the loss.
    """

    K: float = 1.5
    B: float = 0.5
    epsilon: float = 10.0
    tau: float = 1.0
    p_feat: float = 2.0
    p_depth: float = 1.0
    div_guard: float = 1e-12
    mode: str = "eq6"

    def __post_init__(self):
        object.__setattr__(self, "p_feat", norm_order(self.p_feat))
        object.__setattr__(self, "p_depth", norm_order(self.p_depth))
        object.__setattr__(self, "epsilon", float(self.epsilon))
        if not (self.K >= 1):
            raise ValueError("K must be ≥ 1")
        if not (self.B >= 0):
            raise ValueError("B must be ≥ 0")
        if not (self.epsilon > 0):
            raise ValueError("epsilon must be > 0")
        if not (self.tau > 0):
            raise ValueError("tau must be > 0")
        if not (self.div_guard > 0):
            raise ValueError("div_guard must be > 0")
        if self.mode not in ("eq6", "alg1_literal"):
            raise ValueError(f"mode must be 'eq6' or 'alg1_literal' (got {self.mode!r})")


@dataclass
class ViolationReport:
    """Pairs outside the quasi-isometric corridor, each as ``(i, j, margin)``
    with ``i < j`` and ``margin > 0``, sorted by ``(i, j)``."""

    pos_pairs: list[tuple[int, int, float]] = field(default_factory=list)
    neg_pairs: list[tuple[int, int, float]] = field(default_factory=list)
    eligible_count: int = 0
    total_pairs: int = 0

    @property
    def ratio(self) -> float:
        if self.total_pairs == 0:
            return 0.0
        return (len(self.pos_pairs) + len(self.neg_pairs)) / self.total_pairs

    @property
    def n_violations(self) -> int:
        return len(self.pos_pairs) + len(self.neg_pairs)

    def worst(self, k: int = 10) -> list[dict]:
        """Top-``k`` violations by margin, ties broken by pair index."""
        rows = [(m, i, j, "pos") for i, j, m in self.pos_pairs]
        rows += [(m, i, j, "neg") for i, j, m in self.neg_pairs]
        rows.sort(key=lambda r: (-r[0], r[1], r[2]))
        return [{"i": i, "j": j, "kind": kind, "margin": m} for m, i, j, kind in rows[:k]]


@dataclass
class PairMatrices:
    """Upper-triangle pair quantities shared by the audit and the loss."""

    i: np.ndarray
    j: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    eligible: np.ndarray
    m_pos: np.ndarray
    m_neg: np.ndarray

    @property
    def is_pos(self) -> np.ndarray:
        return self.eligible & (self.m_pos > 0)

    @property
    def is_neg(self) -> np.ndarray:
        return self.eligible & (self.m_neg > 0)


def pair_matrices(ds: DescriptorSet, params: QiParams) -> PairMatrices:
    n = len(ds)
    i, j = np.triu_indices(n, k=1)
    d1 = condensed_distances(ds.depths, params.p_depth)
    d2 = condensed_distances(ds.features, params.p_feat)
    K, B = params.K, params.B
    return PairMatrices(
        i=i, j=j, d1=d1, d2=d2,
        eligible=d1 <= params.epsilon,
        m_pos=d2 - K * d1 - B,
        m_neg=d1 / K - B - d2,
    )


def epsilon_neighborhood(ds: DescriptorSet, index: int, params: QiParams) -> list[int]:
    """Indices ``j != index`` whose depth lies in the closed epsilon-ball of ``z_index``."""
    n = len(ds)
    if not 0 <= index < n:
        raise IndexError(f"index {index} out of range for {n} objects")
    d = np.abs(ds.depths - ds.depths[index])
    hits = np.nonzero(d <= params.epsilon)[0]
    return [int(j) for j in hits if j != index]


def find_violating_pairs(ds: DescriptorSet, params: QiParams) -> ViolationReport:
    n = len(ds)
    total = n * (n - 1) // 2
    if n < 2:
        return ViolationReport(total_pairs=total)
    pm = pair_matrices(ds, params)
    pos, neg = pm.is_pos, pm.is_neg
    return ViolationReport(
        pos_pairs=[(int(a), int(b), float(m)) for a, b, m in zip(pm.i[pos], pm.j[pos], pm.m_pos[pos])],
        neg_pairs=[(int(a), int(b), float(m)) for a, b, m in zip(pm.i[neg], pm.j[neg], pm.m_neg[neg])],
        eligible_count=int(pm.eligible.sum()),
        total_pairs=total,
    )


def violation_ratio(ds: DescriptorSet, params: QiParams) -> float:
    """``(|P+| + |P-|) / C(L, 2)`` without materialising the pair lists."""
    n = len(ds)
    if n < 2:
        return 0.0
    pm = pair_matrices(ds, params)
    return float((pm.is_pos | pm.is_neg).sum()) / (n * (n - 1) // 2)


@dataclass
class LocalQiResult:
    ok: bool
    report: ViolationReport
    # Every descriptor is the image of its own depth, so the coverage
    # condition holds with distance 0 for any DescriptorSet.
    coverage_ok: bool = True


def check_local_qi(ds: DescriptorSet, params: QiParams) -> LocalQiResult:
    rep = find_violating_pairs(ds, params)
    return LocalQiResult(ok=rep.n_violations == 0, report=rep)


def coverage_radius(points, ds: DescriptorSet, p=2) -> float:
    """Largest distance from any of ``points`` to its nearest descriptor in ``ds``.

    The coverage condition asks this to be ``<= epsilon``. It is exposed for
    maps that are not bijections; for ``ds.features`` itself it is 0.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(ds) == 0:
        return math.inf if len(pts) else 0.0
    best = 0.0
    for x in pts:
        d = pairwise_matrix(np.vstack([x[None, :], ds.features]), p)[0, 1:]
        best = max(best, float(d.min()))
    return best


@dataclass
class GlobalQiResult:
    ok: bool
    worst_margin: float
    worst_pair: tuple[int, int] | None
    worst_kind: str | None
    n_violations: int
    n_checked: int


FeatureMetric = Callable[[int, int], float]


def check_global_qi(
    ds: DescriptorSet,
    K: float,
    B: float,
    feature_metric: str | FeatureMetric | np.ndarray = "minkowski",
    p=2,
    pairs: Sequence[tuple[int, int]] | None = None,
) -> GlobalQiResult:
    """Check ``d1/K - B <= d2 <= K*d1 + B`` over all pairs, with no epsilon filter.

    ``feature_metric`` is ``"minkowski"`` (order ``p``), a precomputed ``n x n``
    matrix, or a callback ``(i, j) -> distance``. ``pairs`` restricts the check
    (used when only some pairs admit a pseudo-geodesic). The reported margin is
    the largest signed excess over either bound; positive means violated.
    """
    n = len(ds)
    if pairs is None:
        ii, jj = np.triu_indices(n, k=1)
    else:
        arr = np.asarray(pairs, dtype=int).reshape(-1, 2)
        ii, jj = arr[:, 0], arr[:, 1]
    if len(ii) == 0:
        return GlobalQiResult(True, -math.inf, None, None, 0, 0)
    d1 = np.abs(ds.depths[ii] - ds.depths[jj])
    if isinstance(feature_metric, str):
        if feature_metric != "minkowski":
            raise ValueError(f"unknown feature metric {feature_metric!r}")
        d2 = pairwise_matrix(ds.features, p)[ii, jj]
    elif callable(feature_metric):
        d2 = np.array([feature_metric(int(a), int(b)) for a, b in zip(ii, jj)], dtype=np.float64)
    else:
        d2 = np.asarray(feature_metric, dtype=np.float64)[ii, jj]
    upper = d2 - (K * d1 + B)
    lower = (d1 / K - B) - d2
    excess = np.maximum(upper, lower)
    w = int(np.argmax(excess))
    return GlobalQiResult(
        ok=bool(np.all(excess <= 0)),
        worst_margin=float(excess[w]),
        worst_pair=(int(ii[w]), int(jj[w])),
        worst_kind="pos" if upper[w] >= lower[w] else "neg",
        n_violations=int((excess > 0).sum()),
        n_checked=len(ii),
    )
