"""Pseudo-geodesic distances along the depth ordering, and a numerical check
that a local quasi-isometry becomes a global one under that distance.

The partition between two objects is the finest one available: every object
whose depth lies strictly between the endpoints, one per distinct depth.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .metric_core import minkowski_dist, pairwise_matrix
from .quasi_iso import DescriptorSet, QiParams, check_global_qi, check_local_qi


class DegeneratePathError(ValueError):
    """Both endpoints sit at the same depth, so there is nothing to partition."""


class PartitionTooCoarseError(ValueError):
    """Some consecutive depth gap on the path is not below epsilon."""

    def __init__(self, widest_gap: float, between: tuple[int, int], epsilon: float):
        super().__init__(
            f"partition too coarse: widest gap {widest_gap:g} between objects "
            f"{between[0]} and {between[1]} is not below epsilon={epsilon:g}"
        )
        self.widest_gap = widest_gap
        self.between = between
        self.epsilon = epsilon


@dataclass
class GeodesicPath:
    """A depth-sorted chain of objects from ``s`` to ``t``.

    ``partition`` always runs from the shallower endpoint to the deeper one,
    so the two orientations of a pair share one path.
    """

    s: int
    t: int
    partition: list[int]
    segment_lengths: np.ndarray
    total: float
    mesh: float


def _representatives(z: np.ndarray) -> np.ndarray:
    """Indices sorted by depth, keeping the lowest index of each repeated depth."""
    order = np.lexsort((np.arange(len(z)), z))
    keep = np.ones(len(order), dtype=bool)
    keep[1:] = z[order[1:]] != z[order[:-1]]
    return order[keep]


def build_path(ds: DescriptorSet, s: int, t: int, params: QiParams) -> GeodesicPath:
    n = len(ds)
    for k in (s, t):
        if not 0 <= k < n:
            raise IndexError(f"index {k} out of range for {n} objects")
    z = ds.depths
    if z[s] == z[t]:
        raise DegeneratePathError(f"objects {s} and {t} share depth {z[s]:g}")
    lo, hi = (s, t) if z[s] < z[t] else (t, s)
    reps = _representatives(z)
    inner = reps[(z[reps] > z[lo]) & (z[reps] < z[hi])]
    chain = [lo, *map(int, inner), hi]
    gaps = np.diff(z[chain])
    w = int(np.argmax(gaps))
    if not gaps[w] < params.epsilon:
        raise PartitionTooCoarseError(float(gaps[w]), (chain[w], chain[w + 1]), params.epsilon)
    f = ds.features
    seg = np.array([minkowski_dist(f[a], f[b], params.p_feat) for a, b in zip(chain[:-1], chain[1:])])
    return GeodesicPath(s=s, t=t, partition=chain, segment_lengths=seg, total=float(seg.sum()), mesh=float(gaps[w]))


def pseudo_geodesic(ds: DescriptorSet, s: int, t: int, params: QiParams) -> float:
    """Length of :func:`build_path`; symmetric in ``(s, t)`` and never below the chord."""
    return build_path(ds, s, t, params).total


def geodesic_matrix(ds: DescriptorSet, params: QiParams) -> np.ndarray:
    """All-pairs pseudo-geodesic lengths, ``nan`` where no valid path exists.

    Uses prefix sums over the chain of depth representatives, so it agrees
    with :func:`pseudo_geodesic` up to summation order (about 1e-12 relative).
    """
    n = len(ds)
    out = np.full((n, n), np.nan)
    if n < 2:
        return out
    z, p = ds.depths, params.p_feat
    dist = pairwise_matrix(ds.features, p)
    reps = _representatives(z)
    rz = z[reps]
    seg = dist[reps[:-1], reps[1:]]
    prefix = np.concatenate([[0.0], np.cumsum(seg)])
    # chain components: consecutive representatives closer than epsilon
    comp = np.concatenate([[0], np.cumsum(~(np.diff(rz) < params.epsilon))])
    # position of each object's depth in the chain
    pos = np.searchsorted(rz, z)
    for s in range(n):
        for t in range(n):
            if not z[s] < z[t] or comp[pos[s]] != comp[pos[t]]:
                continue
            a, b = pos[s] + 1, pos[t] - 1  # first and last strictly-inner representatives
            if a > b:
                g = dist[s, t]
            else:
                g = dist[s, reps[a]] + (prefix[b] - prefix[a]) + dist[reps[b], t]
            out[s, t] = out[t, s] = g
    return out


@dataclass
class TheoremReport:
    """Outcome of :func:`verify_theorem`.

    ``status`` is ``"pass"``, ``"fail"`` or ``"premise unsatisfied"``; in the
    last case the global fields are ``None``.
    """

    status: str
    premise_ok: bool
    b_prime: float | None
    global_ok: bool | None
    worst_margin: float | None
    worst_pair: tuple[int, int] | None
    n_checked: int
    n_violations: int
    n_without_path: int

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.worst_pair is not None:
            d["worst_pair"] = list(self.worst_pair)
        return d


def verify_theorem(ds: DescriptorSet, params: QiParams, tol: float = 1e-9) -> TheoremReport:
    """Check the global bounds under the pseudo-geodesic once the local audit passes.

    With ``B' = L * B`` every pair joined by a valid path must satisfy
    ``|dz|/K - B' <= G <= K*|dz| + B'``. A pair only counts as violated when
    it misses a bound by more than ``tol * (1 + G)``, which absorbs the
    rounding of long segment sums.
    """
    n = len(ds)
    local = check_local_qi(ds, params)
    if not local.ok:
        return TheoremReport("premise unsatisfied", False, None, None, None, None, 0, 0, 0)
    b_prime = n * params.B
    g = geodesic_matrix(ds, params)
    ii, jj = np.triu_indices(n, k=1)
    valid = ~np.isnan(g[ii, jj])
    pairs = np.column_stack([ii[valid], jj[valid]])
    n_without = int((~valid).sum())
    if len(pairs) == 0:
        return TheoremReport("pass", True, b_prime, True, -math.inf, None, 0, 0, n_without)
    res = check_global_qi(ds, params.K, b_prime, feature_metric=g, pairs=pairs)
    scale = tol * (1.0 + g[pairs[:, 0], pairs[:, 1]])
    d1 = np.abs(ds.depths[pairs[:, 0]] - ds.depths[pairs[:, 1]])
    gv = g[pairs[:, 0], pairs[:, 1]]
    excess = np.maximum(gv - (params.K * d1 + b_prime), (d1 / params.K - b_prime) - gv)
    n_bad = int((excess > scale).sum())
    return TheoremReport(
        status="pass" if n_bad == 0 else "fail",
        premise_ok=True,
        b_prime=b_prime,
        global_ok=n_bad == 0,
        worst_margin=res.worst_margin,
        worst_pair=res.worst_pair,
        n_checked=res.n_checked,
        n_violations=n_bad,
        n_without_path=n_without,
    )
