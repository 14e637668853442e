"""Losses acting on object descriptors and object-wise depth maps.

``qi_loss`` is the quasi-isometric contrastive loss: every upper-bound
violation is a positive anchor scored against the pooled lower-bound
violations. ``obj_depth_loss`` is the Laplacian aleatoric regression loss over
the foreground pixels of a depth map.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from .quasi_iso import DescriptorSet, QiParams, pair_matrices

SQRT2 = np.sqrt(2.0)


@dataclass
class LossOutput:
    """A scalar loss and its gradients keyed by input name.

    For ``qi_loss`` the key is ``"features"`` (shape ``(L, C)``); for
    ``obj_depth_loss`` the keys are ``"pred_depth"`` and ``"pred_log_sigma"``.
    """

    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    info: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# descriptor extraction


def avg_pool_5x5(fmap: np.ndarray) -> np.ndarray:
    """Stride-1 5x5 mean filter over a ``(C, H, W)`` map.

    Border windows are averaged over their in-bounds pixels only, so constant
    maps are preserved exactly and the output has the input's shape.
    """
    return box_mean(fmap, 2)


def box_mean(fmap: np.ndarray, r: int) -> np.ndarray:
    """Mean over the in-bounds ``(2r+1) x (2r+1)`` window around every pixel.

    Computed as the centre value plus the mean deviation from it, so a
    constant window returns its value bit-for-bit.
    """
    x = np.asarray(fmap, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected a (C, H, W) map, got shape {x.shape}")
    _, h, w = x.shape
    dev = np.zeros_like(x)
    count = np.zeros((h, w))
    for dy in range(-r, r + 1):
        ys, yt = slice(max(dy, 0), h + min(dy, 0)), slice(max(-dy, 0), h + min(-dy, 0))
        for dx in range(-r, r + 1):
            xs, xt = slice(max(dx, 0), w + min(dx, 0)), slice(max(-dx, 0), w + min(-dx, 0))
            # target pixel (yt, xt) gathers its neighbour at offset (dy, dx)
            dev[:, yt, xt] += x[:, ys, xs] - x[:, yt, xt]
            count[yt, xt] += 1
    return x + dev / count


def pool_window(h: int, w: int, v: int, u: int, r: int = 2) -> tuple[slice, slice, int]:
    """Rows, columns and pixel count of the pooling window centred at ``(v, u)``."""
    rows = slice(max(v - r, 0), min(v + r + 1, h))
    cols = slice(max(u - r, 0), min(u + r + 1, w))
    return rows, cols, (rows.stop - rows.start) * (cols.stop - cols.start)


@dataclass
class ObjectAnnotation:
    """An object on the feature-map grid.

    ``(u, v)`` is the projected centre as (column, row). ``box`` is
    ``(x0, y0, x1, y1)``, half-open, so it covers columns ``x0..x1-1`` and
    rows ``y0..y1-1``.
    """

    u: int
    v: int
    z: float
    box: tuple[int, int, int, int] | None = None
    id: str | None = None

    def __post_init__(self):
        if not (np.isfinite(self.z) and self.z > 0):
            raise ValueError(f"object depth must be finite and > 0 (got {self.z})")
        if self.box is not None:
            x0, y0, x1, y1 = self.box
            if x1 <= x0 or y1 <= y0:
                raise ValueError(f"empty box {self.box}")


def extract_descriptors(fmap: np.ndarray, anns: list[ObjectAnnotation]) -> DescriptorSet:
    """Pool the map, then read each object's C-vector at its centre pixel."""
    x = np.asarray(fmap, dtype=np.float64)
    _, h, w = x.shape
    for a in anns:
        if not (0 <= a.u < w and 0 <= a.v < h):
            raise IndexError(f"centre (u={a.u}, v={a.v}) outside {w}x{h} map")
    pooled = avg_pool_5x5(x)
    feats = np.stack([pooled[:, a.v, a.u] for a in anns]) if anns else np.zeros((0, x.shape[0]))
    ids = [a.id if a.id is not None else str(k) for k, a in enumerate(anns)]
    return DescriptorSet(np.array([a.z for a in anns], dtype=np.float64), feats, ids)


def extract_descriptors_backward(shape, anns: list[ObjectAnnotation], grad_feats: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`extract_descriptors` with respect to the unpooled map."""
    c, h, w = shape
    g = np.zeros((c, h, w))
    for a, gf in zip(anns, np.asarray(grad_feats)):
        rows, cols, cnt = pool_window(h, w, a.v, a.u)
        g[:, rows, cols] += (gf / cnt)[:, None, None]
    return g


# --------------------------------------------------------------------------
# quasi-isometric loss


def _dist_grad(diff: np.ndarray, d: np.ndarray, p: float) -> np.ndarray:
    """d ||diff||_p / d diff, row-wise, with zero subgradient at kinks."""
    if p == 1.0:
        return np.sign(diff)
    if p == 2.0:
        safe = np.where(d > 0, d, 1.0)
        return np.where((d > 0)[:, None], diff / safe[:, None], 0.0)
    a = np.abs(diff)
    g = np.zeros_like(diff)
    if len(diff):
        k = np.argmax(a, axis=1)
        rows = np.arange(len(diff))
        g[rows, k] = np.sign(diff[rows, k])
    return g


def _scatter_pair_grads(ds: DescriptorSet, i, j, dd2: np.ndarray, p: float) -> np.ndarray:
    """Chain ``dL/d d2`` for pairs ``(i, j)`` back onto the descriptors."""
    grad = np.zeros_like(ds.features)
    if len(i) == 0:
        return grad
    diff = ds.features[i] - ds.features[j]
    d = np.abs(diff).sum(1) if p == 1.0 else (np.sqrt((diff * diff).sum(1)) if p == 2.0 else np.abs(diff).max(1))
    g = _dist_grad(diff, d, p) * dd2[:, None]
    np.add.at(grad, i, g)
    np.add.at(grad, j, -g)
    return grad


def qi_loss(ds: DescriptorSet, params: QiParams | None = None, mode: str | None = None) -> LossOutput:
    """Quasi-isometric loss and its gradient with respect to ``ds.features``.

    ``mode="eq6"`` averages, over the upper-bound violators, the contrastive
    term ``-log(S+ / (S+ + sum S-))`` with ``S = exp(-margin / tau)``; it is 0
    when there is no upper-bound violator. ``mode="alg1_literal"`` follows the
    matrix recipe: masked entries are zeroed before exponentiation and the
    mean runs over all ``L*L`` entries, with ``div_guard`` in the denominator.

    Pair membership is fixed at the evaluation point; the gradient is that of
    the resulting smooth piece. ``info`` carries the per-pair gradient sign of
    the feature distance so callers can see which way each pair is pushed.
    """
    params = params or QiParams()
    mode = mode or params.mode
    if not params.tau > 0:
        raise ValueError("tau must be > 0")
    if mode == "eq6":
        return _qi_loss_eq6(ds, params)
    if mode == "alg1_literal":
        return _qi_loss_alg1(ds, params)
    raise ValueError(f"unknown qi loss mode {mode!r}")


def _qi_loss_eq6(ds: DescriptorSet, params: QiParams) -> LossOutput:
    zero = LossOutput(0.0, {"features": np.zeros_like(ds.features)}, {"n_pos": 0, "n_neg": 0})
    if len(ds) < 2:
        return zero
    pm = pair_matrices(ds, params)
    pos, neg = pm.is_pos, pm.is_neg
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    zero.info.update(n_pos=n_pos, n_neg=n_neg)
    if n_pos == 0 or n_neg == 0:
        # with no negatives S+ / (S+ + 0) = 1 for every anchor
        return zero
    tau = params.tau
    m_pos, m_neg = pm.m_pos[pos], pm.m_neg[neg]
    # -log(S+ / (S+ + sum S-)) = softplus(logsumexp(-m_neg/tau) + m_pos/tau)
    a = -m_neg / tau
    lse = logsumexp(a)
    t = lse + m_pos / tau
    value = float(np.mean(np.logaddexp(0.0, t)))
    sig = expit(t)
    dm_pos = sig / (tau * n_pos)
    w = np.exp(a - lse)
    dm_neg = -(sig.sum() / n_pos) * w / tau
    # m_pos = d2 - ..., m_neg = ... - d2
    dd2 = np.concatenate([dm_pos, -dm_neg])
    ii = np.concatenate([pm.i[pos], pm.i[neg]])
    jj = np.concatenate([pm.j[pos], pm.j[neg]])
    grad = _scatter_pair_grads(ds, ii, jj, dd2, params.p_feat)
    info = {
        "n_pos": n_pos,
        "n_neg": n_neg,
        "pos_d2_grad_sign": np.sign(dm_pos),
        "neg_d2_grad_sign": np.sign(-dm_neg),
    }
    return LossOutput(value, {"features": grad}, info)


def _qi_loss_alg1(ds: DescriptorSet, params: QiParams) -> LossOutput:
    n = len(ds)
    if n < 2:
        return LossOutput(0.0, {"features": np.zeros_like(ds.features)}, {"n_pos": 0, "n_neg": 0})
    tau, delta = params.tau, params.div_guard
    pm = pair_matrices(ds, params)
    pos, neg = pm.is_pos, pm.is_neg
    n_entries = n * n
    mp = np.where(pos, pm.m_pos, 0.0)
    mn = np.where(neg, pm.m_neg, 0.0)
    # masked entries (lower triangle, diagonal, filtered pairs) sit at 0 -> exp(0) = 1
    # n_lower counts the diagonal and lower triangle, absent from the pair arrays
    n_masked_neg = n_entries - int(neg.sum())
    e_neg = np.exp(-mn[neg] / tau)
    ancs_neg = n_masked_neg + e_neg.sum()
    log_den = np.log(ancs_neg + delta)
    # -log(a / (a + T + delta)) with log a = -M+/tau
    t = log_den + mp / tau
    n_lower = n_entries - len(mp)
    value = float((np.logaddexp(0.0, t).sum() + n_lower * np.logaddexp(0.0, log_den)) / n_entries)
    sig = expit(t)
    dm_pos = np.where(pos, sig / (tau * n_entries), 0.0)
    # dL/dT = mean of 1/(a + T + delta) over all entries
    inv = sig / (ancs_neg + delta)
    dT = (inv.sum() + n_lower * expit(log_den) / (ancs_neg + delta)) / n_entries
    dm_neg = -dT * e_neg / tau
    dd2 = np.concatenate([dm_pos[pos], -dm_neg])
    ii = np.concatenate([pm.i[pos], pm.i[neg]])
    jj = np.concatenate([pm.j[pos], pm.j[neg]])
    grad = _scatter_pair_grads(ds, ii, jj, dd2, params.p_feat)
    return LossOutput(value, {"features": grad}, {"n_pos": int(pos.sum()), "n_neg": int(neg.sum())})


def qi_loss_grad_check(ds: DescriptorSet, params: QiParams | None = None, h: float = 1e-6,
                       mode: str | None = None) -> float:
    """Max relative error between the analytical gradient and central differences.

    The error of each component is taken relative to the largest gradient
    magnitude of either route, so near-zero components do not blow up.
    """
    params = params or QiParams()
    out = qi_loss(ds, params, mode)
    ga = out.grads["features"]
    gn = np.zeros_like(ga)
    f = ds.features
    for idx in np.ndindex(*f.shape):
        fp, fm = f.copy(), f.copy()
        fp[idx] += h
        fm[idx] -= h
        vp = qi_loss(DescriptorSet(ds.depths, fp, ds.ids), params, mode).value
        vm = qi_loss(DescriptorSet(ds.depths, fm, ds.ids), params, mode).value
        gn[idx] = (vp - vm) / (2 * h)
    return relative_error(ga, gn)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


# --------------------------------------------------------------------------
# object-wise depth map loss


def build_object_depth_map(anns: list[ObjectAnnotation], shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Fill every box with its object's centre depth; the nearer object wins overlaps.

    Returns ``(gt_depth, foreground_mask)``; background pixels hold 0.
    """
    h, w = shape
    depth = np.full((h, w), np.inf)
    for a in anns:
        if a.box is None:
            raise ValueError(f"annotation {a.id!r} has no box")
        x0, y0, x1, y1 = a.box
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise ValueError(f"box {a.box} outside {w}x{h} map")
        region = depth[y0:y1, x0:x1]
        np.minimum(region, a.z, out=region)
    mask = np.isfinite(depth)
    return np.where(mask, depth, 0.0), mask


@dataclass
class DepthMapSample:
    pred_depth: np.ndarray
    pred_log_sigma: np.ndarray
    gt_depth: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.pred_depth = np.asarray(self.pred_depth, dtype=np.float64)
        self.pred_log_sigma = np.asarray(self.pred_log_sigma, dtype=np.float64)
        self.gt_depth = np.asarray(self.gt_depth, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        shapes = {a.shape for a in (self.pred_depth, self.pred_log_sigma, self.gt_depth, self.mask)}
        if len(shapes) != 1:
            raise ValueError(f"depth map inputs disagree in shape: {sorted(shapes)}")
        for name in ("pred_depth", "pred_log_sigma", "gt_depth"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite values")


def obj_depth_loss(sample: DepthMapSample) -> LossOutput:
    """Mean over foreground pixels of ``sqrt(2)/sigma * |z - z_hat| + log(sigma)``.

    The uncertainty is parameterised by its log, so gradients are reported
    with respect to ``pred_depth`` and ``pred_log_sigma``.
    """
    m = sample.mask
    n = int(m.sum())
    g_z = np.zeros_like(sample.pred_depth)
    g_s = np.zeros_like(sample.pred_log_sigma)
    if n == 0:
        return LossOutput(0.0, {"pred_depth": g_z, "pred_log_sigma": g_s})
    s = sample.pred_log_sigma[m]
    r = sample.gt_depth[m] - sample.pred_depth[m]
    inv_sigma = np.exp(-s)
    value = float(np.sum(SQRT2 * inv_sigma * np.abs(r) + s) / n)
    g_z[m] = -SQRT2 * inv_sigma * np.sign(r) / n
    g_s[m] = (1.0 - SQRT2 * inv_sigma * np.abs(r)) / n
    return LossOutput(value, {"pred_depth": g_z, "pred_log_sigma": g_s})


def total_loss(baseline: LossOutput, qi: LossOutput, obj: LossOutput,
               lambda_qi: float = 0.5, lambda_obj: float = 1.0) -> LossOutput:
    """``baseline + lambda_qi * qi + lambda_obj * obj``; gradients sharing a key are summed."""
    grads: dict[str, np.ndarray] = {}
    for weight, part in ((1.0, baseline), (lambda_qi, qi), (lambda_obj, obj)):
        for k, g in part.grads.items():
            grads[k] = grads[k] + weight * g if k in grads else weight * np.asarray(g, dtype=np.float64)
    value = baseline.value + lambda_qi * qi.value + lambda_obj * obj.value
    return LossOutput(float(value), grads)
