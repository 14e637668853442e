"""Random instance builders shared by the unit and acceptance tests."""
import math

import numpy as np

from qiloss.losses import DepthMapSample
from qiloss.quasi_iso import DescriptorSet, QiParams, pair_matrices

KINK_GAP = 1e-4


def _away_from_kinks(ds: DescriptorSet, q: QiParams) -> bool:
    pm = pair_matrices(ds, q)
    live = pm.eligible
    if np.any(live & (np.abs(pm.m_pos) < KINK_GAP)) or np.any(live & (np.abs(pm.m_neg) < KINK_GAP)):
        return False
    diff = np.abs(ds.features[pm.i] - ds.features[pm.j])[live]
    if q.p_feat == 1.0 and np.any(diff < KINK_GAP):
        return False
    if q.p_feat == np.inf and diff.shape[1] > 1:
        top2 = np.sort(diff, axis=1)[:, -2:]
        if np.any(top2[:, 1] - top2[:, 0] < KINK_GAP):
            return False
    return True


def smooth_qi_instance(rng: np.random.Generator, p=2, tau=None, max_l=16, max_c=8):
    """A set with both violation kinds present and no pair near a kink or a set boundary."""
    while True:
        n = int(rng.integers(4, max_l + 1))
        c = int(rng.integers(1, max_c + 1))
        z = rng.uniform(1.0, 25.0, n)
        f = rng.normal(size=(n, c)) * rng.uniform(1.0, 8.0)
        q = QiParams(tau=tau if tau is not None else float(rng.choice([0.5, 1.0, 2.0])), p_feat=p)
        ds = DescriptorSet(z, f)
        pm = pair_matrices(ds, q)
        if pm.is_pos.any() and pm.is_neg.any() and _away_from_kinks(ds, q):
            return ds, q


def smooth_depth_sample(rng: np.random.Generator) -> DepthMapSample:
    h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    gt = rng.uniform(1.0, 60.0, (h, w))
    resid = rng.uniform(0.05, 5.0, (h, w)) * rng.choice([-1.0, 1.0], (h, w))
    mask = rng.random((h, w)) < 0.7
    mask.flat[int(rng.integers(h * w))] = True
    return DepthMapSample(gt + resid, rng.uniform(-1.5, 1.5, (h, w)), gt, mask)


def depth_loss_fd_grads(loss_fn, sample: DepthMapSample, h=1e-6):
    """Central differences of ``loss_fn`` with respect to both prediction maps."""
    out = {}
    for key in ("pred_depth", "pred_log_sigma"):
        base = getattr(sample, key)
        g = np.zeros_like(base)
        for idx in np.ndindex(*base.shape):
            vals = []
            for sgn in (1.0, -1.0):
                arr = base.copy()
                arr[idx] += sgn * h
                kw = {"pred_depth": sample.pred_depth, "pred_log_sigma": sample.pred_log_sigma}
                kw[key] = arr
                vals.append(loss_fn(DepthMapSample(gt_depth=sample.gt_depth, mask=sample.mask, **kw)).value)
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        out[key] = g
    return out


def random_local_qi_set(rng):
    """A noisy curve sampled densely enough that every pair has a path."""
    n = int(rng.integers(2, 201))
    eps = float(rng.choice([2.0, 5.0, 10.0]))
    span = float(rng.uniform(0.5, 6.0)) * eps
    z = np.sort(rng.uniform(1.0, 1.0 + span, n))
    K = float(rng.uniform(1.05, 3.0))
    B = 0.0 if rng.random() < 0.3 else float(rng.uniform(0.0, 1.0))
    c = int(rng.integers(2, 6))
    r = float(rng.uniform(1.0, 4.0)) * eps
    basis = np.linalg.qr(rng.normal(size=(c, 2)))[0]
    curve = r * np.column_stack([np.cos(z / r), np.sin(z / r)]) @ basis.T
    noise = rng.normal(size=(n, c)) * (B / 4 / math.sqrt(c))
    p = rng.choice(["1", "2", "inf"])
    return DescriptorSet(z, curve + noise), QiParams(K=K, B=B, epsilon=eps, p_feat=p)
