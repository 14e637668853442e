"""Toy depth-regression training with the quasi-isometric and object-wise
depth losses.

A small tanh MLP maps each object's input vector to a descriptor. The task
loss is L1 regression of depth through a fixed-norm linear readout of the
descriptor plus a trainable bias. The readout norm pins the descriptor scale
to metres; with a trainable norm the L1 loss is invariant to rescaling the
descriptors and the violation ratio would be an artefact of the init.

Optimisation is plain mini-batch gradient descent, single-threaded and fully
determined by the seed.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .losses import (
    SQRT2,
    DepthMapSample,
    LossOutput,
    avg_pool_5x5,
    build_object_depth_map,
    extract_descriptors_backward,
    obj_depth_loss,
    qi_loss,
    total_loss,
)
from .quasi_iso import DescriptorSet, QiParams, violation_ratio
from .synth import NoisyScene, SynthConfig, gen_noisy_scene

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "baseline_loss", "qi_loss", "obj_loss", "total", "violation_ratio", "e_z")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, what: str):
        super().__init__(f"non-finite {what} at epoch {epoch}, step {step}")
        self.epoch, self.step, self.what = epoch, step, what


@dataclass
class Encoder:
    """``rho = W2 @ act(W1 @ x + b1) + b2`` with ``act`` = tanh (or identity, for a linear map)."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(cls, d_in: int, hidden: int, out: int, rng: np.random.Generator, out_scale: float = 1.0) -> "Encoder":
        return cls(
            W1=rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, hidden)),
            b1=np.zeros(hidden),
            W2=rng.normal(0.0, out_scale / np.sqrt(hidden), size=(hidden, out)),
            b2=np.zeros(out),
        )

    @classmethod
    def zeros(cls, d_in: int, hidden: int, out: int) -> "Encoder":
        return cls(np.zeros((d_in, hidden)), np.zeros(hidden), np.zeros((hidden, out)), np.zeros(out))

    @property
    def d_in(self) -> int:
        return self.W1.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d_in:
            raise ValueError(f"encoder expects {self.d_in} inputs, got {x.shape[-1]}")
        pre = x @ self.W1 + self.b1
        hid = np.tanh(pre) if self.activation == "tanh" else pre
        return hid @ self.W2 + self.b2, (x, hid)

    def backward(self, cache: tuple, g_out: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Parameter gradients and the input gradient for upstream ``g_out``."""
        x, hid = cache
        g_out = np.atleast_2d(g_out)
        x2, h2 = np.atleast_2d(x), np.atleast_2d(hid)
        g_pre = g_out @ self.W2.T
        if self.activation == "tanh":
            g_pre = g_pre * (1.0 - h2 * h2)
        grads = {"W1": x2.T @ g_pre, "b1": g_pre.sum(0), "W2": h2.T @ g_out, "b2": g_out.sum(0)}
        return grads, (g_pre @ self.W1.T).reshape(np.shape(x))


def encoder_forward(enc: Encoder, x) -> np.ndarray:
    return enc.forward(x)[0]


@dataclass(frozen=True)
class TrainConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    hidden: int = 32
    out_dim: int = 16
    out_scale: float = 3.0
    readout_norm: float = 1.0
    lambda_qi: float = 0.5
    lambda_obj: float = 1.0
    qi: QiParams = field(default_factory=QiParams)
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-2
    seed: int = 0
    experiment: str = "descriptor_level"

    def __post_init__(self):
        if self.experiment not in ("descriptor_level", "map_level"):
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be ≥ 1 and epochs ≥ 0")
        if self.synth.kind != "noisy_scene":
            raise ValueError("training needs a noisy_scene dataset")

    def with_seed(self, seed: int) -> "TrainConfig":
        """Same experiment with both data and init/shuffle seeds set to ``seed``."""
        return replace(self, seed=seed, synth=replace(self.synth, seed=seed))


@dataclass
class MetricsLog:
    """Per-epoch metric rows; ``model`` holds the trained model after :func:`train`."""

    rows: list[tuple] = field(default_factory=list)
    model: "Model | None" = None

    def append(self, *row):
        self.rows.append(tuple(row))

    @property
    def final(self) -> dict:
        return dict(zip(METRICS_HEADER, self.rows[-1])) if self.rows else {}

    def column(self, name: str) -> np.ndarray:
        k = METRICS_HEADER.index(name)
        return np.array([r[k] for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in self.rows:
            w.writerow([r[0]] + [fmt_float(v) for v in r[1:]])
        return buf.getvalue()


def fmt_float(x: float) -> str:
    """9 significant digits, the fixed float format of every emitted file."""
    return format(float(x), ".9g")


@dataclass
class Model:
    enc: Encoder
    readout: np.ndarray  # fixed
    bias: float
    # log-uncertainty head on tanh of the unpooled map (map_level only), so
    # log-sigma stays within sig_c +- |sig_w|_1; the per-pixel depth reuses
    # ``readout`` and ``bias`` so the map scale stays pinned
    sig_w: np.ndarray | None = None
    sig_c: float = 0.0

    def predict_depth(self, rho: np.ndarray) -> np.ndarray:
        return rho @ self.readout + self.bias


def init_model(cfg: TrainConfig, d_in: int, depths: np.ndarray, rng: np.random.Generator) -> Model:
    enc = Encoder.init(d_in, cfg.hidden, cfg.out_dim, rng, cfg.out_scale)
    u = rng.normal(size=cfg.out_dim)
    readout = cfg.readout_norm * u / np.linalg.norm(u)
    mean_depth = float(np.mean(depths))
    m = Model(enc=enc, readout=readout, bias=mean_depth)
    if cfg.experiment == "map_level":
        m.sig_w = np.zeros(cfg.out_dim)
        # start the uncertainty at the Laplace optimum for a constant prediction;
        # starting far below it makes exp(-log_sigma) blow up in the first steps
        m.sig_c = float(np.log(SQRT2 * max(np.mean(np.abs(depths - mean_depth)), 1e-6)))
    return m


def l1_depth_loss(model: Model, rho: np.ndarray, z: np.ndarray) -> tuple[LossOutput, float]:
    """Mean ``|z_hat - z|``; returns the loss (gradient on ``rho``) and the bias gradient."""
    res = model.predict_depth(rho) - z
    g = np.sign(res) / len(z)
    return LossOutput(float(np.abs(res).mean()), {"features": np.outer(g, model.readout)}), float(g.sum())


def _step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
    for k, g in grads.items():
        params[k] -= lr * g


def train(cfg: TrainConfig, data: NoisyScene | None = None) -> MetricsLog:
    if data is None:
        data = gen_noisy_scene(cfg.synth, with_maps=cfg.experiment == "map_level")
    if cfg.experiment == "map_level":
        return _train_maps(cfg, data)
    return _train_descriptors(cfg, data)


def _check(value: float, epoch: int, step: int, what: str):
    if not np.isfinite(value):
        raise TrainingDiverged(epoch, step, what)


def _train_descriptors(cfg: TrainConfig, data: NoisyScene) -> MetricsLog:
    rng = np.random.default_rng(cfg.seed)
    X, z = data.inputs, data.depths
    model = init_model(cfg, X.shape[1], z, rng)
    enc, lr = model.enc, cfg.learning_rate
    zero = LossOutput(0.0, {})
    out = MetricsLog()
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(z))
        sums = np.zeros(4)
        n_steps = 0
        for step, start in enumerate(range(0, len(z), cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            rho, cache = enc.forward(X[idx])
            base, g_bias = l1_depth_loss(model, rho, z[idx])
            qi = qi_loss(DescriptorSet(z[idx], rho), cfg.qi) if cfg.lambda_qi != 0 else zero
            tot = total_loss(base, qi, zero, cfg.lambda_qi, cfg.lambda_obj)
            _check(tot.value, epoch, step, "loss")
            grads, _ = enc.backward(cache, tot.grads["features"])
            _step(enc.params(), grads, lr)
            model.bias -= lr * g_bias
            sums += (base.value, qi.value, 0.0, tot.value)
            n_steps += 1
        _log_epoch(out, cfg, epoch, sums / max(n_steps, 1), model, enc.forward(X)[0], z)
    out.model = model
    return out


def _log_epoch(out: MetricsLog, cfg: TrainConfig, epoch: int, means, model: Model, rho_all, z):
    if not np.all(np.isfinite(rho_all)):
        raise TrainingDiverged(epoch, -1, "descriptors")
    ratio = violation_ratio(DescriptorSet(z, rho_all), cfg.qi)
    e_z = float(np.abs(model.predict_depth(rho_all) - z).mean())
    row = (epoch, *map(float, means), ratio, e_z)
    if not np.all(np.isfinite(row[1:])):
        raise TrainingDiverged(epoch, -1, "metrics row")
    out.append(*row)
    log.debug("epoch %d: %s", epoch, row)


# --------------------------------------------------------------------------
# map-level experiment


def _encode_map(enc: Encoder, fmap: np.ndarray):
    d_in, h, w = fmap.shape
    pix = fmap.reshape(d_in, -1).T
    rho, cache = enc.forward(pix)
    return rho.T.reshape(-1, h, w), cache


def _scene_descriptors(enc: Encoder, scene):
    hmap, cache = _encode_map(enc, scene.inputs)
    pooled = avg_pool_5x5(hmap)
    rho = np.stack([pooled[:, a.v, a.u] for a in scene.annotations])
    return hmap, cache, rho


def _train_maps(cfg: TrainConfig, data: NoisyScene) -> MetricsLog:
    rng = np.random.default_rng(cfg.seed)
    z_all = data.depths
    model = init_model(cfg, data.inputs.shape[1], z_all, rng)
    enc, lr = model.enc, cfg.learning_rate
    scenes = data.scenes
    per_batch = max(1, cfg.batch_size // max(1, cfg.synth.objects_per_scene))
    zero = LossOutput(0.0, {})
    out = MetricsLog()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(scenes))
        sums = np.zeros(4)
        n_steps = 0
        for step, start in enumerate(range(0, len(scenes), per_batch)):
            batch = [scenes[k] for k in order[start:start + per_batch]]
            fwd = [_scene_descriptors(enc, s) for s in batch]
            rho = np.vstack([f[2] for f in fwd])
            z = np.concatenate([[a.z for a in s.annotations] for s in batch])
            base, g_bias = l1_depth_loss(model, rho, z)
            qi = qi_loss(DescriptorSet(z, rho), cfg.qi) if cfg.lambda_qi != 0 else zero
            g_rho = base.grads["features"] + cfg.lambda_qi * qi.grads.get("features", 0.0)

            # object-wise depth head over every scene's foreground
            obj_val, n_fg = 0.0, 0
            g_maps = []
            g_obj = {"c": 0.0, "sw": np.zeros_like(model.sig_w), "sc": 0.0}
            samples = []
            for s, (hmap, _, _) in zip(batch, fwd):
                gt, mask = build_object_depth_map(s.annotations, hmap.shape[1:])
                zhat = np.tensordot(model.readout, hmap, axes=1) + model.bias
                squashed = np.tanh(hmap)
                lsig = np.tensordot(model.sig_w, squashed, axes=1) + model.sig_c
                samples.append((hmap, squashed, gt, mask, zhat, lsig))
                n_fg += int(mask.sum())
            for hmap, squashed, gt, mask, zhat, lsig in samples:
                lo = obj_depth_loss(DepthMapSample(zhat, lsig, gt, mask))
                # per-scene loss is a mean over its pixels; reweight to a batch-wide pixel mean
                wgt = mask.sum() / max(n_fg, 1)
                obj_val += wgt * lo.value
                gz, gs = wgt * lo.grads["pred_depth"], wgt * lo.grads["pred_log_sigma"]
                g_obj["c"] += gz.sum()
                g_obj["sw"] += np.tensordot(squashed, gs, axes=([1, 2], [0, 1]))
                g_obj["sc"] += gs.sum()
                g_maps.append(cfg.lambda_obj * (model.readout[:, None, None] * gz + model.sig_w[:, None, None] * (1.0 - squashed**2) * gs))
            tot_val = base.value + cfg.lambda_qi * qi.value + cfg.lambda_obj * obj_val
            _check(tot_val, epoch, step, "loss")

            grads_acc = {k: np.zeros_like(v) for k, v in enc.params().items()}
            offset = 0
            for s, (hmap, cache, r), gm in zip(batch, fwd, g_maps):
                k = len(s.annotations)
                g_h = gm + extract_descriptors_backward(hmap.shape, s.annotations, g_rho[offset:offset + k])
                offset += k
                g_pix = g_h.reshape(g_h.shape[0], -1).T
                g, _ = enc.backward(cache, g_pix)
                for name in grads_acc:
                    grads_acc[name] += g[name]
            _step(enc.params(), grads_acc, lr)
            model.bias -= lr * (g_bias + cfg.lambda_obj * g_obj["c"])
            model.sig_w -= lr * cfg.lambda_obj * g_obj["sw"]
            model.sig_c -= lr * cfg.lambda_obj * g_obj["sc"]
            sums += (base.value, qi.value, obj_val, tot_val)
            n_steps += 1
        rho_all = np.zeros((len(z_all), cfg.out_dim))
        for s in scenes:
            rho_all[s.objects] = _scene_descriptors(enc, s)[2]
        _log_epoch(out, cfg, epoch, sums / max(n_steps, 1), model, rho_all, z_all)
    out.model = model
    return out


# --------------------------------------------------------------------------
# sweeps


SWEEP_HEADER_LAMBDA = ("lambda_qi", "violation_ratio", "e_z")
SWEEP_HEADER_EPSILON = ("epsilon", "violation_ratio", "e_z")


def sweep_lambda(cfg: TrainConfig, lambdas) -> list[tuple[float, float, float]]:
    """One training run per ``lambda_qi`` with the shared seed; rows ordered as given."""
    rows = []
    for lam in lambdas:
        fin = train(replace(cfg, lambda_qi=float(lam))).final
        rows.append((float(lam), fin["violation_ratio"], fin["e_z"]))
    return rows


def sweep_epsilon(cfg: TrainConfig, epsilons) -> list[tuple[float, float, float]]:
    rows = []
    for eps in epsilons:
        fin = train(replace(cfg, qi=replace(cfg.qi, epsilon=float(eps)))).final
        rows.append((float(eps), fin["violation_ratio"], fin["e_z"]))
    return rows


def sweep_to_csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt_float(v) for v in r])
    return buf.getvalue()
