"""Deterministic synthetic datasets.

Random streams come from ``numpy.random.default_rng(seed)``, i.e. the PCG64
bit generator. ``gen_collinear`` and ``gen_arc`` draw no random numbers at
all, so they are reproducible across languages and builds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .losses import ObjectAnnotation
from .quasi_iso import DescriptorSet

N_GEOMETRIC = 2


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    ``radius`` is only read by the arc generator, whose depth is the arc
    parameter. ``grid``, ``objects_per_scene`` and ``background`` shape the
    feature-map variant of the noisy scene.
    """

    kind: str = "noisy_scene"
    n: int = 512
    dim: int = 8
    nuisance_dims: int = 6
    noise_sigma: float = 0.02
    depth_range: tuple[float, float] = (1.0, 60.0)
    seed: int = 0
    radius: float = 10.0
    grid: tuple[int, int] = (24, 24)
    objects_per_scene: int = 4

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be ≥ 1")
        lo, hi = self.depth_range
        if not hi > lo:
            raise ValueError("depth_range must be increasing")
        if self.kind != "arc" and not lo > 0:
            raise ValueError("depths must be > 0")
        if self.kind not in ("collinear", "arc", "noisy_scene"):
            raise ValueError(f"unknown synth kind {self.kind!r}")


def generate(cfg: SynthConfig) -> DescriptorSet:
    """Descriptor-set form of any generator (the noisy scene yields raw inputs as features)."""
    if cfg.kind == "collinear":
        return gen_collinear(cfg)
    if cfg.kind == "arc":
        return gen_arc(cfg)
    scene = gen_noisy_scene(cfg)
    return DescriptorSet(scene.depths, scene.inputs)


def _even_depths(cfg: SynthConfig) -> np.ndarray:
    lo, hi = cfg.depth_range
    if cfg.n == 1:
        return np.array([float(lo)])
    return np.linspace(lo, hi, cfg.n)


def gen_collinear(cfg: SynthConfig) -> DescriptorSet:
    """``rho_l = z_l * u`` with ``u = +-e_k``; the axis and sign follow the seed.

    A signed basis vector keeps every feature distance bit-equal to the depth
    gap, so the set is an exact isometry under any p-norm.
    """
    if cfg.dim < 1:
        raise ValueError("dim must be ≥ 1")
    z = _even_depths(cfg)
    k = cfg.seed % cfg.dim
    sign = -1.0 if (cfg.seed // cfg.dim) % 2 else 1.0
    feats = np.zeros((cfg.n, cfg.dim))
    feats[:, k] = sign * z
    return DescriptorSet(z, feats)


def gen_arc(cfg: SynthConfig) -> DescriptorSet:
    """Evenly spaced points on a circle of ``cfg.radius``, parameterised by arc length."""
    if cfg.dim != 2:
        raise ValueError("arc embedding needs dim = 2")
    if cfg.n < 2:
        raise ValueError("arc embedding needs n ≥ 2")
    lo, hi = cfg.depth_range
    r = float(cfg.radius)
    if hi - lo > 2 * math.pi * r:
        raise ValueError(f"arc span {hi - lo:g} exceeds the full circle {2 * math.pi * r:g}")
    z = _even_depths(cfg)
    feats = r * np.column_stack([np.cos(z / r), np.sin(z / r)])
    return DescriptorSet(z, feats)


def arc_chord(gap: float, radius: float) -> float:
    return 2.0 * radius * math.sin(gap / (2.0 * radius))


@dataclass
class Scene:
    """One feature-map scene: a ``(D_in, H, W)`` input map and its objects."""

    inputs: np.ndarray
    annotations: list[ObjectAnnotation]
    objects: np.ndarray  # indices into NoisyScene.depths


@dataclass
class NoisyScene:
    inputs: np.ndarray
    depths: np.ndarray
    scenes: list[Scene] = field(default_factory=list)
    background: np.ndarray | None = None


def geometric_inputs(z: np.ndarray, depth_range: tuple[float, float]) -> np.ndarray:
    """Log-depth centred on the middle of the range, and apparent height ``z_min / z``."""
    z = np.asarray(z, dtype=np.float64)
    lo, hi = depth_range
    return np.column_stack([np.log(2.0 * z / (lo + hi)), lo / z])


def gen_noisy_scene(cfg: SynthConfig, with_maps: bool = False) -> NoisyScene:
    """Objects whose inputs mix depth cues with depth-independent nuisance.

    Each input row is ``[log(z/z_mid), z_min/z, nuisance...]`` plus Gaussian
    noise of ``noise_sigma`` on every column. With ``with_maps`` the objects
    are also laid out on feature-map scenes: every box has side ``~ 1/z``,
    box pixels carry the object's input row with independent pixel noise and
    the background carries a fixed random row.
    """
    if cfg.dim != N_GEOMETRIC + cfg.nuisance_dims:
        raise ValueError(f"dim must equal {N_GEOMETRIC} geometric + nuisance_dims")
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.depth_range
    z = rng.uniform(lo, hi, size=cfg.n)
    nuisance = rng.normal(0.0, 1.0, size=(cfg.n, cfg.nuisance_dims))
    clean = np.hstack([geometric_inputs(z, cfg.depth_range), nuisance])
    noise = rng.normal(0.0, 1.0, size=clean.shape) * cfg.noise_sigma
    out = NoisyScene(inputs=clean + noise, depths=z)
    if with_maps:
        _lay_out_scenes(cfg, rng, out, clean)
    return out


def _lay_out_scenes(cfg: SynthConfig, rng: np.random.Generator, out: NoisyScene, clean: np.ndarray):
    h, w = cfg.grid
    lo, _ = cfg.depth_range
    d_in = clean.shape[1]
    out.background = rng.normal(0.0, 1.0, size=d_in)
    order = np.arange(cfg.n)
    per = max(1, cfg.objects_per_scene)
    for start in range(0, cfg.n, per):
        idx = order[start:start + per]
        fmap = np.repeat(out.background[:, None, None], h, axis=1).repeat(w, axis=2)
        anns = []
        # paint far objects first so nearer ones end up on top
        for k in sorted(idx, key=lambda t: -out.depths[t]):
            zk = out.depths[k]
            # never smaller than the pooling window, so a descriptor read at the
            # centre of an unoccluded box averages only that object's pixels
            side = int(np.clip(round(2.0 * min(h, w) * lo / zk), 5, min(h, w) // 2))
            half = side // 2
            u = int(rng.integers(half, w - (side - half) + 1))
            v = int(rng.integers(half, h - (side - half) + 1))
            box = (u - half, v - half, u - half + side, v - half + side)
            pix = clean[k][:, None, None] + cfg.noise_sigma * rng.normal(0.0, 1.0, size=(d_in, side, side))
            fmap[:, box[1]:box[3], box[0]:box[2]] = pix
            anns.append(ObjectAnnotation(u=u, v=v, z=float(zk), box=box, id=str(k)))
        anns.sort(key=lambda a: int(a.id))
        out.scenes.append(Scene(inputs=fmap, annotations=anns, objects=np.array(sorted(idx))))


def with_seed(cfg: SynthConfig, seed: int) -> SynthConfig:
    return replace(cfg, seed=seed)
