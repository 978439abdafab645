"""Differentiable 2D Gaussian-splat carrier and its model-level attacks.

A scene is a set of anisotropic 2D Gaussians with fixed depth ranks,
composited front to back over a black background. The watermark channel is a
per-primitive RGB offset added to the base colors; everything else about the
scene stays frozen while a message is embedded.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, FormatError

SCENE_FORMAT = "splatmark-scene"
SCENE_VERSION = 1
MIN_SCALE = 1e-3
CLAMP_MARGIN = 0.05


@dataclass
class SplatScene:
    """Primitive attributes as parallel arrays (float64 except ``depth``)."""

    means: np.ndarray  # (N, 2) pixel coordinates, x then y
    scales: np.ndarray  # (N, 2) standard deviations along the local axes
    rotations: np.ndarray  # (N,) radians
    colors: np.ndarray  # (N, 3) base RGB
    opacities: np.ndarray  # (N,)
    depth: np.ndarray  # (N,) unique int ranks, smaller is nearer
    height: int
    width: int

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 2)
        N = len(self.means)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(N, 2)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(N)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(N, 3)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(N)
        self.depth = np.asarray(self.depth, dtype=np.int64).reshape(N)
        self.validate()

    def __len__(self):
        return len(self.means)

    def validate(self) -> None:
        if len(self) < 1:
            raise ConfigError("a scene needs at least one primitive")
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"canvas must be non-empty, got {self.height}x{self.width}")
        for name in ("means", "scales", "rotations", "colors", "opacities"):
            if not np.isfinite(getattr(self, name)).all():
                raise ConfigError(f"scene attribute {name} has non-finite values")
        if (self.scales <= MIN_SCALE).any():
            raise ConfigError(f"degenerate covariance: every scale must exceed {MIN_SCALE}")
        if ((self.opacities <= 0) | (self.opacities > 1)).any():
            raise ConfigError("opacities must lie in (0, 1]")
        if len(np.unique(self.depth)) != len(self):
            raise ConfigError("depth ranks must be unique")

    def copy(self) -> "SplatScene":
        return SplatScene(self.means.copy(), self.scales.copy(), self.rotations.copy(), self.colors.copy(),
                          self.opacities.copy(), self.depth.copy(), self.height, self.width)

    def subset(self, idx) -> "SplatScene":
        idx = np.asarray(idx, dtype=np.int64)
        return SplatScene(self.means[idx], self.scales[idx], self.rotations[idx], self.colors[idx],
                          self.opacities[idx], self.depth[idx], self.height, self.width)

    def with_offsets(self, offsets) -> "SplatScene":
        """Bake color offsets into the base colors (the form attacks operate on)."""
        offsets = np.asarray(torch.as_tensor(offsets).detach().cpu(), dtype=np.float64).reshape(len(self), 3)
        out = self.copy()
        out.colors = out.colors + offsets
        return out

    def tensors(self, dtype=torch.float64) -> dict:
        return {
            "means": torch.tensor(self.means, dtype=dtype),
            "scales": torch.tensor(self.scales, dtype=dtype),
            "rotations": torch.tensor(self.rotations, dtype=dtype),
            "colors": torch.tensor(self.colors, dtype=dtype),
            "opacities": torch.tensor(self.opacities, dtype=dtype),
        }

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256(f"{self.height}x{self.width}".encode())
        for name in ("means", "scales", "rotations", "colors", "opacities", "depth"):
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        return h.hexdigest()

    # -- files --------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": SCENE_FORMAT,
            "version": SCENE_VERSION,
            "height": self.height,
            "width": self.width,
            "primitives": [
                {
                    "mean": self.means[i].tolist(),
                    "scale": self.scales[i].tolist(),
                    "rotation": float(self.rotations[i]),
                    "color": self.colors[i].tolist(),
                    "opacity": float(self.opacities[i]),
                    "depth": int(self.depth[i]),
                }
                for i in range(len(self))
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplatScene":
        if d.get("format") != SCENE_FORMAT:
            raise FormatError(f"not a scene description (format={d.get('format')!r})")
        prims = d["primitives"]
        return cls(
            means=[p["mean"] for p in prims],
            scales=[p["scale"] for p in prims],
            rotations=[p["rotation"] for p in prims],
            colors=[p["color"] for p in prims],
            opacities=[p["opacity"] for p in prims],
            depth=[p["depth"] for p in prims],
            height=int(d["height"]),
            width=int(d["width"]),
        )


def save_scene(path, scene: SplatScene) -> None:
    with open(path, "w") as fh:
        json.dump(scene.to_dict(), fh, indent=1)


def load_scene(path) -> SplatScene:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid scene file ({exc})") from exc
    return SplatScene.from_dict(d)


def generate_scene(count: int = 256, height: int = 64, width: int = 64, seed: int = 0) -> SplatScene:
    """Seeded procedural scene: a dense layer of mid-sized blobs over large backdrop blobs."""
    if count < 1:
        raise ConfigError(f"primitive count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    size = min(height, width)
    n_back = max(1, count // 8)
    scales = np.exp(rng.uniform(np.log(size / 24), np.log(size / 8), size=(count, 2)))
    scales[-n_back:] = rng.uniform(size / 5, size / 3, size=(n_back, 2))
    # backdrop blobs take the farthest ranks
    depth = np.concatenate([rng.permutation(count - n_back), np.arange(count - n_back, count)])
    return SplatScene(
        means=rng.uniform([0, 0], [width, height], size=(count, 2)),
        scales=scales,
        rotations=rng.uniform(-math.pi, math.pi, size=count),
        colors=rng.uniform(0.1, 0.9, size=(count, 3)),
        opacities=rng.uniform(0.6, 1.0, size=count),
        depth=depth,
        height=height,
        width=width,
    )


# -- rendering ---------------------------------------------------------------

def smooth_clamp(x: torch.Tensor, margin: float = CLAMP_MARGIN) -> torch.Tensor:
    """Identity on [margin, 1 - margin], tanh saturation into (0, 1) outside.

    Continuous with continuous first derivative, so gradients never vanish
    abruptly at the range boundary.
    """
    hi = 1 - margin
    upper = hi + margin * torch.tanh((x - hi) / margin)
    lower = margin - margin * torch.tanh((margin - x) / margin)
    return torch.where(x > hi, upper, torch.where(x < margin, lower, x))


def compositing_weights(means, scales, rotations, opacities, depth, height: int, width: int) -> torch.Tensor:
    """Per-pixel, per-primitive blending weights alpha_i * T_i, shape (H*W, N).

    Columns follow the input primitive order; compositing runs front to back
    by ascending depth rank.
    """
    order = torch.as_tensor(np.argsort(np.asarray(depth), kind="stable"))
    dtype = means.dtype
    ys, xs = torch.meshgrid(torch.arange(height, dtype=dtype) + 0.5, torch.arange(width, dtype=dtype) + 0.5,
                            indexing="ij")
    px = torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=1)  # (P, 2)
    m, s, r, o = means[order], scales[order], rotations[order], opacities[order]
    dx = px[:, None, 0] - m[None, :, 0]
    dy = px[:, None, 1] - m[None, :, 1]
    cos, sin = torch.cos(r), torch.sin(r)
    u = cos * dx + sin * dy
    v = -sin * dx + cos * dy
    alpha = o * torch.exp(-0.5 * ((u / s[:, 0]) ** 2 + (v / s[:, 1]) ** 2))
    trans = torch.cumprod(torch.cat([torch.ones_like(alpha[:, :1]), 1 - alpha[:, :-1]], dim=1), dim=1)
    w_sorted = alpha * trans
    inverse = torch.empty_like(order)
    inverse[order] = torch.arange(len(order))
    return w_sorted[:, inverse]


def composite(weights: torch.Tensor, colors: torch.Tensor, offsets: torch.Tensor | None, height: int, width: int):
    """Blend smooth-clamped colors with precomputed weights into an (H, W, 3) image."""
    c = colors if offsets is None else colors + offsets
    image = weights @ smooth_clamp(c)
    return image.clamp(0.0, 1.0).reshape(height, width, 3)


def render(scene: SplatScene, offsets=None, dtype=torch.float64) -> torch.Tensor:
    """Render the scene (with optional color offsets) to an (H, W, 3) image in [0, 1]."""
    t = scene.tensors(dtype)
    w = compositing_weights(t["means"], t["scales"], t["rotations"], t["opacities"], scene.depth,
                            scene.height, scene.width)
    if offsets is not None:
        offsets = torch.as_tensor(offsets, dtype=dtype)
        if offsets.shape != (len(scene), 3):
            raise FormatError(f"offsets must have shape ({len(scene)}, 3), got {tuple(offsets.shape)}")
    return composite(w, t["colors"], offsets, scene.height, scene.width)


class SceneRenderer:
    """Caches the compositing weights of a frozen scene; only colors vary."""

    def __init__(self, scene: SplatScene, dtype=torch.float32):
        self.scene = scene
        t = scene.tensors(torch.float64)
        with torch.no_grad():
            w = compositing_weights(t["means"], t["scales"], t["rotations"], t["opacities"], scene.depth,
                                    scene.height, scene.width)
        self.weights = w.to(dtype)
        self.colors = t["colors"].to(dtype)
        self.dtype = dtype

    def __call__(self, offsets=None) -> torch.Tensor:
        return composite(self.weights, self.colors, offsets, self.scene.height, self.scene.width)


# -- model attacks -------------------------------------------------------------

def attack_noise(scene: SplatScene, sigma: float = 0.1, rng: np.random.Generator | None = None) -> SplatScene:
    """Zero-mean Gaussian noise on the color channel of a copy of the scene."""
    if sigma < 0:
        raise ConfigError(f"noise sigma must be >= 0, got {sigma}")
    out = scene.copy()
    if sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        out.colors = out.colors + rng.normal(0.0, sigma, size=out.colors.shape)
    return out


def _attack_count(scene: SplatScene, ratio: float) -> int:
    if not 0 <= ratio <= 1:
        raise ConfigError(f"attack ratio must lie in [0, 1], got {ratio}")
    return math.floor(ratio * len(scene) + 1e-9)


def attack_prune(scene: SplatScene, ratio: float = 0.2, rng: np.random.Generator | None = None) -> SplatScene:
    """Remove floor(ratio * N) uniformly chosen primitives (at least one survives)."""
    k = min(_attack_count(scene, ratio), len(scene) - 1)
    if k == 0:
        return scene.copy()
    rng = rng if rng is not None else np.random.default_rng(0)
    drop = rng.choice(len(scene), size=k, replace=False)
    return scene.subset(np.setdiff1d(np.arange(len(scene)), drop))


def attack_clone(scene: SplatScene, ratio: float = 0.2, rng: np.random.Generator | None = None) -> SplatScene:
    """Duplicate floor(ratio * N) primitives; clones get fresh ranks behind every original."""
    k = _attack_count(scene, ratio)
    if k == 0:
        return scene.copy()
    rng = rng if rng is not None else np.random.default_rng(0)
    src = np.sort(rng.choice(len(scene), size=k, replace=False))
    idx = np.concatenate([np.arange(len(scene)), src])
    return SplatScene(scene.means[idx], scene.scales[idx], scene.rotations[idx], scene.colors[idx],
                      scene.opacities[idx], np.concatenate([scene.depth, scene.depth.max() + 1 + np.arange(k)]),
                      scene.height, scene.width)


SCENE_ATTACKS = {"prune": attack_prune, "clone": attack_clone, "noise3d": attack_noise}
