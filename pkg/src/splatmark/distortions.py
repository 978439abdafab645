"""Differentiable image distortions used for augmentation and robustness tests.

Images are (H, W, 3) or (B, H, W, 3) tensors in [0, 1]. Random parameters
(angle, scale factor, gain, noise) are drawn per batch element from a
``torch.Generator`` so results depend only on the seed, never on the image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError

KINDS = ("none", "noise", "rotation", "scaling", "blur", "crop", "brightness", "jpeg", "combined")

# Standard luminance / chrominance quantization tables (quality 50 baseline).
_LUMA_TABLE = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99,
]
_CHROMA_TABLE = [
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
] + [99] * 32


@dataclass(frozen=True)
class DistortionConfig:
    kinds: tuple = KINDS
    noise_sigma: float = 0.1
    noise_mean: float = 0.0
    max_rotation: float = math.pi / 6
    scale_range: tuple = (0.75, 1.25)
    blur_sigma: float = 0.1
    blur_kernel: int = 5
    crop_area: float = 0.4
    brightness_range: tuple = (0.5, 1.5)
    jpeg_quality: int = 50

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "scale_range", tuple(self.scale_range))
        object.__setattr__(self, "brightness_range", tuple(self.brightness_range))
        unknown = set(self.kinds) - set(KINDS)
        if unknown:
            raise ConfigError(f"unknown distortion kinds {sorted(unknown)}; choose from {', '.join(KINDS)}")
        if not self.kinds:
            raise ConfigError("at least one distortion kind must be enabled")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ConfigError(f"blur kernel size must be odd and positive, got {self.blur_kernel}")
        if not 0 < self.crop_area <= 1:
            raise ConfigError(f"crop area must lie in (0, 1], got {self.crop_area}")
        if not 1 <= self.jpeg_quality <= 100:
            raise ConfigError(f"jpeg quality must lie in [1, 100], got {self.jpeg_quality}")
        if self.noise_sigma < 0 or self.blur_sigma <= 0 or self.scale_range[0] <= 0:
            raise ConfigError("noise sigma, blur sigma and scale factors must be positive")


def _uniform(gen, B, lo, hi, like):
    return lo + (hi - lo) * torch.rand(B, generator=gen, dtype=like.dtype)


def _as_batch(image):
    single = image.dim() == 3
    return (image[None] if single else image), single


def _affine(x, theta):
    """Bilinear resampling of (B, H, W, 3) with per-sample 2x3 matrices, zero padding."""
    chw = x.permute(0, 3, 1, 2)
    grid = F.affine_grid(theta, list(chw.shape), align_corners=False)
    return F.grid_sample(chw, grid, mode="bilinear", padding_mode="zeros", align_corners=False).permute(0, 2, 3, 1)


def rotate(x, angles):
    cos, sin = torch.cos(angles), torch.sin(angles)
    zero = torch.zeros_like(angles)
    theta = torch.stack([torch.stack([cos, -sin, zero], -1), torch.stack([sin, cos, zero], -1)], -2)
    return _affine(x, theta)


def rescale(x, factors):
    """Zoom by ``factors`` about the image centre (output canvas unchanged)."""
    inv = 1.0 / factors
    zero = torch.zeros_like(factors)
    theta = torch.stack([torch.stack([inv, zero, zero], -1), torch.stack([zero, inv, zero], -1)], -2)
    return _affine(x, theta)


def gaussian_blur(x, sigma: float, size: int):
    r = torch.arange(size, dtype=x.dtype) - size // 2
    k1 = torch.exp(-0.5 * (r / sigma) ** 2)
    k1 = k1 / k1.sum()
    kernel = (k1[:, None] * k1[None, :]).expand(3, 1, size, size)
    chw = x.permute(0, 3, 1, 2)
    chw = F.conv2d(F.pad(chw, [size // 2] * 4, mode="replicate"), kernel, groups=3)
    return chw.permute(0, 2, 3, 1)


def center_crop(x, area: float):
    """Keep a centred window covering ``area`` of the image, zero elsewhere."""
    H, W = x.shape[1:3]
    side = math.sqrt(area)
    h, w = max(1, round(H * side)), max(1, round(W * side))
    top, left = (H - h) // 2, (W - w) // 2
    mask = torch.zeros(H, W, 1, dtype=x.dtype)
    mask[top : top + h, left : left + w] = 1
    return x * mask


# -- differentiable JPEG --------------------------------------------------------

def quality_scaled_table(table, quality: int) -> torch.Tensor:
    s = 5000 / quality if quality < 50 else 200 - 2 * quality
    t = torch.tensor(table, dtype=torch.float64).view(8, 8)
    return torch.clamp(torch.floor((t * s + 50) / 100), min=1)


def dct_matrix(dtype=torch.float64) -> torch.Tensor:
    k = torch.arange(8, dtype=torch.float64)
    m = torch.cos((2 * k[None, :] + 1) * k[:, None] * math.pi / 16) * math.sqrt(2 / 8)
    m[0] /= math.sqrt(2)
    return m.to(dtype)


def soft_round(x):
    """Rounding surrogate: exact integer part, cubic residual keeps a gradient."""
    r = torch.round(x).detach()
    return r + (x - r) ** 3


_RGB_TO_YCC = [[0.299, 0.587, 0.114], [-0.168736, -0.331264, 0.5], [0.5, -0.418688, -0.081312]]


def jpeg_approx(x, quality: int = 50, tables=None):
    """Blockwise DCT, quantize with a smooth rounding surrogate, dequantize, invert.

    Chroma is kept at full resolution. ``tables`` overrides the (luma, chroma)
    quantization tables, e.g. all ones for a near-lossless check.
    """
    B, H, W, _ = x.shape
    if tables is None:
        tables = (quality_scaled_table(_LUMA_TABLE, quality), quality_scaled_table(_CHROMA_TABLE, quality))
    q = torch.stack([tables[0], tables[1], tables[1]]).to(x.dtype)  # (3, 8, 8)
    m = torch.as_tensor(_RGB_TO_YCC, dtype=x.dtype)
    ycc = x @ m.T * 255
    ycc = ycc + torch.tensor([-128.0, 0.0, 0.0], dtype=x.dtype)
    ph, pw = (-H) % 8, (-W) % 8
    chw = F.pad(ycc.permute(0, 3, 1, 2), [0, pw, 0, ph], mode="replicate")
    Hp, Wp = chw.shape[-2:]
    blocks = chw.reshape(B, 3, Hp // 8, 8, Wp // 8, 8).permute(0, 1, 2, 4, 3, 5)  # (B,3,h,w,8,8)
    D = dct_matrix(x.dtype)
    coef = D @ blocks @ D.T
    q_ = q[None, :, None, None]
    coef = soft_round(coef / q_) * q_
    blocks = D.T @ coef @ D
    chw = blocks.permute(0, 1, 2, 4, 3, 5).reshape(B, 3, Hp, Wp)[..., :H, :W]
    ycc = chw.permute(0, 2, 3, 1) + torch.tensor([128.0, 0.0, 0.0], dtype=x.dtype)
    return (ycc / 255) @ torch.linalg.inv(m).T


# -- dispatch --------------------------------------------------------------------

def apply(image: torch.Tensor, kind: str, cfg: DistortionConfig = DistortionConfig(),
          gen: torch.Generator | None = None) -> torch.Tensor:
    """Apply one distortion kind; the result is clamped to [0, 1]."""
    if kind not in KINDS:
        raise ConfigError(f"unknown distortion kind {kind!r}; choose from {', '.join(KINDS)}")
    x, single = _as_batch(image)
    gen = gen if gen is not None else torch.Generator().manual_seed(0)
    B = x.shape[0]
    if kind == "none":
        y = x
    elif kind == "noise":
        noise = torch.randn(x.shape, generator=gen, dtype=x.dtype)
        y = x + cfg.noise_mean + cfg.noise_sigma * noise
    elif kind == "rotation":
        y = rotate(x, _uniform(gen, B, -cfg.max_rotation, cfg.max_rotation, x))
    elif kind == "scaling":
        y = rescale(x, _uniform(gen, B, *cfg.scale_range, x))
    elif kind == "blur":
        y = gaussian_blur(x, cfg.blur_sigma, cfg.blur_kernel)
    elif kind == "crop":
        y = center_crop(x, cfg.crop_area)
    elif kind == "brightness":
        y = x * _uniform(gen, B, *cfg.brightness_range, x)[:, None, None, None]
    elif kind == "jpeg":
        y = jpeg_approx(x, cfg.jpeg_quality)
    else:  # combined
        y = jpeg_approx(gaussian_blur(center_crop(x, cfg.crop_area), cfg.blur_sigma, cfg.blur_kernel), cfg.jpeg_quality)
    y = y.clamp(0.0, 1.0)
    return y[0] if single else y


def sample_kind(cfg: DistortionConfig, gen: torch.Generator) -> str:
    return cfg.kinds[int(torch.randint(len(cfg.kinds), (1,), generator=gen))]


def random_distortions(image: torch.Tensor, count: int, cfg: DistortionConfig, gen: torch.Generator) -> torch.Tensor:
    """``count`` copies of one image, each passed through a randomly chosen kind."""
    kinds = [sample_kind(cfg, gen) for _ in range(count)]
    if count == 0:
        return image.new_empty(0, *image.shape)
    out = [None] * count
    batch = image[None].expand(count, *image.shape)
    for kind in dict.fromkeys(kinds):
        idx = [i for i, k in enumerate(kinds) if k == kind]
        for i, row in zip(idx, apply(batch[idx], kind, cfg, gen)):
            out[i] = row
    return torch.stack(out)
