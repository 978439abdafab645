"""Image fidelity metrics: PSNR and windowed SSIM."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

PSNR_CAP = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give PSNR_CAP."""
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    return PSNR_CAP if mse == 0 else min(PSNR_CAP, 10 * math.log10(1 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    r = torch.arange(size, dtype=torch.float64) - size // 2
    g = torch.exp(-(r**2) / (2 * sigma**2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).to(dtype)


def ssim_map(a: torch.Tensor, b: torch.Tensor, size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Per-pixel, per-channel SSIM of (H, W, C) or (B, H, W, C) images (zero-padded windows)."""
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    single = a.dim() == 3
    x = (a[None] if single else a).permute(0, 3, 1, 2)
    y = (b[None] if single else b).permute(0, 3, 1, 2).to(x.dtype)
    C = x.shape[1]
    w = gaussian_window(size, sigma, x.dtype).expand(C, 1, size, size)

    def blur(t):
        return F.conv2d(t, w, padding=size // 2, groups=C)

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x**2
    var_y = blur(y * y) - mu_y**2
    cov = blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    out = (num / den).permute(0, 2, 3, 1)
    return out[0] if single else out


def ssim(a, b, size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Mean SSIM over windows and channels (a differentiable scalar tensor)."""
    return ssim_map(torch.as_tensor(a), torch.as_tensor(b), size, sigma).mean()
