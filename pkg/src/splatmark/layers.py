"""Small building blocks shared by the encoders and the decoder."""
from __future__ import annotations

import hashlib
import math

import torch
import torch.nn.functional as F
from torch import nn


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"{heads} heads do not divide width {dim}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, key_mask=None):
        B, T, D = x.shape
        q, k, v = self.qkv(x).view(B, T, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        att = q @ k.transpose(-1, -2) / math.sqrt(D // self.heads)
        if key_mask is not None:
            att = att.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        y = att.softmax(dim=-1) @ v
        return self.out(y.transpose(1, 2).reshape(B, T, D))


class EncoderBlock(nn.Module):
    """Pre-norm transformer block: x + attn(LN x), then x + ffn(LN x)."""

    def __init__(self, dim: int, heads: int, ff: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff), nn.GELU(), nn.Linear(ff, dim))

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.norm1(x), key_mask)
        return x + self.ff(self.norm2(x))


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def gaussian_init_(module: nn.Module, gen: torch.Generator, gain: float = 1.0) -> None:
    """Seeded init: weights ~ N(0, gain^2 / fan_in), biases zero, norms identity."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * gain / math.sqrt(fan_in))
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def freeze_(module: nn.Module) -> nn.Module:
    module.requires_grad_(False)
    return module.eval()


def parameter_hash(module_or_state) -> str:
    """sha256 over name-sorted parameter/buffer bytes."""
    state = module_or_state.state_dict() if isinstance(module_or_state, nn.Module) else module_or_state
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name]
        t = t.detach().cpu().contiguous().numpy() if isinstance(t, torch.Tensor) else t
        h.update(name.encode())
        h.update(str(t.dtype).encode() + str(t.shape).encode())
        h.update(t.tobytes())
    return h.hexdigest()


def bce_with_logits(logits, target):
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))
