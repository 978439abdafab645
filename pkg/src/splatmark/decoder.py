"""Dual-branch message decoder.

The chunk branch classifies each of the C chunks into one of 2^n states and
projects the state posterior onto bits through the binary codebook. The bit
branch predicts all L bits directly with G grouped linear heads refined by a
gated self-attention across groups.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .codec import make_codebook
from .encoders import EMBED_DIM
from .errors import ConfigError, FormatError
from .layers import EncoderBlock, bce_with_logits


@dataclass(frozen=True)
class DecoderConfig:
    L: int
    n: int = 1
    G: int = 1
    d: int = 128
    layers: int = 2
    heads: int = 4
    ff: int | None = None  # defaults to 4 * d
    phi_hidden: int = 1024
    hidden: int = 512
    clamp_eps: float = 1e-6
    gate_init: float = 0.1

    def __post_init__(self):
        if self.G < 1 or self.L % self.G:
            raise ConfigError(f"L mod G must be 0: L={self.L} is not divisible by G={self.G}")
        if self.d % self.heads:
            raise ConfigError(f"{self.heads} attention heads do not divide d={self.d}")
        if not 0 < self.clamp_eps < 0.5:
            raise ConfigError(f"clamp_eps must lie in (0, 0.5), got {self.clamp_eps}")

    @property
    def C(self) -> int:
        return math.ceil(self.L / self.n)

    @property
    def num_states(self) -> int:
        return 1 << self.n

    @property
    def Lg(self) -> int:
        return self.L // self.G

    @property
    def ff_width(self) -> int:
        return self.ff or 4 * self.d


@dataclass
class DecoderOutput:
    chunk_logits: torch.Tensor  # (B, C, 2^n)
    proj_probs: torch.Tensor  # (B, L)
    proj_logits: torch.Tensor  # (B, L)
    bit_logits: torch.Tensor  # (B, L)


def chunks_to_bits(chunk_logits: torch.Tensor, codebook: torch.Tensor, L: int, eps: float = 1e-6):
    """Marginal bit probabilities and logits from chunk-state logits.

    p[i, r] = sum_j softmax(s_i)_j * B[j, r], flattened chunk-major, trailing
    pad bits dropped, clamped to [eps, 1 - eps].
    """
    probs = chunk_logits.softmax(dim=-1) @ codebook.to(chunk_logits.dtype)
    p = probs.flatten(-2)[..., :L].clamp(eps, 1 - eps)
    return p, torch.log(p) - torch.log1p(-p)


def group_bits(z: torch.Tensor, G: int) -> torch.Tensor:
    """(…, L) -> (…, L/G, G) with Z[l, g] = z[g * L_g + l]."""
    return z.unflatten(-1, (G, z.shape[-1] // G)).transpose(-1, -2)


def ungroup_bits(Z: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`group_bits`."""
    return Z.transpose(-1, -2).flatten(-2)


class DualBranchDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        C, d, S = cfg.C, cfg.d, cfg.num_states
        # chunk branch
        self.phi = nn.Sequential(nn.Linear(EMBED_DIM, cfg.phi_hidden), nn.GELU(), nn.Linear(cfg.phi_hidden, C * d))
        self.chunk_pos = nn.Parameter(torch.randn(C, d) * 0.02)
        self.blocks = nn.ModuleList(EncoderBlock(d, cfg.heads, cfg.ff_width) for _ in range(cfg.layers))
        self.chunk_norm = nn.LayerNorm(d)
        self.classifier = nn.Linear(d, S)
        # bit branch
        G, Lg = cfg.G, cfg.Lg
        self.feature = nn.Sequential(nn.Linear(EMBED_DIM, cfg.hidden), nn.GELU())
        bound = 1 / math.sqrt(cfg.hidden)
        self.head_weight = nn.Parameter(torch.empty(G, Lg, cfg.hidden).uniform_(-bound, bound))
        self.head_bias = nn.Parameter(torch.empty(G, Lg).uniform_(-bound, bound))
        self.bit_pos = nn.Parameter(torch.randn(cfg.L) * 0.02)
        self.W_q = nn.Parameter(torch.randn(G, G) / math.sqrt(G))
        self.W_k = nn.Parameter(torch.randn(G, G) / math.sqrt(G))
        self.W_v = nn.Parameter(torch.randn(G, G) / math.sqrt(G))
        self.gate = nn.Parameter(torch.full((G,), cfg.gate_init))
        self.bit_norm = nn.LayerNorm(cfg.L)
        self.register_buffer("codebook", torch.from_numpy(make_codebook(cfg.n).astype(np.float32)), persistent=False)

    def chunk_branch(self, f: torch.Tensor) -> torch.Tensor:
        if f.dim() == 1:
            return self.chunk_branch(f[None])[0]
        h = self.phi(f).unflatten(-1, (self.cfg.C, self.cfg.d)) + self.chunk_pos
        for block in self.blocks:
            h = block(h)
        return self.classifier(self.chunk_norm(h))

    def raw_bit_logits(self, f: torch.Tensor) -> torch.Tensor:
        """z = concat of the G head outputs plus the bit positional encoding."""
        hidden = self.feature(f)
        z = torch.einsum("...h,glh->...gl", hidden, self.head_weight) + self.head_bias
        return z.flatten(-2) + self.bit_pos

    def bit_branch(self, f: torch.Tensor) -> torch.Tensor:
        z = self.raw_bit_logits(f)
        Z = group_bits(z, self.cfg.G)
        Q, K, V = Z @ self.W_q, Z @ self.W_k, Z @ self.W_v
        att = (Q @ K.transpose(-1, -2) / math.sqrt(self.cfg.G)).softmax(dim=-1)
        Z_ref = self.gate * (att @ V)
        return self.bit_norm(ungroup_bits(Z_ref)) + z

    def forward(self, f: torch.Tensor) -> DecoderOutput:
        if f.shape[-1] != EMBED_DIM:
            raise FormatError(f"decoder expects {EMBED_DIM}-d embeddings, got {f.shape[-1]}")
        s = self.chunk_branch(f)
        p, m_proj = chunks_to_bits(s, self.codebook, self.cfg.L, self.cfg.clamp_eps)
        return DecoderOutput(s, p, m_proj, self.bit_branch(f))


def decoder_loss(out: DecoderOutput, bits: torch.Tensor, chunk_targets: torch.Tensor,
                 w_chunk: float = 1.0, w_proj: float = 0.25, w_bit: float = 1.0):
    """Weighted chunk CE (summed over chunks, batch mean) + projected BCE + direct BCE.

    Returns ``(total, {"chunk": ..., "proj": ..., "bit": ...})``.
    """
    B, C, S = out.chunk_logits.shape
    if bits.shape != out.bit_logits.shape or chunk_targets.shape != (B, C):
        raise FormatError(
            f"target shapes {tuple(bits.shape)}, {tuple(chunk_targets.shape)} do not match "
            f"decoder output {tuple(out.bit_logits.shape)}, {(B, C)}"
        )
    chunk = F.cross_entropy(out.chunk_logits.reshape(B * C, S), chunk_targets.reshape(-1), reduction="sum") / B
    proj = bce_with_logits(out.proj_logits, bits)
    bit = bce_with_logits(out.bit_logits, bits)
    total = w_chunk * chunk + w_proj * proj + w_bit * bit
    return total, {"chunk": chunk, "proj": proj, "bit": bit}


def predict_bits(logits) -> np.ndarray:
    """Hard decision: 1 iff logit > 0 (a logit of exactly 0 decodes to 0)."""
    logits = logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
    return (logits > 0).astype(np.uint8)


def bit_accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise FormatError(f"prediction shape {pred.shape} does not match truth {truth.shape}")
    return float((pred == truth).mean()) if pred.size else float("nan")
