"""Frozen surrogate text and image encoders.

Both are seeded, randomly initialised and never trained. They keep the
interface of a CLIP-style encoder pair: 77-token text context in, unit-norm
512-d vectors out. They are not aligned with each other; the embedder only
needs the image path to be differentiable.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .codec import CONTEXT_LEN, END_ID, LookupTable, CodecConfig, bits_to_str, tokenize
from .errors import FormatError
from .layers import EncoderBlock, freeze_, gaussian_init_, l2_normalize, parameter_hash

EMBED_DIM = 512
EMBED_FORMAT = "splatmark-embeddings"
EMBED_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    seed: int = 1234
    vocab_size: int = 8192
    text_dim: int = 128
    text_layers: int = 2
    text_heads: int = 4
    text_ff: int = 256
    pooling: str = "mean"
    image_channels: tuple = (32, 64, 128)
    image_grid: int = 8
    image_smoothing: int = 5  # box low-pass stem width (1 disables)
    image_gain: float = 6.0


class TextEncoder(nn.Module):
    """Token + position embeddings, pre-norm attention blocks, masked mean pool."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        d = cfg.text_dim
        gen = torch.Generator().manual_seed(cfg.seed)
        self.token = nn.Parameter(torch.randn(cfg.vocab_size, d, generator=gen))
        self.position = nn.Parameter(torch.randn(CONTEXT_LEN, d, generator=gen))
        self.blocks = nn.ModuleList(EncoderBlock(d, cfg.text_heads, cfg.text_ff) for _ in range(cfg.text_layers))
        self.norm = nn.LayerNorm(d, elementwise_affine=False)
        self.proj = nn.Linear(d, EMBED_DIM, bias=False)
        gaussian_init_(self.blocks, gen)
        gaussian_init_(self.proj, gen)
        freeze_(self)

    @torch.no_grad()
    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long)
        single = ids.dim() == 1
        ids = ids.view(-1, ids.shape[-1])
        if ids.shape[1] != CONTEXT_LEN:
            raise FormatError(f"token sequences must have {CONTEXT_LEN} ids, got {ids.shape[1]}")
        # Everything after the end token is padding; it is masked out of both
        # attention and pooling, so trimming to the longest prefix is exact.
        is_end = ids == END_ID
        lengths = torch.where(is_end.any(1), is_end.int().argmax(1) + 1, torch.full_like(ids[:, 0], CONTEXT_LEN))
        T = int(lengths.max())
        mask = torch.arange(T)[None, :] < lengths[:, None]
        x = self.token[ids[:, :T]] + self.position[:T]
        key_mask = None if bool(mask.all()) else mask
        for block in self.blocks:
            x = block(x, key_mask)
        x = self.norm(x)
        m = mask.to(x.dtype)[..., None]
        pooled = (x * m).sum(1) / m.sum(1)
        out = l2_normalize(self.proj(pooled))
        return out[0] if single else out


class ImageEncoder(nn.Module):
    """Standardize, low-pass, strided tanh convs, pool to a grid, flatten, project.

    Per-image standardization makes the embedding ignore global gain and the
    box low-pass stem suppresses pixel noise. Keeping the spatial layout
    (instead of global pooling) lets every image region steer its own
    embedding directions, like the token grid of a patch-based encoder.
    """

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed + 1)
        layers, c_in = [], 3
        for c_out in cfg.image_channels:
            layers += [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1), nn.Tanh()]
            c_in = c_out
        self.features = nn.Sequential(*layers)
        self.proj = nn.Linear(c_in * cfg.image_grid**2, EMBED_DIM, bias=False)
        gaussian_init_(self.features, gen, gain=cfg.image_gain)
        with torch.no_grad():  # small biases keep flat images off the origin
            for m in self.features:
                if isinstance(m, nn.Conv2d):
                    m.bias.copy_(torch.randn(m.bias.shape, generator=gen) * 0.1)
        gaussian_init_(self.proj, gen)
        freeze_(self)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """(H, W, 3) or (B, H, W, 3) in [0, 1] -> (512,) or (B, 512); differentiable."""
        single = image.dim() == 3
        x = image[None] if single else image
        if x.dim() != 4 or x.shape[-1] != 3:
            raise FormatError(f"expected an (H, W, 3) or (B, H, W, 3) image, got {tuple(image.shape)}")
        if x.shape[1] < 8 or x.shape[2] < 8:
            raise FormatError(f"image must be at least 8x8, got {tuple(x.shape[1:3])}")
        lo, hi = float(x.detach().min()), float(x.detach().max())
        if lo < -1e-6 or hi > 1 + 1e-6:
            raise ValueError(f"pixel values must lie in [0, 1], got range [{lo:.4g}, {hi:.4g}]")
        x = x.permute(0, 3, 1, 2)
        mean = x.mean(dim=(1, 2, 3), keepdim=True)
        std = (x - mean).square().mean(dim=(1, 2, 3), keepdim=True).add(1e-6).sqrt()
        x = (x - mean) / std
        k = self.cfg.image_smoothing
        if k > 1:
            x = F.avg_pool2d(F.pad(x, [k // 2, (k - 1) // 2] * 2, mode="replicate"), k, stride=1)
        h = self.features(x)
        h = F.adaptive_avg_pool2d(h, self.cfg.image_grid).flatten(1)
        out = l2_normalize(self.proj(h))
        return out[0] if single else out


def encode_tokens(ids, encoder: TextEncoder) -> torch.Tensor:
    return encoder(ids)


def encode_image(image, encoder: ImageEncoder) -> torch.Tensor:
    return encoder(image)


class EmbeddingSource:
    """Message -> text embedding, caching the rows of the current buffer.

    ``imported`` (bit string -> vector) takes precedence over live encoding,
    which lets externally computed embeddings stand in for the surrogate.
    """

    def __init__(self, encoder: TextEncoder | None, table: LookupTable, codec: CodecConfig,
                 imported: dict | None = None, batch_size: int = 512):
        self.encoder = encoder
        self.table = table
        self.codec = codec
        self.imported = imported or {}
        self.batch_size = batch_size
        self._cache: dict = {}

    def __call__(self, keys: list, bits: np.ndarray) -> torch.Tensor:
        missing = [i for i, k in enumerate(keys) if k not in self._cache]
        live = []
        for i in missing:
            vec = self.imported.get(bits_to_str(bits[i]))
            if vec is not None:
                self._cache[keys[i]] = vec
            else:
                live.append(i)
        if live:
            if self.encoder is None:
                raise KeyError(f"no embedding for message {bits_to_str(bits[live[0]])} and no live encoder")
            for start in range(0, len(live), self.batch_size):
                idx = live[start : start + self.batch_size]
                emb = self.encoder(torch.from_numpy(tokenize(bits[idx], self.table, self.codec)))
                for i, row in zip(idx, emb):
                    self._cache[keys[i]] = row
        out = torch.stack([self._cache[k] for k in keys])
        self._cache = {k: self._cache[k] for k in keys}
        return out


def export_embeddings(path, bits: np.ndarray, embeddings, encoder_cfg: EncoderConfig) -> None:
    emb = np.asarray(torch.as_tensor(embeddings).detach().cpu(), dtype=np.float32)
    if emb.ndim != 2 or emb.shape[1] != EMBED_DIM:
        raise FormatError(f"embeddings must be (N, {EMBED_DIM}), got {emb.shape}")
    meta = {
        "format": EMBED_FORMAT,
        "version": EMBED_VERSION,
        "dim": EMBED_DIM,
        "encoder_seed": encoder_cfg.seed,
        "pooling": encoder_cfg.pooling,
    }
    ids = np.array([bits_to_str(b) for b in np.atleast_2d(bits)])
    with open(path, "wb") as fh:
        np.savez(fh, ids=ids, embeddings=emb, meta=np.array(json.dumps(meta, sort_keys=True)))


def import_embeddings(path) -> dict:
    """Load an embedding container; rows off the unit sphere are renormalised."""
    try:
        with np.load(path, allow_pickle=False) as z:
            ids, emb, meta = z["ids"], z["embeddings"], json.loads(str(z["meta"]))
    except (KeyError, ValueError, OSError) as exc:
        raise FormatError(f"{path}: not an embedding container ({exc})") from exc
    if meta.get("format") != EMBED_FORMAT:
        raise FormatError(f"{path}: unexpected format {meta.get('format')!r}")
    if emb.ndim != 2 or emb.shape[1] != EMBED_DIM or meta.get("dim") != EMBED_DIM:
        raise FormatError(f"{path}: embedding dimension must be {EMBED_DIM}, got {emb.shape[1:]}")
    if len(ids) != len(emb):
        raise FormatError(f"{path}: {len(ids)} ids for {len(emb)} embeddings")
    t = torch.from_numpy(emb.astype(np.float32))
    norms = t.norm(dim=1, keepdim=True)
    off = (norms - 1).abs() > 1e-6
    t = torch.where(off, t / norms.clamp_min(1e-12), t)
    return {str(i): row for i, row in zip(ids, t)}


def encoder_hash(*modules: nn.Module) -> str:
    return "".join(parameter_hash(m) for m in modules)
