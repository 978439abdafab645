"""Writing a message into a splat scene's color offsets, and reading it back.

Only the per-primitive color offsets are optimized. Each step renders the
scene, makes a batch of undistorted and randomly distorted copies, and scores the frozen
decoder's bit branch on their image embeddings against the target message,
while image-fidelity and offset-size penalties keep the render close to the
unwatermarked one.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import __version__
from .codec import as_bits, bits_to_str
from .decoder import predict_bits
from .distortions import DistortionConfig, random_distortions
from .encoders import ImageEncoder
from .errors import ConfigError, CorruptionError, DivergenceError, FormatError
from .layers import bce_with_logits, parameter_hash
from .metrics import psnr, ssim
from .splat import SceneRenderer, SplatScene

ARTIFACT_FORMAT = "splatmark-embedding"
ARTIFACT_VERSION = 1


@dataclass(frozen=True)
class EmbedConfig:
    lambda_bit: float = 0.1
    lambda_image: float = 1.0
    lambda_ssim: float = 0.2
    lambda_off: float = 10.0
    lr: float = 5e-3
    weight_decay: float = 1e-6
    batch_size: int = 24
    clean_views: int = 4
    epochs: int = 150
    steps_per_epoch: int = 4
    seed: int = 0
    distortion: DistortionConfig = DistortionConfig()

    def __post_init__(self):
        if min(self.lambda_bit, self.lambda_image, self.lambda_off) < 0:
            raise ConfigError("embedding loss weights must be nonnegative")
        if not 0 <= self.lambda_ssim <= 1:
            raise ConfigError(f"lambda_ssim must lie in [0, 1], got {self.lambda_ssim}")
        if not 0 <= self.clean_views <= self.batch_size:
            raise ConfigError(f"clean_views must lie in [0, batch_size], got {self.clean_views}")
        if self.batch_size < 1 or self.epochs < 0 or self.steps_per_epoch < 1:
            raise ConfigError("batch size and steps per epoch must be positive, epochs nonnegative")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("learning rate must be positive and weight decay nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EmbedConfig":
        d = dict(d)
        dist = DistortionConfig(**d.pop("distortion", {}))
        return cls(distortion=dist, **d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def rgb_loss(watermarked: torch.Tensor, original: torch.Tensor, lambda_ssim: float = 0.2) -> torch.Tensor:
    """lambda_ssim * (1 - SSIM) + (1 - lambda_ssim) * L1."""
    l1 = (watermarked - original).abs().mean()
    if lambda_ssim == 0:
        return l1
    return lambda_ssim * (1 - ssim(watermarked, original)) + (1 - lambda_ssim) * l1


def off_loss(offsets: torch.Tensor) -> torch.Tensor:
    """Mean squared offset over all entries."""
    return offsets.square().mean()


def message_digest(bits) -> str:
    return hashlib.sha256(bits_to_str(bits).encode()).hexdigest()


@dataclass
class EmbedResult:
    offsets: np.ndarray  # (N, 3) float32
    message_digest: str
    log: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    @property
    def final(self) -> dict:
        return self.log[-1] if self.log else {}


def verify_checkpoint(ckpt) -> None:
    """Refuse a checkpoint whose decoder weights drifted from their recorded hash."""
    if parameter_hash(ckpt.decoder) != ckpt.decoder_hash:
        raise CorruptionError("decoder weights do not match the checkpoint's recorded hash")
    if ckpt.table.content_hash != ckpt.meta["table_hash"]:
        raise CorruptionError("lookup table does not match the checkpoint's recorded hash")


def _message_tensor(message, L: int) -> np.ndarray:
    bits = as_bits(message)
    if bits.shape != (L,):
        raise FormatError(f"message has {bits.size} bits but the decoder expects L={L}")
    return bits


def extract(image, ckpt, image_encoder: ImageEncoder | None = None) -> np.ndarray:
    """Hard bit decisions of the decoder's bit branch on the image embedding."""
    verify_checkpoint(ckpt)
    encoder = image_encoder if image_encoder is not None else ckpt.image_encoder()
    image = torch.as_tensor(image, dtype=torch.float32)
    with torch.no_grad():
        return predict_bits(ckpt.decoder.bit_branch(encoder(image)))


def embed(scene: SplatScene, message, ckpt, cfg: EmbedConfig = EmbedConfig(),
          image_encoder: ImageEncoder | None = None, perceptual=None, progress=None) -> EmbedResult:
    """Optimize color offsets so that renders of ``scene`` decode to ``message``.

    ``perceptual(watermarked, original) -> scalar`` is an optional extra
    image-fidelity term weighted by lambda_image. The decoder and encoder are
    never updated; their hashes are checked before and after.
    """
    verify_checkpoint(ckpt)
    bits = _message_tensor(message, ckpt.L)
    encoder = image_encoder if image_encoder is not None else ckpt.image_encoder()
    frozen = (parameter_hash(ckpt.decoder), parameter_hash(encoder))
    scene_digest = scene.digest()
    decoder = ckpt.decoder
    renderer = SceneRenderer(scene, dtype=torch.float32)
    base = renderer().detach()
    target = torch.from_numpy(bits.astype(np.float32)).expand(cfg.batch_size, -1)
    offsets = torch.zeros(len(scene), 3, requires_grad=True)
    opt = torch.optim.Adam([offsets], lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    log = []
    for epoch in range(1, cfg.epochs + 1):
        sums = {"total": 0.0, "bit": 0.0, "rgb": 0.0, "off": 0.0}
        for step in range(cfg.steps_per_epoch):
            image = renderer(offsets)
            views = random_distortions(image, cfg.batch_size - cfg.clean_views, cfg.distortion, gen)
            views = torch.cat([image[None].expand(cfg.clean_views, *image.shape), views])
            l_bit = bce_with_logits(decoder.bit_branch(encoder(views)), target)
            l_rgb = rgb_loss(image, base, cfg.lambda_ssim)
            l_img = l_rgb if perceptual is None else l_rgb + perceptual(image, base)
            l_off = off_loss(offsets)
            loss = cfg.lambda_bit * l_bit + cfg.lambda_image * l_img + cfg.lambda_off * l_off
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite embedding loss {value} at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            for k, v in (("total", value), ("bit", l_bit.item()), ("rgb", l_rgb.item()), ("off", l_off.item())):
                sums[k] += v / cfg.steps_per_epoch
        with torch.no_grad():
            clean = renderer(offsets)
            pred = predict_bits(decoder.bit_branch(encoder(clean)))
        log.append({
            "epoch": epoch,
            **{f"loss_{k}": v for k, v in sums.items()},
            "clean_bit_acc": float((pred == bits).mean()),
            "psnr": psnr(clean, base),
        })
        if progress is not None:
            progress(log[-1])
    if (parameter_hash(ckpt.decoder), parameter_hash(encoder)) != frozen:
        raise AssertionError("decoder or image encoder parameters changed during embedding")
    if scene.digest() != scene_digest:
        raise AssertionError("scene attributes changed during embedding")
    result = EmbedResult(offsets.detach().numpy().copy(), message_digest(bits), log)
    with torch.no_grad():
        final = renderer(offsets)
        result.manifest = {
            "format": ARTIFACT_FORMAT,
            "version": ARTIFACT_VERSION,
            "package_version": __version__,
            "message_digest": result.message_digest,
            "message_bits": int(bits.size),
            "decoder_hash": ckpt.decoder_hash,
            "table_hash": ckpt.meta["table_hash"],
            "scene_digest": scene_digest,
            "seeds": {**ckpt.meta["seeds"], "embed": cfg.seed},
            "config": cfg.to_dict(),
            "psnr": psnr(final, base),
            "ssim": float(ssim(final.double(), base.double())),
            "clean_bit_acc": log[-1]["clean_bit_acc"] if log else float((extract(final, ckpt, encoder) == bits).mean()),
        }
    return result


def save_embedding(path, result: EmbedResult) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, offsets=result.offsets, manifest=np.array(json.dumps(result.manifest, sort_keys=True)))


def load_embedding(path) -> EmbedResult:
    try:
        with np.load(path, allow_pickle=False) as z:
            offsets = z["offsets"].copy()
            manifest = json.loads(str(z["manifest"]))
    except (KeyError, ValueError, OSError) as exc:
        raise FormatError(f"{path}: not an embedding artifact ({exc})") from exc
    if manifest.get("format") != ARTIFACT_FORMAT:
        raise FormatError(f"{path}: unexpected format {manifest.get('format')!r}")
    if offsets.ndim != 2 or offsets.shape[1] != 3:
        raise FormatError(f"{path}: offsets must be (N, 3), got {offsets.shape}")
    return EmbedResult(offsets, manifest["message_digest"], [], manifest)
