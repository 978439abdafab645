"""Measurement protocols: message sampling, robustness matrix, reports.

Messages come from the final training buffer ("In"), from its complement
("Out"), or half from each ("Random"). Every per-message random draw is
seeded from the protocol seed and the message itself, so results do not
depend on iteration order; sums use ``math.fsum`` for the same reason.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch

from .codec import bits_to_str, key_to_bits
from .distortions import KINDS, apply
from .embed import EmbedConfig, EmbedResult, embed, extract, message_digest
from .encoders import EmbeddingSource
from .errors import ConfigError, FormatError
from .metrics import psnr, ssim
from .pretrain import evaluate_text
from .sampler import sample_unseen
from .splat import SCENE_ATTACKS, SceneRenderer, SplatScene

MODES = ("In", "Out", "Random")
REPORT_FORMAT = "splatmark-report"


@dataclass(frozen=True)
class EvalProtocol:
    mode: str = "Random"
    sample_count: int = 16
    seed: int = 0
    distortions: tuple = KINDS
    scene_attacks: tuple = ("prune", "clone", "noise3d")
    prune_ratio: float = 0.2
    clone_ratio: float = 0.2
    noise_sigma: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "distortions", tuple(self.distortions))
        object.__setattr__(self, "scene_attacks", tuple(self.scene_attacks))
        if self.mode not in MODES:
            raise ConfigError(f"protocol mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.sample_count < 1:
            raise ConfigError(f"sample count must be positive, got {self.sample_count}")
        unknown = set(self.distortions) - set(KINDS)
        if unknown:
            raise ConfigError(f"unknown distortion columns {sorted(unknown)}")
        unknown = set(self.scene_attacks) - set(SCENE_ATTACKS)
        if unknown:
            raise ConfigError(f"unknown scene attacks {sorted(unknown)}; choose from {', '.join(SCENE_ATTACKS)}")

    def to_dict(self) -> dict:
        return asdict(self)


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values) if values else float("nan")


def _message_seed(seed: int, key: int, salt: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, salt, key & 0xFFFFFFFFFFFFFFFF, key >> 64])


def sample_messages(buffer_keys, L: int, mode: str, count: int, seed: int) -> dict:
    """Pick message keys per half: {"In": [...], "Out": [...]} (Random fills both)."""
    if buffer_keys is None:
        raise FormatError("checkpoint has no buffer snapshot; In/Out/Random protocols need it")
    rng = np.random.default_rng([seed, 0xE7A1])
    n_in = {"In": count, "Out": 0, "Random": count - count // 2}[mode]
    n_out = count - n_in
    buffer_keys = sorted(buffer_keys)
    if n_in > len(buffer_keys):
        raise ConfigError(f"cannot draw {n_in} In messages from a buffer of {len(buffer_keys)}")
    chosen_in = [buffer_keys[i] for i in sorted(rng.choice(len(buffer_keys), size=n_in, replace=False).tolist())]
    seen = set(buffer_keys)
    if n_out > (1 << L) - len(seen):
        raise ConfigError(f"only {(1 << L) - len(seen)} messages lie outside the buffer, {n_out} requested")
    chosen_out = sorted(sample_unseen(n_out, seen, L, rng))
    if set(chosen_out) & set(buffer_keys):
        raise AssertionError("Out messages intersect the training buffer")
    return {"In": chosen_in, "Out": chosen_out}


def evaluate_decoder(ckpt, mode: str = "Random", count: int = 512, seed: int = 0, text_encoder=None) -> dict:
    """Decoder-level accuracy on text embeddings of In/Out/Random messages."""
    halves = sample_messages(ckpt.buffer_keys, ckpt.L, mode, count, seed)
    encoder = text_encoder if text_encoder is not None else ckpt.text_encoder()
    source = EmbeddingSource(encoder, ckpt.table, ckpt.cfg.codec)
    out = {}
    for half, keys in halves.items():
        if keys:
            out[half] = evaluate_text(ckpt.decoder, source, keys, ckpt.L)
    out["accuracy"] = _mean(out.values()) if mode == "Random" else out[mode]
    return out


class EmbedCache:
    """Embeds keyed by (message, scene, embed config, decoder) digests."""

    def __init__(self):
        self._store: dict = {}

    @staticmethod
    def key(bits, scene: SplatScene, cfg: EmbedConfig, ckpt) -> str:
        parts = (message_digest(bits), scene.digest(), cfg.digest(), ckpt.decoder_hash)
        return hashlib.sha256("|".join(parts).encode()).hexdigest()

    def get_or_embed(self, scene, bits, ckpt, cfg, encoder) -> EmbedResult:
        k = self.key(bits, scene, cfg, ckpt)
        if k not in self._store:
            self._store[k] = embed(scene, bits, ckpt, cfg, encoder)
        return self._store[k]

    def __len__(self):
        return len(self._store)


def score_message(scene: SplatScene, bits, ckpt, cfg: EmbedConfig, protocol: EvalProtocol, encoder,
                  cache: EmbedCache | None = None) -> dict:
    """Embed one message and extract it under every attack column."""
    key = int(bits_to_str(bits), 2)
    msg_cfg = replace(cfg, seed=int(_message_seed(cfg.seed, key, 1).generate_state(1)[0]))
    cache = cache if cache is not None else EmbedCache()
    result = cache.get_or_embed(scene, bits, ckpt, msg_cfg, encoder)
    base = SceneRenderer(scene, dtype=torch.float32)
    original = base()
    with torch.no_grad():
        watermarked = base(torch.from_numpy(result.offsets))
    row = {"psnr": psnr(watermarked, original), "ssim": float(ssim(watermarked.double(), original.double()))}
    for i, kind in enumerate(protocol.distortions):
        gen = torch.Generator().manual_seed(int(_message_seed(protocol.seed, key, 100 + i).generate_state(1)[0]))
        attacked = apply(watermarked, kind, cfg.distortion, gen)
        row[kind] = float((extract(attacked, ckpt, encoder) == bits).mean())
    baked = scene.with_offsets(result.offsets)
    params = {"prune": protocol.prune_ratio, "clone": protocol.clone_ratio, "noise3d": protocol.noise_sigma}
    for i, name in enumerate(protocol.scene_attacks):
        rng = np.random.default_rng(_message_seed(protocol.seed, key, 200 + i))
        attacked_scene = SCENE_ATTACKS[name](baked, params[name], rng)
        image = SceneRenderer(attacked_scene, dtype=torch.float32)()
        row[name] = float((extract(image, ckpt, encoder) == bits).mean())
    return row


def run_protocol(ckpt, scene: SplatScene, protocol: EvalProtocol, embed_cfg: EmbedConfig,
                 cache: EmbedCache | None = None, progress=None) -> dict:
    """Embed every sampled message, attack, extract, and aggregate into a report."""
    halves = sample_messages(ckpt.buffer_keys, ckpt.L, protocol.mode, protocol.sample_count, protocol.seed)
    encoder = ckpt.image_encoder()
    columns = list(protocol.distortions) + list(protocol.scene_attacks)
    rows = {}
    for half, keys in halves.items():
        for key in keys:
            bits = key_to_bits(key, ckpt.L)
            rows[(half, key)] = score_message(scene, bits, ckpt, embed_cfg, protocol, encoder, cache)
            if progress is not None:
                progress(half, bits_to_str(bits), rows[(half, key)])

    def aggregate(items):
        return {c: _mean(r[c] for r in items) for c in columns + ["psnr", "ssim"]}

    per_half = {half: aggregate([rows[(half, k)] for k in keys]) for half, keys in halves.items() if keys}
    if protocol.mode == "Random":
        cells = {c: _mean(per_half[h][c] for h in ("In", "Out")) for c in columns + ["psnr", "ssim"]}
    else:
        cells = per_half[protocol.mode]
    return {
        "format": REPORT_FORMAT,
        "protocol": protocol.to_dict(),
        "embed_config": embed_cfg.to_dict(),
        "seeds": ckpt.meta["seeds"],
        "decoder_hash": ckpt.decoder_hash,
        "table_hash": ckpt.meta["table_hash"],
        "scene_digest": scene.digest(),
        "message_bits": ckpt.L,
        "messages": {h: [message_digest(key_to_bits(k, ckpt.L)) for k in keys] for h, keys in halves.items()},
        "columns": columns,
        "cells": cells,
        "halves": per_half,
    }


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1) + "\n"


def format_report(report: dict) -> str:
    """Plain-text table: one row per half (plus the aggregate), one column per attack."""
    cols = report["columns"] + ["psnr", "ssim"]
    width = max(8, *(len(c) for c in cols))
    lines = [f"{report['protocol']['mode']} protocol, L={report['message_bits']}, "
             f"{report['protocol']['sample_count']} messages"]
    lines.append("".ljust(10) + "".join(c.rjust(width + 1) for c in cols))

    def fmt(c, v):
        return f"{v:.2f}" if c in ("psnr",) else f"{100 * v:.2f}" if c != "ssim" else f"{v:.4f}"

    for name, cells in list(report["halves"].items()) + [("all", report["cells"])]:
        lines.append(name.ljust(10) + "".join(fmt(c, cells[c]).rjust(width + 1) for c in cols))
    return "\n".join(lines) + "\n"


def plot_capacity_curve(points, path) -> None:
    """Bit accuracy against payload length; ``points`` are (L, accuracy) pairs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    points = sorted(points)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot([p[0] for p in points], [100 * p[1] for p in points], marker="o")
    ax.set_xlabel("message bits")
    ax.set_ylabel("bit accuracy (%)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
