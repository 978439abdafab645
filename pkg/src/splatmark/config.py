"""Run configuration: one tree for every stage, loadable from JSON.

Defaults depend on the payload length L (compression rate, group count,
schedule lengths). Three named seeds drive all randomness: ``codec`` (lookup
table), ``encoder`` (surrogate encoder weights) and ``train`` (decoder init,
buffer sampling, embedding, evaluation, scene generation).
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field

from .codec import CodecConfig
from .decoder import DecoderConfig
from .embed import EmbedConfig
from .encoders import EncoderConfig
from .errors import ConfigError
from .evaluate import EvalProtocol
from .pretrain import PretrainConfig
from .sampler import SamplerConfig

PROFILES = ("desk", "full")
# Reduced decoder width that keeps a 150-epoch run at L=16 within minutes on one core.
DESK_DECODER = {"d": 32, "phi_hidden": 256, "hidden": 256, "ff": 128}


def chunk_layout(L: int) -> tuple:
    """Default (compression rate n, group count G) for a payload length."""
    if L <= 16:
        return 1, 1
    n = 2 if L <= 96 else 4
    G = 4 if L % 4 == 0 else 1
    return n, G


def schedule(L: int) -> dict:
    if L <= 48:
        return {"epochs": 150, "freeze_epoch": 100, "tau0": 0.30, "alpha": 0.0045}
    return {"epochs": 300, "freeze_epoch": 200, "tau0": 0.25, "alpha": 0.0025}


def embed_epochs(L: int) -> int:
    return 150 if L <= 32 else 200 if L <= 64 else 300


def default_dict(L: int = 16, profile: str = "desk") -> dict:
    if profile not in PROFILES:
        raise ConfigError(f"profile must be one of {', '.join(PROFILES)}, got {profile!r}")
    n, G = chunk_layout(L)
    decoder = {"L": L, "n": n, "G": G, **(DESK_DECODER if profile == "desk" else {})}
    return {
        "profile": profile,
        "seeds": {"codec": 0, "encoder": 1234, "train": 0},
        "codec": {"L": L, "n": n},
        "encoder": {},
        "decoder": decoder,
        "sampler": {"K": 4096, **schedule(L)},
        "pretrain": {"lr": 5e-3, "weight_decay": 1e-6, "batch_size": 64, "w_chunk": 1.0, "w_proj": 0.25, "w_bit": 1.0},
        "embed": {"epochs": embed_epochs(L)},
        "protocol": {"mode": "Random", "sample_count": 16},
        "scene": {"count": 256, "height": 64, "width": 64},
    }


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class SceneSpec:
    count: int = 256
    height: int = 64
    width: int = 64


@dataclass(frozen=True)
class RunConfig:
    pretrain: PretrainConfig
    embed: EmbedConfig
    protocol: EvalProtocol
    scene: SceneSpec
    seeds: dict = field(default_factory=dict)
    profile: str = "desk"

    @property
    def L(self) -> int:
        return self.pretrain.codec.L

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Build and cross-validate; the top-level seeds override per-section seeds."""
        known = {"profile", "seeds", "codec", "encoder", "decoder", "sampler", "pretrain", "embed", "protocol", "scene"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        seeds = {"codec": 0, "encoder": 1234, "train": 0, **d.get("seeds", {})}
        try:
            codec = CodecConfig(**{**d["codec"], "seed": seeds["codec"]})
            enc = dict(d.get("encoder", {}))
            if "image_channels" in enc:
                enc["image_channels"] = tuple(enc["image_channels"])
            encoder = EncoderConfig(**{**enc, "seed": seeds["encoder"]})
            decoder = DecoderConfig(**d["decoder"])
            sampler = SamplerConfig(**d["sampler"])
            pretrain = PretrainConfig(codec=codec, decoder=decoder, sampler=sampler, encoder=encoder,
                                      **{**d.get("pretrain", {}), "seed": seeds["train"]})
            embed = EmbedConfig.from_dict({**d.get("embed", {}), "seed": seeds["train"]})
            protocol = EvalProtocol(**{**d.get("protocol", {}), "seed": seeds["train"]})
            scene = SceneSpec(**d.get("scene", {}))
        except TypeError as exc:  # unexpected or missing keys
            raise ConfigError(f"invalid configuration: {exc}") from exc
        return cls(pretrain, embed, protocol, scene, seeds, d.get("profile", "desk"))

    @classmethod
    def for_bits(cls, L: int = 16, profile: str = "desk", **overrides) -> "RunConfig":
        return cls.from_dict(_merge(default_dict(L, profile), overrides))

    def to_dict(self) -> dict:
        p = self.pretrain
        return {
            "profile": self.profile,
            "seeds": dict(self.seeds),
            "codec": asdict(p.codec),
            "encoder": asdict(p.encoder),
            "decoder": asdict(p.decoder),
            "sampler": asdict(p.sampler),
            "pretrain": {k: getattr(p, k) for k in ("lr", "weight_decay", "batch_size", "w_chunk", "w_proj", "w_bit")},
            "embed": self.embed.to_dict(),
            "protocol": self.protocol.to_dict(),
            "scene": asdict(self.scene),
        }


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """File (optional) merged over L-dependent defaults, then flag overrides.

    L and profile are resolved first (overrides > file > defaults) so the
    derived defaults match the final payload length.
    """
    file_dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                file_dict = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    overrides = overrides or {}
    merged = _merge(file_dict, overrides)
    L = merged.get("codec", {}).get("L", merged.get("decoder", {}).get("L", 16))
    profile = merged.get("profile", "desk")
    base = default_dict(L, profile)
    if "n" in merged.get("codec", {}) and "n" not in merged.get("decoder", {}):
        merged = _merge(merged, {"decoder": {"n": merged["codec"]["n"]}})
    merged = _merge(merged, {"codec": {"L": L}, "decoder": {"L": L}})
    return RunConfig.from_dict(_merge(base, merged))
