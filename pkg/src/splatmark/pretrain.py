"""Decoder pre-training on text embeddings with hard-message sampling.

Each epoch tokenizes and encodes the current buffer with the frozen text
encoder, makes one pass over it in mini-batches, feeds the per-message bit
accuracy of every batch into the accuracy memory, and rebuilds the buffer at
the epoch boundary. The result is bundled into a checkpoint that binds the
decoder weights to the lookup table and encoder seed it was trained against.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from . import __version__
from .codec import CodecConfig, LookupTable, bits_to_str, build_lookup_table, chunk_indices, keys_to_bits, as_bits, bits_to_key
from .decoder import DecoderConfig, DualBranchDecoder, bit_accuracy, decoder_loss, predict_bits
from .encoders import EmbeddingSource, EncoderConfig, ImageEncoder, TextEncoder, encoder_hash
from .errors import ConfigError, CorruptionError, DivergenceError, FormatError
from .layers import parameter_hash
from .sampler import AccuracyMemory, SamplerConfig, check_buffer, initial_buffer, rebuild_buffer, update_stats

CHECKPOINT_FORMAT = "splatmark-decoder-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PretrainConfig:
    codec: CodecConfig
    decoder: DecoderConfig
    sampler: SamplerConfig = SamplerConfig()
    encoder: EncoderConfig = EncoderConfig()
    lr: float = 5e-3
    weight_decay: float = 1e-6
    batch_size: int = 64
    w_chunk: float = 1.0
    w_proj: float = 0.25
    w_bit: float = 1.0
    seed: int = 0  # training seed: decoder init, buffer sampling

    def __post_init__(self):
        if (self.codec.L, self.codec.n) != (self.decoder.L, self.decoder.n):
            raise ConfigError(
                f"decoder (L={self.decoder.L}, n={self.decoder.n}) does not match "
                f"codec (L={self.codec.L}, n={self.codec.n})"
            )
        if self.codec.vocab_size != self.encoder.vocab_size:
            raise ConfigError(f"codec vocabulary {self.codec.vocab_size} != encoder vocabulary {self.encoder.vocab_size}")
        if min(self.w_chunk, self.w_proj, self.w_bit) < 0:
            raise ConfigError("decoder loss weights must be nonnegative")
        if not 1 <= self.batch_size <= self.sampler.K:
            raise ConfigError(f"batch size {self.batch_size} must lie in [1, K={self.sampler.K}]")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("learning rate must be positive and weight decay nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        enc = dict(d.pop("encoder"))
        enc["image_channels"] = tuple(enc["image_channels"])
        return cls(
            codec=CodecConfig(**d.pop("codec")),
            decoder=DecoderConfig(**d.pop("decoder")),
            sampler=SamplerConfig(**d.pop("sampler")),
            encoder=EncoderConfig(**enc),
            **d,
        )


@dataclass
class PretrainResult:
    cfg: PretrainConfig
    decoder: DualBranchDecoder
    table: LookupTable
    text_encoder: TextEncoder | None
    buffer_keys: list
    memory: AccuracyMemory
    log: list = field(default_factory=list)  # one dict per epoch
    loss_trace: list = field(default_factory=list)  # total loss of every step

    @property
    def L(self) -> int:
        return self.cfg.codec.L


def _new_decoder(cfg: PretrainConfig) -> DualBranchDecoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return DualBranchDecoder(cfg.decoder)


def pretrain(cfg: PretrainConfig, imported: dict | None = None, progress=None,
             text_encoder: TextEncoder | None = None) -> PretrainResult:
    """Run the full pre-training schedule and return the trained decoder.

    ``imported`` maps 0/1 message strings to precomputed embeddings that
    replace live encoding. ``progress`` is called with every epoch record.
    """
    L, scfg = cfg.codec.L, cfg.sampler
    table = build_lookup_table(cfg.codec)
    encoder = text_encoder if text_encoder is not None else TextEncoder(cfg.encoder)
    frozen_before = parameter_hash(encoder)
    source = EmbeddingSource(encoder, table, cfg.codec, imported)
    decoder = _new_decoder(cfg)
    opt = torch.optim.Adam(decoder.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    memory = AccuracyMemory()
    buffer = initial_buffer(scfg, L, rng)
    result = PretrainResult(cfg, decoder, table, encoder, list(buffer.keys), memory)
    allowed_pool = None

    for epoch in range(1, scfg.epochs + 1):
        keys = buffer.keys
        bits = keys_to_bits(keys, L)
        feats = source(keys, bits)
        targets = torch.from_numpy(bits.astype(np.float32))
        chunk_targets = torch.from_numpy(chunk_indices(bits, cfg.codec))
        sums = {"total": 0.0, "chunk": 0.0, "proj": 0.0, "bit": 0.0}
        correct, steps = 0, 0
        decoder.train()
        for step, start in enumerate(range(0, len(keys), cfg.batch_size)):
            sl = slice(start, start + cfg.batch_size)
            out = decoder(feats[sl])
            loss, terms = decoder_loss(out, targets[sl], chunk_targets[sl], cfg.w_chunk, cfg.w_proj, cfg.w_bit)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            pred = predict_bits(out.bit_logits)
            update_stats(memory, bits[sl], pred, scfg.smoothing, scfg.update_on_perfect)
            correct += int((pred == bits[sl]).sum())
            result.loss_trace.append(value)
            sums["total"] += value
            for k, v in terms.items():
                sums[k] += v.item()
            steps += 1
        record = {
            "epoch": epoch,
            "steps": steps,
            **{f"loss_{k}": v / steps for k, v in sums.items()},
            "in_bit_acc": correct / bits.size,
            "hard_fraction": buffer.hard_count / len(keys),
            "memory_size": len(memory),
            "seen": len(buffer.seen),
        }
        result.log.append(record)
        if progress is not None:
            progress(record)
        result.buffer_keys = list(keys)
        if epoch < scfg.epochs:
            previous = set(keys)
            buffer = rebuild_buffer(epoch, memory, buffer, scfg, L, rng)
            if scfg.mode == "hms" and epoch >= scfg.freeze_epoch:
                allowed_pool = set(memory) | previous
            check_buffer(buffer, L, scfg.K, allowed_pool)

    decoder.eval()
    if parameter_hash(encoder) != frozen_before:
        raise AssertionError("text encoder parameters changed during pre-training")
    return result


# -- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    cfg: PretrainConfig
    decoder: DualBranchDecoder
    table: LookupTable
    buffer_keys: list | None
    memory: AccuracyMemory
    meta: dict

    @property
    def L(self) -> int:
        return self.cfg.codec.L

    @property
    def decoder_hash(self) -> str:
        return self.meta["decoder_hash"]

    def image_encoder(self) -> ImageEncoder:
        return ImageEncoder(self.cfg.encoder)

    def text_encoder(self) -> TextEncoder:
        return TextEncoder(self.cfg.encoder)


def _bit_strings(keys, L) -> np.ndarray:
    return np.array([bits_to_str(b) for b in keys_to_bits(keys, L)]) if len(keys) else np.array([], dtype="<U1")


def checkpoint_meta(cfg: PretrainConfig, decoder, table, extra: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "package_version": __version__,
        "config": cfg.to_dict(),
        "seeds": {"codec": cfg.codec.seed, "encoder": cfg.encoder.seed, "training": cfg.seed},
        "table_hash": table.content_hash,
        "decoder_hash": parameter_hash(decoder),
        "encoder_hash": encoder_hash(TextEncoder(cfg.encoder), ImageEncoder(cfg.encoder)),
        **(extra or {}),
    }


def save_checkpoint(path, result, extra: dict | None = None) -> dict:
    """Write decoder weights, buffer snapshot, accuracy memory and metadata to an .npz."""
    cfg, L = result.cfg, result.cfg.codec.L
    meta = checkpoint_meta(cfg, result.decoder, result.table, extra)
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in result.decoder.state_dict().items()}
    mem_keys, mem_vals = result.memory.snapshot()
    if result.buffer_keys is not None:
        arrays["buffer"] = _bit_strings(result.buffer_keys, L)
    arrays["memory_ids"] = _bit_strings(mem_keys, L)
    arrays["memory_acc"] = mem_vals
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return meta


def load_checkpoint(path) -> Checkpoint:
    """Load and verify a checkpoint; hash mismatches raise CorruptionError."""
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            params = {k[len("param/"):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("param/")}
            buffer = [str(s) for s in z["buffer"]] if "buffer" in z.files else None
            mem_ids = [str(s) for s in z["memory_ids"]]
            mem_acc = z["memory_acc"].tolist()
    except (KeyError, ValueError, OSError) as exc:
        raise FormatError(f"{path}: not a decoder checkpoint ({exc})") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: unexpected format {meta.get('format')!r}")
    cfg = PretrainConfig.from_dict(meta["config"])
    table = build_lookup_table(cfg.codec)
    if table.content_hash != meta["table_hash"]:
        raise CorruptionError(
            f"{path}: lookup table hash {meta['table_hash'][:12]} does not match the table rebuilt "
            f"from codec seed {cfg.codec.seed} ({table.content_hash[:12]})"
        )
    decoder = DualBranchDecoder(cfg.decoder)
    try:
        decoder.load_state_dict(params)
    except RuntimeError as exc:
        raise CorruptionError(f"{path}: decoder weights do not fit the stored config ({exc})") from exc
    decoder.requires_grad_(False).eval()
    if parameter_hash(decoder) != meta["decoder_hash"]:
        raise CorruptionError(f"{path}: decoder weights do not match their recorded hash")
    L = cfg.codec.L
    keys = None if buffer is None else [bits_to_key(as_bits(s, L)) for s in buffer]
    memory = AccuracyMemory({bits_to_key(as_bits(s, L)): a for s, a in zip(mem_ids, mem_acc)})
    return Checkpoint(cfg, decoder, table, keys, memory, meta)


def evaluate_text(decoder: DualBranchDecoder, source, keys: list, L: int, batch_size: int = 512) -> float:
    """Bit accuracy of the bit branch on the text embeddings of ``keys``."""
    if not keys:
        return float("nan")
    bits = keys_to_bits(keys, L)
    preds = []
    with torch.no_grad():
        for start in range(0, len(keys), batch_size):
            sl = slice(start, start + batch_size)
            preds.append(predict_bits(decoder(source(keys[sl], bits[sl])).bit_logits))
    return bit_accuracy(np.concatenate(preds), bits)


def untrained_result(cfg: PretrainConfig) -> PretrainResult:
    """The zero-epoch outcome: initial decoder, empty log."""
    return pretrain(replace(cfg, sampler=replace(cfg.sampler, epochs=0, freeze_epoch=0)))
