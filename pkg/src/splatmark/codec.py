"""Bit-compressed tokenization.

An L-bit message is cut into C = ceil(L / n) chunks of n bits. Each chunk
value selects one token from its own row of a position-aware lookup table,
and the mapped tokens are framed by start/end ids and padded to the fixed
77-slot context of the text encoder.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityError, ConfigError, CorruptionError, FormatError

CONTEXT_LEN = 77
PAD_ID, START_ID, END_ID = 0, 1, 2
SHUFFLE_ALGORITHM = "fisher-yates-splitmix64/v1"
TABLE_FORMAT = "splatmark-lookup-table"
TABLE_VERSION = 1

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class CodecConfig:
    L: int
    n: int = 1
    vocab_size: int = 8192
    seed: int = 0
    context_len: int = CONTEXT_LEN
    pad_id: int = PAD_ID
    start_id: int = START_ID
    end_id: int = END_ID

    def __post_init__(self):
        if self.L < 1:
            raise ConfigError(f"message length must be positive, got L={self.L}")
        if self.n not in (1, 2, 4, 8):
            raise ConfigError(f"compression rate n must be one of 1, 2, 4, 8, got {self.n}")
        if len(set(self.reserved_ids)) != 3:
            raise ConfigError(f"reserved ids must be distinct, got {self.reserved_ids}")
        if self.C + 2 > self.context_len:
            raise CapacityError(
                f"{self.C} chunks plus start/end tokens exceed the "
                f"{self.context_len}-token budget (L={self.L}, n={self.n})"
            )
        required = self.C * self.num_states
        available = self.vocab_size - len(self.reserved_ids)
        if required > available:
            raise CapacityError(
                f"lookup table needs {required} distinct tokens "
                f"(C={self.C} x 2^{self.n}) but only {available} valid ids exist"
            )

    @property
    def C(self) -> int:
        return math.ceil(self.L / self.n)

    @property
    def num_states(self) -> int:
        return 1 << self.n

    @property
    def pad_bits(self) -> int:
        return self.C * self.n - self.L

    @property
    def reserved_ids(self) -> tuple[int, int, int]:
        return (self.pad_id, self.start_id, self.end_id)


def _splitmix64(state: int):
    while True:
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        yield z ^ (z >> 31)


def seeded_permutation(values, seed: int) -> list[int]:
    """Fisher-Yates shuffle driven by SplitMix64 with rejection sampling.

    Implemented here rather than borrowed from numpy so the permutation is
    pinned by ``SHUFFLE_ALGORITHM`` and never drifts with library versions.
    """
    out = list(values)
    stream = _splitmix64(seed & _MASK64)
    for i in range(len(out) - 1, 0, -1):
        bound = i + 1
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            r = next(stream)
            if r < limit:
                break
        j = r % bound
        out[i], out[j] = out[j], out[i]
    return out


@dataclass(frozen=True, eq=False)
class LookupTable:
    table: np.ndarray
    seed: int
    algorithm: str = SHUFFLE_ALGORITHM
    vocab_size: int = 0
    _inverse: tuple = field(default=None, repr=False)

    def __post_init__(self):
        table = np.ascontiguousarray(self.table, dtype=np.int64)
        table.setflags(write=False)
        object.__setattr__(self, "table", table)
        size = max(self.vocab_size, int(table.max()) + 1)
        pos = np.full(size, -1, dtype=np.int64)
        val = np.full(size, -1, dtype=np.int64)
        rows, cols = np.indices(table.shape)
        pos[table.ravel()] = rows.ravel()
        val[table.ravel()] = cols.ravel()
        object.__setattr__(self, "_inverse", (pos, val))

    @property
    def content_hash(self) -> str:
        return table_digest(self.table)

    def __eq__(self, other):
        return isinstance(other, LookupTable) and np.array_equal(self.table, other.table)

    __hash__ = None


def table_digest(table: np.ndarray) -> str:
    table = np.ascontiguousarray(table, dtype="<i8")
    h = hashlib.sha256(f"{table.shape[0]}x{table.shape[1]}:".encode())
    h.update(table.tobytes())
    return h.hexdigest()


def build_lookup_table(cfg: CodecConfig, permute: bool = True) -> LookupTable:
    """Row i holds the tokens for chunk position i; column j for chunk value j.

    ``permute=False`` keeps the valid vocabulary in id order (test hook).
    """
    reserved = set(cfg.reserved_ids)
    valid = [t for t in range(cfg.vocab_size) if t not in reserved]
    required = cfg.C * cfg.num_states
    if required > len(valid):
        raise CapacityError(f"lookup table needs {required} tokens, vocabulary has {len(valid)}")
    order = seeded_permutation(valid, cfg.seed) if permute else valid
    table = np.asarray(order[:required], dtype=np.int64).reshape(cfg.C, cfg.num_states)
    return LookupTable(table, seed=cfg.seed, vocab_size=cfg.vocab_size)


def make_codebook(n: int) -> np.ndarray:
    """(2^n, n) matrix; row j is the big-endian binary expansion of j."""
    if n not in (1, 2, 4, 8):
        raise ConfigError(f"codebook width must be one of 1, 2, 4, 8, got {n}")
    j = np.arange(1 << n)[:, None]
    shifts = np.arange(n - 1, -1, -1)[None, :]
    return ((j >> shifts) & 1).astype(np.uint8)


def as_bits(message, L: int | None = None) -> np.ndarray:
    """Accept a 0/1 string, sequence or array; return a uint8 array."""
    if isinstance(message, str):
        message = message.strip()
        if message and set(message) - {"0", "1"}:
            raise FormatError(f"message string must contain only 0/1, got {message!r}")
        bits = np.frombuffer(message.encode(), dtype=np.uint8) - ord("0")
    else:
        bits = np.asarray(message)
        if bits.size and not np.isin(bits, (0, 1)).all():
            raise FormatError("message entries must be 0 or 1")
        bits = bits.astype(np.uint8)
    if L is not None and bits.shape[-1] != L:
        raise FormatError(f"expected a {L}-bit message, got {bits.shape[-1]} bits")
    return bits


def bits_to_str(bits) -> str:
    return "".join("1" if b else "0" for b in np.asarray(bits).ravel())


def bits_to_key(bits) -> int:
    """Big-endian integer key of one message (arbitrary precision)."""
    return int(bits_to_str(bits), 2) if len(bits) else 0


def key_to_bits(key: int, L: int) -> np.ndarray:
    return as_bits(format(key, f"0{L}b"), L)


def keys_to_bits(keys, L: int) -> np.ndarray:
    if not len(keys):
        return np.zeros((0, L), dtype=np.uint8)
    if L <= 62:
        k = np.asarray(keys, dtype=np.int64)[:, None]
        return ((k >> np.arange(L - 1, -1, -1)) & 1).astype(np.uint8)
    return np.stack([key_to_bits(k, L) for k in keys])


def bits_to_keys(bits: np.ndarray) -> list[int]:
    bits = np.asarray(bits, dtype=np.int64)
    L = bits.shape[-1]
    if L <= 62:
        return (bits @ (1 << np.arange(L - 1, -1, -1, dtype=np.int64))).tolist()
    return [bits_to_key(row) for row in bits]


def _padded_chunks(bits: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    if bits.shape[-1] != cfg.L:
        raise FormatError(f"expected {cfg.L}-bit messages, got {bits.shape[-1]} bits")
    if cfg.pad_bits:
        pad = np.zeros(bits.shape[:-1] + (cfg.pad_bits,), dtype=bits.dtype)
        bits = np.concatenate([bits, pad], axis=-1)
    return bits.reshape(bits.shape[:-1] + (cfg.C, cfg.n)).astype(np.int64)


def chunk_indices(bits, cfg: CodecConfig) -> np.ndarray:
    """Chunk values t_i = sum_j b_ij 2^(n-j); works on (L,) or (B, L)."""
    chunks = _padded_chunks(as_bits(bits), cfg)
    weights = 1 << np.arange(cfg.n - 1, -1, -1, dtype=np.int64)
    return chunks @ weights


def tokenize(bits, table: LookupTable, cfg: CodecConfig) -> np.ndarray:
    """Map (L,) or (B, L) messages to (77,) or (B, 77) token ids."""
    if table.table.shape != (cfg.C, cfg.num_states):
        raise ConfigError(
            f"lookup table shape {table.table.shape} does not match (C, 2^n) = {(cfg.C, cfg.num_states)}"
        )
    idx = chunk_indices(bits, cfg)
    single = idx.ndim == 1
    idx = np.atleast_2d(idx)
    ids = np.full((idx.shape[0], cfg.context_len), cfg.pad_id, dtype=np.int64)
    ids[:, 0] = cfg.start_id
    ids[:, 1 : cfg.C + 1] = table.table[np.arange(cfg.C), idx]
    ids[:, cfg.C + 1] = cfg.end_id
    return ids[0] if single else ids


def detokenize(ids, table: LookupTable, cfg: CodecConfig) -> np.ndarray:
    """Inverse of :func:`tokenize`; trailing pad bits are dropped."""
    ids = np.asarray(ids, dtype=np.int64)
    single = ids.ndim == 1
    ids = np.atleast_2d(ids)
    if ids.shape[1] != cfg.context_len:
        raise CorruptionError(f"token sequence must have {cfg.context_len} ids, got {ids.shape[1]}")
    frame_ok = (ids[:, 0] == cfg.start_id) & (ids[:, cfg.C + 1] == cfg.end_id)
    frame_ok &= (ids[:, cfg.C + 2 :] == cfg.pad_id).all(axis=1)
    if not frame_ok.all():
        bad = int(np.flatnonzero(~frame_ok)[0])
        raise CorruptionError(f"sequence {bad}: start/end/pad framing is broken")
    mapped = ids[:, 1 : cfg.C + 1]
    pos, val = table._inverse
    in_range = (mapped >= 0) & (mapped < len(pos))
    safe = np.where(in_range, mapped, 0)
    expected = np.arange(cfg.C)[None, :]
    ok = in_range & (pos[safe] == expected)
    if not ok.all():
        seq, chunk = (int(v) for v in np.argwhere(~ok)[0])
        raise CorruptionError(
            f"sequence {seq}: token {int(mapped[seq, chunk])} at position {chunk + 1} "
            f"is not in lookup-table row {chunk}"
        )
    values = val[mapped]
    codebook = make_codebook(cfg.n)
    bits = codebook[values].reshape(ids.shape[0], cfg.C * cfg.n)[:, : cfg.L]
    return bits[0] if single else bits


def save_table(path, table: LookupTable, cfg: CodecConfig) -> None:
    doc = {
        "format": TABLE_FORMAT,
        "version": TABLE_VERSION,
        "algorithm": table.algorithm,
        "seed": table.seed,
        "n": cfg.n,
        "C": cfg.C,
        "vocab_size": cfg.vocab_size,
        "reserved_ids": {"pad": cfg.pad_id, "start": cfg.start_id, "end": cfg.end_id},
        "table": table.table.ravel().tolist(),
        "content_hash": table.content_hash,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_table(path) -> LookupTable:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != TABLE_FORMAT or doc.get("version") != TABLE_VERSION:
        raise FormatError(f"{path}: not a version-{TABLE_VERSION} lookup table file")
    table = np.asarray(doc["table"], dtype=np.int64).reshape(doc["C"], 1 << doc["n"])
    if table_digest(table) != doc["content_hash"]:
        raise CorruptionError(f"{path}: lookup table content does not match its hash")
    return LookupTable(table, seed=doc["seed"], algorithm=doc["algorithm"], vocab_size=doc["vocab_size"])


def read_messages(path, L: int) -> np.ndarray:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    return np.stack([as_bits(ln, L) for ln in lines]) if lines else np.zeros((0, L), np.uint8)


def write_messages(path, bits: np.ndarray) -> None:
    Path(path).write_text("".join(bits_to_str(row) + "\n" for row in np.atleast_2d(bits)))
