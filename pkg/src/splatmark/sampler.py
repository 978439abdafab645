"""Hard-message sampling: the accuracy memory and the epoch message buffer.

Messages are identified by their big-endian integer key (Python ints, so any
L works). Every epoch the buffer is rebuilt from the hardest remembered
messages plus never-seen ones, with the hard share growing linearly until the
freeze epoch; after that the buffer is the K worst-remembered messages.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .codec import bits_to_keys
from .errors import ConfigError


@dataclass(frozen=True)
class SamplerConfig:
    K: int = 4096
    sigma: float = 0.999
    tau0: float = 0.30
    alpha: float = 0.0045
    freeze_epoch: int = 100
    epochs: int = 150
    smoothing: float = 0.5
    mode: str = "hms"  # "hms" or "fixed" (ablation: one random buffer for the whole run)
    update_on_perfect: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"buffer capacity K must be >= 1, got {self.K}")
        if not 0 < self.sigma <= 1:
            raise ConfigError(f"hardness threshold sigma must lie in (0, 1], got {self.sigma}")
        if not 0 < self.tau0 <= 1:
            raise ConfigError(f"initial hard ratio tau0 must lie in (0, 1], got {self.tau0}")
        if self.alpha < 0:
            raise ConfigError(f"warm-up slope alpha must be >= 0, got {self.alpha}")
        if self.freeze_epoch > self.epochs:
            raise ConfigError(f"freeze epoch {self.freeze_epoch} exceeds total epochs {self.epochs}")
        if self.mode not in ("hms", "fixed"):
            raise ConfigError(f"sampler mode must be 'hms' or 'fixed', got {self.mode!r}")


class AccuracyMemory(dict):
    """message key -> smoothed bit accuracy in [0, 1]."""

    def snapshot(self):
        keys = sorted(self)
        return keys, np.array([self[k] for k in keys], dtype=np.float64)


@dataclass
class MessageBuffer:
    keys: list
    seen: set = field(default_factory=set)
    hard_count: int = 0

    def __len__(self):
        return len(self.keys)


def update_stats(memory: AccuracyMemory, bits: np.ndarray, pred: np.ndarray,
                 smoothing: float = 0.5, update_on_perfect: bool = False) -> AccuracyMemory:
    """Record per-message accuracy for every imperfectly decoded sample.

    ``pred`` are hard 0/1 decisions. Perfect decodes leave the memory alone
    unless ``update_on_perfect`` is set, in which case they only refresh keys
    that are already recorded.
    """
    bits, pred = np.atleast_2d(bits), np.atleast_2d(pred)
    if bits.shape != pred.shape:
        raise ValueError(f"batch shapes differ: {bits.shape} vs {pred.shape}")
    acc = (bits == pred).mean(axis=1)
    for key, a in zip(bits_to_keys(bits), acc.tolist()):
        if a < 1.0:
            old = memory.get(key)
            memory[key] = a if old is None else smoothing * old + (1 - smoothing) * a
        elif update_on_perfect and key in memory:
            memory[key] = smoothing * memory[key] + (1 - smoothing) * a
    return memory


def hard_ratio(epoch: int, tau0: float, alpha: float) -> float:
    return min(1.0, tau0 + alpha * epoch)


def hard_count(epoch: int, cfg: SamplerConfig, capacity: int) -> int:
    # The epsilon absorbs binary rounding of decimal tau0/alpha (0.3 + 0.0045*e).
    return math.floor(hard_ratio(epoch, cfg.tau0, cfg.alpha) * capacity + 1e-9)


def sample_hard(memory: AccuracyMemory, sigma: float, k: int) -> list:
    """Keys with accuracy < sigma, hardest first (ties by ascending key), at most k."""
    if k <= 0:
        return []
    qualifying = [(a, key) for key, a in memory.items() if a < sigma]
    qualifying.sort()
    return [key for _, key in qualifying[:k]]


def _random_keys(count: int, L: int, rng: np.random.Generator) -> list:
    if L <= 62:
        return rng.integers(0, 1 << L, size=count, dtype=np.int64).tolist()
    return bits_to_keys(rng.integers(0, 2, size=(count, L), dtype=np.uint8))


def sample_unseen(k: int, seen: set, L: int, rng: np.random.Generator, exclude=()) -> list:
    """Draw k distinct never-seen keys uniformly; adds them to ``seen``.

    If fewer than k unseen keys remain, all of them are returned and the
    shortfall is re-sampled without replacement from ``seen - exclude``.
    """
    if k <= 0:
        return []
    space = 1 << L
    remaining = space - len(seen)
    take = min(k, remaining)
    picked: list = []
    if take and L <= 22 and remaining * 8 < space:
        # nearly exhausted small space: enumerate the complement instead of rejecting
        pool = np.setdiff1d(np.arange(space, dtype=np.int64), np.fromiter(seen, np.int64, len(seen)))
        picked = rng.choice(pool, size=take, replace=False).tolist()
    elif take:
        chosen: set = set()
        while len(picked) < take:
            for key in _random_keys(2 * (take - len(picked)) + 8, L, rng):
                if key not in seen and key not in chosen:
                    chosen.add(key)
                    picked.append(key)
                    if len(picked) == take:
                        break
    seen.update(picked)
    if len(picked) < k:
        blocked = set(exclude) | set(picked)
        pool = sorted(key for key in seen if key not in blocked)
        extra = min(k - len(picked), len(pool))
        if extra:
            idx = rng.choice(len(pool), size=extra, replace=False)
            picked += [pool[i] for i in sorted(idx.tolist())]
    return picked


def initial_buffer(cfg: SamplerConfig, L: int, rng: np.random.Generator) -> MessageBuffer:
    seen: set = set()
    keys = sample_unseen(min(cfg.K, 1 << L), seen, L, rng)
    return MessageBuffer(keys=keys, seen=seen, hard_count=0)


def rebuild_buffer(epoch: int, memory: AccuracyMemory, buffer: MessageBuffer,
                   cfg: SamplerConfig, L: int, rng: np.random.Generator) -> MessageBuffer:
    """Epoch-boundary rebuild; returns a new buffer sharing the ``seen`` set."""
    capacity = min(cfg.K, 1 << L)
    if cfg.mode == "fixed":
        keys = list(buffer.keys)
        rng.shuffle(keys)
        return MessageBuffer(keys=keys, seen=buffer.seen, hard_count=0)
    if epoch < cfg.freeze_epoch:
        hard = sample_hard(memory, cfg.sigma, hard_count(epoch, cfg, capacity))
        novel = sample_unseen(capacity - len(hard), buffer.seen, L, rng, exclude=hard)
        keys = hard + novel
        n_hard = len(hard)
    else:
        ranked = sorted(memory.items(), key=lambda kv: (kv[1], kv[0]))
        keys = [key for key, _ in ranked[:capacity]]
        if len(keys) < capacity:
            chosen = set(keys)
            keys += [key for key in buffer.keys if key not in chosen][: capacity - len(keys)]
        n_hard = sum(1 for key in keys if key in memory)
    rng.shuffle(keys)
    return MessageBuffer(keys=keys, seen=buffer.seen, hard_count=n_hard)


def check_buffer(buffer: MessageBuffer, L: int, K: int, allowed: set | None = None) -> None:
    """Inline invariant check used at every epoch boundary of a real run."""
    capacity = min(K, 1 << L)
    if len(buffer.keys) != capacity:
        raise AssertionError(f"buffer holds {len(buffer.keys)} messages, expected {capacity}")
    if len(set(buffer.keys)) != len(buffer.keys):
        raise AssertionError("buffer contains duplicate messages")
    if allowed is not None and not set(buffer.keys) <= allowed:
        raise AssertionError("post-freeze buffer admitted a message outside memory and previous buffer")
