"""Binary messages, marker dictionaries and threshold identification."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

DEFAULT_N_BITS = 36
DEFAULT_THRESHOLD = 0.8


class CapacityError(ValueError):
    """Raised when more unique messages are requested than the code space holds."""


class ConfigurationError(ValueError):
    pass


def _as_bits(bits) -> np.ndarray:
    arr = np.asarray(bits)
    if arr.ndim != 1:
        raise ValueError(f"message must be 1-D, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("message bits must be 0 or 1")
    return arr.astype(np.uint8)


@dataclass(frozen=True)
class Message:
    bits: tuple

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(b) for b in _as_bits(self.bits)))

    @property
    def n_bits(self) -> int:
        return len(self.bits)

    def to_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.uint8)

    def to_string(self) -> str:
        return "".join(str(b) for b in self.bits)

    @classmethod
    def from_string(cls, s: str) -> "Message":
        s = s.strip()
        if not s or set(s) - {"0", "1"}:
            raise ValueError(f"not a bit string: {s!r}")
        return cls(tuple(int(c) for c in s))

    @classmethod
    def from_int(cls, value: int, n_bits: int) -> "Message":
        # most significant bit first
        return cls(tuple((value >> (n_bits - 1 - i)) & 1 for i in range(n_bits)))

    def to_int(self) -> int:
        out = 0
        for b in self.bits:
            out = (out << 1) | b
        return out


def sample_messages(count: int, rng_seed: int, n_bits: int = DEFAULT_N_BITS) -> list[Message]:
    """Draw `count` distinct messages uniformly without replacement.

    Works for any ``n_bits`` without materialising the code space.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    capacity = 2 ** n_bits
    if count > capacity:
        raise CapacityError(f"{count} messages requested but {n_bits} bits hold only {capacity}")
    rng = np.random.default_rng(rng_seed)
    if n_bits <= 20:
        values = rng.choice(capacity, size=count, replace=False)
        return [Message.from_int(int(v), n_bits) for v in values]
    seen = set()
    out = []
    while len(out) < count:
        bits = rng.integers(0, 2, size=n_bits, dtype=np.uint8)
        key = bits.tobytes()
        if key in seen:
            continue
        seen.add(key)
        out.append(Message(tuple(bits)))
    return out


def enumerate_messages(n_bits: int) -> list[Message]:
    if n_bits > 20:
        raise CapacityError(f"refusing to enumerate 2^{n_bits} messages")
    return [Message(bits) for bits in itertools.product((0, 1), repeat=n_bits)]


def hamming_confidence(a, b) -> float:
    """1 - Hamming distance / n_bits between two bit patterns."""
    a = a.to_array() if isinstance(a, Message) else _as_bits(a)
    b = b.to_array() if isinstance(b, Message) else _as_bits(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return 1.0 - np.count_nonzero(a != b) / a.shape[0]


@dataclass
class Dictionary:
    entries: list[Message]
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.entries = list(self.entries)
        self.index = {}
        for i, m in enumerate(self.entries):
            if m.bits in self.index:
                raise ConfigurationError(f"duplicate dictionary entry {m.to_string()}")
            self.index[m.bits] = i
        lengths = {m.n_bits for m in self.entries}
        if len(lengths) > 1:
            raise ConfigurationError(f"mixed message lengths {sorted(lengths)}")
        self._matrix = np.array([m.bits for m in self.entries], dtype=np.uint8).reshape(len(self.entries), -1 if self.entries else 0)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> Message:
        return self.entries[i]

    @property
    def n_bits(self) -> int:
        if not self.entries:
            raise ConfigurationError("empty dictionary")
        return self.entries[0].n_bits

    def lookup(self, message: Message) -> int:
        return self.index[message.bits]

    def as_array(self) -> np.ndarray:
        """Entries as a (len, n_bits) uint8 matrix."""
        return self._matrix

    @classmethod
    def sampled(cls, n_bits: int, count: int, seed: int, min_distance: int = 0,
                max_restarts: int = 200) -> "Dictionary":
        """Random dictionary; with ``min_distance`` > 1 entries are drawn greedily in
        random order so every pair differs in at least that many bits."""
        if min_distance <= 1:
            return cls(sample_messages(count, seed, n_bits))
        if n_bits > 20:
            raise CapacityError("min_distance selection needs n_bits <= 20")
        rng = np.random.default_rng(seed)
        codes = np.array(list(itertools.product((0, 1), repeat=n_bits)), dtype=np.uint8)
        for _ in range(max_restarts):
            order = rng.permutation(len(codes))
            chosen = []
            for idx in order:
                c = codes[idx]
                if all(np.count_nonzero(c != codes[j]) >= min_distance for j in chosen):
                    chosen.append(idx)
                    if len(chosen) == count:
                        return cls([Message(tuple(codes[j])) for j in chosen])
        raise CapacityError(f"could not find {count} codes of {n_bits} bits at distance {min_distance}")

    @classmethod
    def exhaustive(cls, n_bits: int) -> "Dictionary":
        return cls(enumerate_messages(n_bits))

    def save(self, path) -> None:
        Path(path).write_text("".join(m.to_string() + "\n" for m in self.entries), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Dictionary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([Message.from_string(l) for l in lines if l.strip()])


@dataclass
class IdentificationResult:
    matched_id: Optional[int]
    confidence: float
    soft_bits: tuple

    @property
    def accepted(self) -> bool:
        return self.matched_id is not None


def best_matches(soft_bits: np.ndarray, dictionary: Dictionary) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised best entry per row of an (N, n_bits) soft-bit array.

    Returns (best ids, matching fractions). Ties go to the lowest id since
    argmax returns the first maximum.
    """
    if len(dictionary) == 0:
        raise ConfigurationError("empty dictionary")
    soft_bits = np.asarray(soft_bits, dtype=np.float64)
    if soft_bits.ndim == 1:
        soft_bits = soft_bits[None]
    if soft_bits.shape[1] != dictionary.n_bits:
        raise ValueError(f"expected {dictionary.n_bits} bits, got {soft_bits.shape[1]}")
    hard = (soft_bits >= 0.5).astype(np.int32)
    table = dictionary.as_array().astype(np.int32)
    matches = (hard[:, None, :] == table[None, :, :]).sum(-1)
    best = matches.argmax(1)
    conf = matches[np.arange(len(best)), best] / dictionary.n_bits
    return best, conf


def identify(soft_bits: Sequence[float], dictionary: Dictionary,
             threshold: float = DEFAULT_THRESHOLD) -> IdentificationResult:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    soft = np.asarray(soft_bits, dtype=np.float64).reshape(-1)
    best, conf = best_matches(soft, dictionary)
    confidence = float(conf[0])
    matched = int(best[0]) if confidence >= threshold else None
    return IdentificationResult(matched, confidence, tuple(soft.tolist()))


def identify_many(soft_bits: np.ndarray, dictionary: Dictionary,
                  threshold: float = DEFAULT_THRESHOLD) -> list[IdentificationResult]:
    soft = np.asarray(soft_bits, dtype=np.float64)
    if soft.size == 0:
        return []
    best, conf = best_matches(soft, dictionary)
    return [IdentificationResult(int(b) if c >= threshold else None, float(c), tuple(s.tolist()))
            for b, c, s in zip(best, conf, soft)]


def messages_to_array(messages: Iterable[Message]) -> np.ndarray:
    return np.array([m.bits for m in messages], dtype=np.float32)
