"""Finite universe of fixed-length token sequences and its canonical enumeration."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np

# Enumeration cap for exact (oracle) computations.
MAX_ENUMERABLE = 2**22


class EnumerationError(ValueError):
    """Raised when an exact operation is requested on a space that is too large."""


@dataclass(frozen=True)
class VocabSpec:
    vocab_size: int
    seq_len: int

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.seq_len < 1:
            raise ValueError(f"seq_len must be >= 1, got {self.seq_len}")

    @property
    def size(self) -> int:
        """Number of sequences, V**L."""
        return self.vocab_size**self.seq_len

    @property
    def n_rows(self) -> int:
        """Number of prefixes of length 0..L-1, i.e. (V**L - 1) / (V - 1)."""
        return (self.size - 1) // (self.vocab_size - 1)

    @property
    def enumerable(self) -> bool:
        return self.size <= MAX_ENUMERABLE

    def check_enumerable(self) -> None:
        if not self.enumerable:
            raise EnumerationError(
                f"V={self.vocab_size}, L={self.seq_len}: V**L={self.size} exceeds "
                f"the enumeration bound {MAX_ENUMERABLE}"
            )

    def row_offsets(self) -> np.ndarray:
        """First row index of each prefix length t = 0..L-1."""
        V = self.vocab_size
        return np.array([(V**t - 1) // (V - 1) for t in range(self.seq_len)], dtype=np.int64)

    def validate(self, tokens) -> np.ndarray:
        x = np.asarray(tokens, dtype=np.int64)
        if x.shape[-1:] != (self.seq_len,):
            raise ValueError(f"sequence length {x.shape[-1:]} != L={self.seq_len}")
        if x.size and (x.min() < 0 or x.max() >= self.vocab_size):
            raise ValueError(f"token out of range [0, {self.vocab_size})")
        return x


@dataclass(frozen=True)
class ExactDistribution:
    """A probability table over the whole space, in canonical rank order."""

    space: VocabSpec
    probs: np.ndarray

    def __post_init__(self):
        if self.probs.shape != (self.space.size,):
            raise ValueError(f"expected {self.space.size} probabilities, got {self.probs.shape}")
        if np.any(self.probs < 0):
            raise ValueError("negative probability")

    def __len__(self):
        return self.space.size

    def expectation(self, values) -> float:
        return float(np.dot(self.probs, np.asarray(values, dtype=np.float64)))


@lru_cache(maxsize=16)
def all_sequences(space: VocabSpec) -> np.ndarray:
    """All V**L sequences as an (N, L) int array in lexicographic order (read-only, cached)."""
    space.check_enumerable()
    xs = sequences_at(np.arange(space.size, dtype=np.int64), space)
    xs.flags.writeable = False
    return xs


def enumerate_sequences(space: VocabSpec) -> Iterator[list[int]]:
    for row in all_sequences(space):
        yield row.tolist()


def sequences_at(ranks, space: VocabSpec) -> np.ndarray:
    """Inverse of `index_of`, vectorized over ranks."""
    r = np.asarray(ranks, dtype=np.int64)
    if r.size and (r.min() < 0 or r.max() >= space.size):
        raise ValueError(f"rank out of range [0, {space.size})")
    V, L = space.vocab_size, space.seq_len
    powers = V ** np.arange(L - 1, -1, -1, dtype=np.int64)
    return (r[..., None] // powers) % V


def sequence_at(rank: int, space: VocabSpec) -> list[int]:
    return sequences_at(np.array([rank]), space)[0].tolist()


def index_of(seq: Sequence[int] | np.ndarray, space: VocabSpec):
    """Lexicographic rank of one sequence (int) or of each row of an (n, L) array."""
    x = space.validate(seq)
    V, L = space.vocab_size, space.seq_len
    powers = V ** np.arange(L - 1, -1, -1, dtype=np.int64)
    ranks = x @ powers
    return int(ranks) if x.ndim == 1 else ranks


def format_sequence(tokens) -> str:
    return " ".join(str(int(t)) for t in tokens)
