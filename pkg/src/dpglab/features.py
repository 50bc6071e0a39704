"""Binary sequence features and their config-string syntax.

Syntax (one feature per string)::

    contains:3        token 3 occurs somewhere
    atleast:2:2       token 2 occurs at least twice
    prefix:0,1        sequence starts with 0 1
    parity:1          token 1 occurs an even number of times (zero counts as even)
    and[f,g,...]      all_of
    or[f,g,...]       any_of
    not[f]            negation
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from dpglab.seqspace import VocabSpec, all_sequences


class FeatureSyntaxError(ValueError):
    pass


class Feature:
    """Base class. Subclasses implement `_eval` on an (n, L) int array."""

    name: str | None = None

    def __call__(self, xs) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=np.int64))
        return self._eval(xs)

    def _eval(self, xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def tokens(self) -> list[int]:
        return []

    def validate(self, space: VocabSpec) -> None:
        bad = [t for t in self.tokens() if not 0 <= t < space.vocab_size]
        if bad:
            raise ValueError(f"feature {self}: token(s) {bad} outside vocabulary of size {space.vocab_size}")

    @property
    def identifier(self) -> str:
        return self.name or re.sub(r"[^A-Za-z0-9]+", "_", str(self)).strip("_")


@dataclass(frozen=True)
class ContainsToken(Feature):
    token: int

    def _eval(self, xs):
        return np.any(xs == self.token, axis=1)

    def tokens(self):
        return [self.token]

    def __str__(self):
        return f"contains:{self.token}"


@dataclass(frozen=True)
class CountAtLeast(Feature):
    token: int
    k: int

    def _eval(self, xs):
        return np.sum(xs == self.token, axis=1) >= self.k

    def tokens(self):
        return [self.token]

    def __str__(self):
        return f"atleast:{self.token}:{self.k}"


@dataclass(frozen=True)
class PrefixIs(Feature):
    prefix: tuple[int, ...]

    def _eval(self, xs):
        k = len(self.prefix)
        if k > xs.shape[1]:
            return np.zeros(xs.shape[0], dtype=bool)
        return np.all(xs[:, :k] == np.array(self.prefix, dtype=np.int64), axis=1)

    def tokens(self):
        return list(self.prefix)

    def validate(self, space):
        super().validate(space)
        if len(self.prefix) > space.seq_len:
            raise ValueError(f"feature {self}: prefix longer than L={space.seq_len}")

    def __str__(self):
        return "prefix:" + ",".join(str(t) for t in self.prefix)


@dataclass(frozen=True)
class ParityEven(Feature):
    token: int

    def _eval(self, xs):
        return np.sum(xs == self.token, axis=1) % 2 == 0

    def tokens(self):
        return [self.token]

    def __str__(self):
        return f"parity:{self.token}"


@dataclass(frozen=True)
class AllOf(Feature):
    items: tuple[Feature, ...]

    def _eval(self, xs):
        out = np.ones(xs.shape[0], dtype=bool)
        for f in self.items:
            out &= f._eval(xs)
        return out

    def tokens(self):
        return [t for f in self.items for t in f.tokens()]

    def validate(self, space):
        for f in self.items:
            f.validate(space)

    def __str__(self):
        return "and[" + ",".join(str(f) for f in self.items) + "]"


@dataclass(frozen=True)
class AnyOf(Feature):
    items: tuple[Feature, ...]

    def _eval(self, xs):
        out = np.zeros(xs.shape[0], dtype=bool)
        for f in self.items:
            out |= f._eval(xs)
        return out

    def tokens(self):
        return [t for f in self.items for t in f.tokens()]

    def validate(self, space):
        for f in self.items:
            f.validate(space)

    def __str__(self):
        return "or[" + ",".join(str(f) for f in self.items) + "]"


@dataclass(frozen=True)
class Not(Feature):
    inner: Feature

    def _eval(self, xs):
        return ~self.inner._eval(xs)

    def tokens(self):
        return self.inner.tokens()

    def validate(self, space):
        self.inner.validate(space)

    def __str__(self):
        return f"not[{self.inner}]"


def contains_token(t: int) -> Feature:
    return ContainsToken(int(t))


def count_at_least(t: int, k: int) -> Feature:
    return CountAtLeast(int(t), int(k))


def prefix_is(tokens) -> Feature:
    return PrefixIs(tuple(int(t) for t in tokens))


def parity_even(t: int) -> Feature:
    return ParityEven(int(t))


def all_of(items) -> Feature:
    return AllOf(tuple(items))


def any_of(items) -> Feature:
    return AnyOf(tuple(items))


def not_(inner: Feature) -> Feature:
    return Not(inner)


def eval_feature(f: Feature, x) -> int:
    """Evaluate on a single sequence, returning 0 or 1."""
    return int(f(np.asarray(x)[None, :])[0])


def base_rate(f: Feature, policy) -> float:
    """Exact E_{x~policy} f(x) by enumeration."""
    probs = policy.exact_distribution().probs
    return float(np.dot(probs, f(all_sequences(policy.space))))


class _Parser:
    _int = re.compile(r"\d+")

    def __init__(self, text: str):
        self.text = text.replace(" ", "")
        self.pos = 0

    def error(self, msg):
        raise FeatureSyntaxError(f"{msg} at position {self.pos} in {self.text!r}")

    def expect(self, s):
        if not self.text.startswith(s, self.pos):
            self.error(f"expected {s!r}")
        self.pos += len(s)

    def integer(self) -> int:
        m = self._int.match(self.text, self.pos)
        if not m:
            self.error("expected integer")
        self.pos = m.end()
        return int(m.group())

    def feature(self) -> Feature:
        t = self.text
        for kw in ("contains:", "atleast:", "prefix:", "parity:", "and[", "or[", "not["):
            if t.startswith(kw, self.pos):
                self.pos += len(kw)
                break
        else:
            self.error("unknown feature")
        if kw == "contains:":
            return contains_token(self.integer())
        if kw == "atleast:":
            tok = self.integer()
            self.expect(":")
            return count_at_least(tok, self.integer())
        if kw == "parity:":
            return parity_even(self.integer())
        if kw == "prefix:":
            toks = [self.integer()]
            # a comma continues the prefix only when a digit follows
            while self.pos + 1 < len(t) and t[self.pos] == "," and t[self.pos + 1].isdigit():
                self.pos += 1
                toks.append(self.integer())
            return prefix_is(toks)
        items = []
        if t.startswith("]", self.pos):
            self.pos += 1
        else:
            items.append(self.feature())
            while t.startswith(",", self.pos):
                self.pos += 1
                items.append(self.feature())
            self.expect("]")
        if kw == "not[":
            if len(items) != 1:
                self.error("not[...] takes exactly one feature")
            return not_(items[0])
        return all_of(items) if kw == "and[" else any_of(items)


def parse_feature(text: str, space: VocabSpec | None = None) -> Feature:
    p = _Parser(text)
    f = p.feature()
    if p.pos != len(p.text):
        p.error("trailing characters")
    if space is not None:
        f.validate(space)
    return f
