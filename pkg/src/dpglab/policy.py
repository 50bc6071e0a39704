"""Tabular autoregressive softmax policy.

One row of logits per prefix (length 0..L-1), rows ordered by prefix length and
then lexicographically, so the row of prefix ``x[:t]`` is
``offset[t] + rank(x[:t])``. The flattened logits are the parameter vector and
every gradient in the package shares that layout.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from dpglab.seqspace import ExactDistribution, VocabSpec, all_sequences


class TabularPolicy:
    def __init__(self, space: VocabSpec, logits=None):
        self.space = space
        shape = (space.n_rows, space.vocab_size)
        if logits is None:
            self.logits = np.zeros(shape)
        else:
            self.logits = np.array(logits, dtype=np.float64).reshape(shape)
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")

    @classmethod
    def uniform(cls, space: VocabSpec) -> "TabularPolicy":
        return cls(space)

    @classmethod
    def randomized(cls, space: VocabSpec, seed: int, scale: float = 1.0) -> "TabularPolicy":
        rng = np.random.default_rng(seed)
        return cls(space, scale * rng.standard_normal((space.n_rows, space.vocab_size)))

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(self.space, self.logits.copy())

    clone = copy

    @property
    def params(self) -> np.ndarray:
        """Flat view of the logits (writes go through to the policy)."""
        return self.logits.reshape(-1)

    @property
    def n_params(self) -> int:
        return self.logits.size

    def log_softmax_table(self) -> np.ndarray:
        return _log_softmax(self.logits)

    def rows(self, xs) -> np.ndarray:
        """Row index of the prefix visited at each step, shape (n, L)."""
        xs = np.atleast_2d(xs)
        V = self.space.vocab_size
        offsets = self.space.row_offsets()
        out = np.empty(xs.shape, dtype=np.int64)
        prefix = np.zeros(xs.shape[0], dtype=np.int64)
        for t in range(self.space.seq_len):
            out[:, t] = offsets[t] + prefix
            prefix = prefix * V + xs[:, t]
        return out

    def log_prob(self, xs):
        """log pi(x) for one sequence (returns float) or an (n, L) batch."""
        xs = self.space.validate(xs)
        single = xs.ndim == 1
        xs2 = np.atleast_2d(xs)
        rows = self.rows(xs2)
        lsm = _log_softmax(self.logits[rows])
        lp = np.take_along_axis(lsm, xs2[..., None], axis=2)[..., 0].sum(axis=1)
        return float(lp[0]) if single else lp

    def score_blocks(self, xs):
        """Sparse form of grad log pi(x).

        Returns ``(rows, blocks)``: for each sample and step t, the gradient is
        ``onehot(x_t) - softmax(row)`` on row ``rows[k, t]`` and zero elsewhere.
        Rows visited by one sequence are distinct (one per prefix length).
        """
        xs = np.atleast_2d(xs)
        rows = self.rows(xs)
        blocks = -np.exp(_log_softmax(self.logits[rows]))
        n, L = xs.shape
        blocks[np.arange(n)[:, None], np.arange(L)[None, :], xs] += 1.0
        return rows, blocks

    def grad_log_prob(self, x) -> np.ndarray:
        x = self.space.validate(x)
        if x.ndim != 1:
            raise ValueError("grad_log_prob takes a single sequence; use score_blocks for batches")
        rows, blocks = self.score_blocks(x[None, :])
        g = np.zeros_like(self.logits)
        g[rows[0]] += blocks[0]
        return g.reshape(-1)

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        """Draw sequences by inverse-CDF sampling from per-step softmaxes.

        Consumes exactly one ``(n, L)`` block of uniforms from ``rng``, so two
        policies sampled with identically seeded generators share their noise.
        """
        m = 1 if n is None else n
        u = rng.random((m, self.space.seq_len))
        V = self.space.vocab_size
        offsets = self.space.row_offsets()
        xs = np.empty((m, self.space.seq_len), dtype=np.int64)
        prefix = np.zeros(m, dtype=np.int64)
        for t in range(self.space.seq_len):
            c = np.cumsum(np.exp(_log_softmax(self.logits[offsets[t] + prefix])), axis=1)
            tok = np.sum(c[:, :-1] <= u[:, t : t + 1], axis=1)
            xs[:, t] = tok
            prefix = prefix * V + tok
        return xs[0] if n is None else xs

    def log_prob_all(self) -> np.ndarray:
        """log pi over the full space in canonical order."""
        X = all_sequences(self.space)
        lsm = self.log_softmax_table()
        return lsm[self.rows(X), X].sum(axis=1)

    def exact_distribution(self) -> ExactDistribution:
        p = np.exp(self.log_prob_all())
        return ExactDistribution(self.space, p)

    def save(self, path) -> None:
        lines = [f"{self.space.vocab_size} {self.space.seq_len}"]
        lines += [" ".join(f"{v:.17g}" for v in row) for row in self.logits]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TabularPolicy":
        text = Path(path).read_text(encoding="utf-8").split("\n")
        V, L = (int(v) for v in text[0].split())
        space = VocabSpec(V, L)
        rows = [line.split() for line in text[1:] if line.strip()]
        if len(rows) != space.n_rows or any(len(r) != V for r in rows):
            raise ValueError(f"{path}: expected {space.n_rows} rows of {V} logits")
        return cls(space, np.array(rows, dtype=np.float64))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    """Log-sum-exp stabilized log-softmax over the last axis."""
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
