"""Per-sample score-function gradient estimators.

Every estimator returns a :class:`GradBatch` whose per-sample gradient is
``advantage * grad log pi(x)``. Directions are ascent directions: on E[R] for
the reward-maximization family, and on ``-Z * KL(p, pi)`` for DPG (callers
divide by Z).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dpglab.ebm import EbmSpec
from dpglab.features import Feature
from dpglab.policy import TabularPolicy
from dpglab.seqspace import VocabSpec, index_of

BASELINES = ("none", "mean_reward", "optimal_constant", "partition_Z", "offpolicy_Z_ratio")


@dataclass(frozen=True)
class RewardSpec:
    kind: str
    feature: Feature | None = None
    ebm: EbmSpec | None = None
    table: np.ndarray | None = None
    space: VocabSpec | None = None

    @classmethod
    def feature_indicator(cls, f: Feature) -> "RewardSpec":
        return cls("feature_indicator", feature=f)

    @classmethod
    def ebm_score(cls, ebm: EbmSpec) -> "RewardSpec":
        return cls("ebm_score", ebm=ebm)

    @classmethod
    def custom_table(cls, values, space: VocabSpec) -> "RewardSpec":
        """Arbitrary reward given as a table over sequences in canonical rank order."""
        table = np.asarray(values, dtype=np.float64)
        if table.shape != (space.size,):
            raise ValueError(f"reward table needs {space.size} entries, got {table.shape}")
        return cls("custom_table", table=table, space=space)

    def __call__(self, xs) -> np.ndarray:
        xs = np.atleast_2d(xs)
        if self.kind == "feature_indicator":
            return self.feature(xs).astype(np.float64)
        if self.kind == "ebm_score":
            return np.exp(self.ebm.log_score(xs))
        if self.kind == "custom_table":
            return self.table[index_of(xs, self.space)]
        raise ValueError(f"unknown reward kind {self.kind!r}")


@dataclass
class GradSample:
    x: np.ndarray
    reward: float
    baseline: float
    advantage: float
    grad: np.ndarray
    importance_weight: float = 1.0


@dataclass
class GradBatch:
    """A batch of per-sample gradients stored sparsely (one block per step)."""

    xs: np.ndarray
    reward: np.ndarray
    baseline: np.ndarray
    importance_weight: np.ndarray
    rows: np.ndarray
    blocks: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        self.advantage = self.reward - self.baseline

    def __len__(self):
        return self.xs.shape[0]

    def __getitem__(self, k) -> GradSample:
        g = np.zeros(self.shape)
        g[self.rows[k]] += self.advantage[k] * self.blocks[k]
        return GradSample(
            x=self.xs[k],
            reward=float(self.reward[k]),
            baseline=float(self.baseline[k]),
            advantage=float(self.advantage[k]),
            grad=g.reshape(-1),
            importance_weight=float(self.importance_weight[k]),
        )

    def __iter__(self):
        return (self[k] for k in range(len(self)))

    def score_sq_norms(self) -> np.ndarray:
        """||grad log pi(x_k)||^2 per sample."""
        return np.sum(self.blocks**2, axis=(1, 2))

    def grad_sq_norms(self) -> np.ndarray:
        return self.advantage**2 * self.score_sq_norms()

    def grads(self) -> np.ndarray:
        """Dense (n, n_params) matrix of per-sample gradients."""
        n = len(self)
        out = np.zeros((n,) + self.shape)
        out[np.arange(n)[:, None], self.rows] += self.advantage[:, None, None] * self.blocks
        return out.reshape(n, -1)

    def mean_grad(self) -> np.ndarray:
        g = np.zeros(self.shape)
        np.add.at(g, self.rows, (self.advantage / len(self))[:, None, None] * self.blocks)
        return g.reshape(-1)


def _batch(policy, xs, reward, baseline, iw) -> GradBatch:
    rows, blocks = policy.score_blocks(xs)
    n = xs.shape[0]
    return GradBatch(
        xs=xs,
        reward=np.asarray(reward, dtype=np.float64),
        baseline=np.broadcast_to(np.asarray(baseline, dtype=np.float64), (n,)).copy(),
        importance_weight=np.broadcast_to(np.asarray(iw, dtype=np.float64), (n,)).copy(),
        rows=rows,
        blocks=blocks,
        shape=policy.logits.shape,
    )


def _with_constant_baseline(policy, xs, rewards, baseline: str) -> GradBatch:
    batch = _batch(policy, xs, rewards, 0.0, 1.0)
    if baseline == "none":
        return batch
    if len(xs) < 2:
        raise ValueError("a batch-estimated baseline needs n >= 2")
    if baseline == "mean_reward":
        b = float(np.mean(rewards))
    elif baseline == "optimal_constant":
        sq = batch.score_sq_norms()
        b = float(np.dot(rewards, sq) / sq.sum()) if sq.sum() > 0 else float(np.mean(rewards))
    else:
        raise ValueError(f"baseline {baseline!r} is not valid for reward maximization")
    batch.baseline[:] = b
    batch.advantage = batch.reward - batch.baseline
    return batch


def reinforce_batch(policy: TabularPolicy, reward: RewardSpec, baseline: str, n: int,
                    rng: np.random.Generator) -> GradBatch:
    xs = policy.sample(rng, n)
    return _with_constant_baseline(policy, xs, reward(xs), baseline)


def ziegler_reward(policy: TabularPolicy, base: TabularPolicy, r: RewardSpec, beta: float, xs) -> np.ndarray:
    """R^z(x) = r(x) - beta * log(pi(x) / a(x))."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    xs = np.atleast_2d(xs)
    return r(xs) - beta * (policy.log_prob(xs) - base.log_prob(xs))


def ziegler_batch(policy: TabularPolicy, base: TabularPolicy, r: RewardSpec, beta: float, baseline: str,
                  n: int, rng: np.random.Generator) -> GradBatch:
    """Plain policy gradient on the KL-penalized reward (its reward-gradient term is zero in expectation)."""
    xs = policy.sample(rng, n)
    return _with_constant_baseline(policy, xs, ziegler_reward(policy, base, r, beta, xs), baseline)


def _ratio(log_num: np.ndarray, log_den: np.ndarray) -> np.ndarray:
    if np.any(np.isneginf(log_den)):
        raise FloatingPointError("sampling probability underflowed to zero")
    return np.exp(log_num - log_den)


def dpg_on_batch(policy: TabularPolicy, ebm: EbmSpec, Z: float, with_baseline: bool, n: int,
                 rng: np.random.Generator) -> GradBatch:
    """On-policy DPG: x ~ pi, reward P(x)/pi(x), baseline Z."""
    return dpg_on_grads(policy, ebm, Z, with_baseline, policy.sample(rng, n))


def dpg_on_grads(policy, ebm, Z, with_baseline, xs) -> GradBatch:
    if Z <= 0:
        raise ValueError("Z must be positive")
    reward = _ratio(ebm.log_score(xs), policy.log_prob(xs))
    return _batch(policy, xs, reward, Z if with_baseline else 0.0, 1.0)


def dpg_off_batch(policy: TabularPolicy, proposal: TabularPolicy, ebm: EbmSpec, Z: float,
                  with_baseline: bool, n: int, rng: np.random.Generator) -> GradBatch:
    """Off-policy DPG: x ~ q, reward P(x)/q(x), baseline Z pi(x)/q(x)."""
    return dpg_off_grads(policy, proposal, ebm, Z, with_baseline, proposal.sample(rng, n))


def dpg_off_grads(policy, proposal, ebm, Z, with_baseline, xs) -> GradBatch:
    """Off-policy DPG gradients for given samples ``xs`` (assumed drawn from ``proposal``)."""
    if Z <= 0:
        raise ValueError("Z must be positive")
    log_q = proposal.log_prob(xs)
    reward = _ratio(ebm.log_score(xs), log_q)
    iw = _ratio(policy.log_prob(xs), log_q)
    return _batch(policy, xs, reward, Z * iw if with_baseline else 0.0, iw)
