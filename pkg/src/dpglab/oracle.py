"""Exact ground truth by enumerating the whole sequence space.

Scalar sums go through ``math.fsum``; gradient sums are scatter-adds of
per-sequence score blocks in canonical order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dpglab.ebm import EbmSpec
from dpglab.estimators import RewardSpec
from dpglab.policy import TabularPolicy
from dpglab.seqspace import ExactDistribution, all_sequences, format_sequence, sequence_at

__all__ = [
    "ExactDistribution",
    "EstimatorSpec",
    "SupportError",
    "normalize_ebm",
    "kl",
    "tvd",
    "advantage_table",
    "exact_expected_gradient",
    "exact_gradient_variance",
    "exact_advantage_stats",
    "exact_mean_reward",
    "exact_optimal_baseline",
    "parametric_reward_terms",
    "ziegler_optimal_policy",
    "exact_ziegler_objective",
    "exact_dpg_gradient",
]


class SupportError(ValueError):
    """KL(d1, d2) is infinite: d1 puts mass where d2 has none."""


def normalize_ebm(ebm: EbmSpec) -> tuple[ExactDistribution, float]:
    return ebm.normalize()


def kl(d1: ExactDistribution, d2: ExactDistribution) -> float:
    p, q = d1.probs, d2.probs
    bad = np.flatnonzero((p > 0) & (q <= 0))
    if bad.size:
        x = sequence_at(int(bad[0]), d1.space)
        raise SupportError(f"infinite divergence: sequence [{format_sequence(x)}] has mass in d1 but not in d2")
    m = p > 0
    return max(math.fsum(p[m] * (np.log(p[m]) - np.log(q[m]))), 0.0)


def tvd(d1: ExactDistribution, d2: ExactDistribution) -> float:
    if d1.space != d2.space:
        raise ValueError("distributions live on different spaces")
    return 0.5 * math.fsum(np.abs(d1.probs - d2.probs))


@dataclass
class EstimatorSpec:
    """Which estimator to evaluate exactly.

    ``kind`` is one of ``reinforce``, ``ziegler``, ``dpg_on``, ``dpg_off``.
    ``baseline`` is a baseline kind name or a float used as a constant
    (for ``dpg_off`` a float B means the weight B * pi/q).
    """

    kind: str
    reward: RewardSpec | None = None
    ebm: EbmSpec | None = None
    proposal: TabularPolicy | None = None
    base: TabularPolicy | None = None
    beta: float = 1.0
    baseline: str | float = "none"
    Z: float | None = None


def _score_all(policy: TabularPolicy):
    X = all_sequences(policy.space)
    rows, blocks = policy.score_blocks(X)
    return X, rows, blocks


def _weighted_sum(policy, rows, blocks, coef) -> np.ndarray:
    g = np.zeros_like(policy.logits)
    np.add.at(g, rows, coef[:, None, None] * blocks)
    return g.reshape(-1)


def exact_mean_reward(policy: TabularPolicy, rewards: np.ndarray) -> float:
    return math.fsum(np.exp(policy.log_prob_all()) * rewards)


def exact_optimal_baseline(policy: TabularPolicy, rewards: np.ndarray) -> float:
    """B* = E[R ||grad log pi||^2] / E[||grad log pi||^2]."""
    _, _, blocks = _score_all(policy)
    pi = np.exp(policy.log_prob_all())
    sq = np.sum(blocks**2, axis=(1, 2))
    return math.fsum(pi * rewards * sq) / math.fsum(pi * sq)


def advantage_table(spec: EstimatorSpec, policy: TabularPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Sampling weights and advantages for every sequence, in canonical order."""
    if spec.kind not in ("reinforce", "ziegler", "dpg_on", "dpg_off"):
        raise ValueError(f"unknown estimator kind {spec.kind!r}")
    X = all_sequences(policy.space)
    log_pi = policy.log_prob_all()
    pi = np.exp(log_pi)
    if spec.kind in ("reinforce", "ziegler"):
        if spec.kind == "reinforce":
            R = spec.reward(X)
        else:
            R = spec.reward(X) - spec.beta * (log_pi - spec.base.log_prob_all())
        b = spec.baseline
        if b == "none":
            b = 0.0
        elif b == "mean_reward":
            b = exact_mean_reward(policy, R)
        elif b == "optimal_constant":
            b = exact_optimal_baseline(policy, R)
        elif isinstance(b, str):
            raise ValueError(f"baseline {b!r} not valid for {spec.kind}")
        return pi, R - float(b)
    Z = spec.Z if spec.Z is not None else spec.ebm.exact_partition()
    log_P = spec.ebm.log_score_all()
    if spec.kind == "dpg_on":
        b = spec.baseline
        b = Z if b == "partition_Z" else (0.0 if b == "none" else float(b))
        return pi, np.exp(log_P - log_pi) - b
    log_q = spec.proposal.log_prob_all()
    b = spec.baseline
    b = Z if b == "offpolicy_Z_ratio" else (0.0 if b == "none" else float(b))
    return np.exp(log_q), np.exp(log_P - log_q) - b * np.exp(log_pi - log_q)


def exact_expected_gradient(spec: EstimatorSpec, policy: TabularPolicy) -> np.ndarray:
    """sum_x w(x) A(x) grad log pi(x)."""
    w, A = advantage_table(spec, policy)
    _, rows, blocks = _score_all(policy)
    return _weighted_sum(policy, rows, blocks, w * A)


def exact_gradient_variance(spec: EstimatorSpec, policy: TabularPolicy, scale: float = 1.0) -> float:
    """E_w ||G(x)||^2 - ||E_w G(x)||^2 with G = scale * A(x) grad log pi(x)."""
    w, A = advantage_table(spec, policy)
    A = scale * A
    _, rows, blocks = _score_all(policy)
    mu = _weighted_sum(policy, rows, blocks, w * A)
    second = math.fsum(w * A**2 * np.sum(blocks**2, axis=(1, 2)))
    return max(second - float(mu @ mu), 0.0)


def exact_advantage_stats(spec: EstimatorSpec, policy: TabularPolicy, scale: float = 1.0) -> dict:
    """Exact mean, variance and mean absolute value of the advantage under the sampling law."""
    w, A = advantage_table(spec, policy)
    A = scale * A
    mean = math.fsum(w * A)
    return {
        "mean_adv": mean,
        "var_adv": max(math.fsum(w * (A - mean) ** 2), 0.0),
        "mean_abs_adv": math.fsum(w * np.abs(A)),
    }


def exact_dpg_gradient(policy: TabularPolicy, ebm: EbmSpec) -> np.ndarray:
    """Exact -Z * grad KL(p, pi) = sum_x P(x) grad log pi(x), computed directly from P."""
    _, rows, blocks = _score_all(policy)
    return _weighted_sum(policy, rows, blocks, np.exp(ebm.log_score_all()))


def parametric_reward_terms(policy: TabularPolicy, kind: str, *, ebm: EbmSpec | None = None,
                            reward: RewardSpec | None = None, base: TabularPolicy | None = None,
                            beta: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Split grad E_pi[R_theta] into (RG-term, PG-term).

    ``kind='dpg'``: R_theta = P/pi, so grad R_theta = -R_theta grad log pi.
    ``kind='ziegler'``: R_theta = r - beta log(pi/a), so grad R_theta = -beta grad log pi.
    """
    X, rows, blocks = _score_all(policy)
    log_pi = policy.log_prob_all()
    pi = np.exp(log_pi)
    if kind == "dpg":
        R = np.exp(ebm.log_score_all() - log_pi)
        dR_coef = -R
    elif kind == "ziegler":
        R = reward(X) - beta * (log_pi - base.log_prob_all())
        dR_coef = -beta * np.ones_like(R)
    else:
        raise ValueError(f"unknown parametric reward {kind!r}")
    rg = _weighted_sum(policy, rows, blocks, pi * dR_coef)
    pg = _weighted_sum(policy, rows, blocks, pi * R)
    return rg, pg


def ziegler_optimal_policy(base: TabularPolicy, r: RewardSpec, beta: float,
                           return_partition: bool = False):
    """p_z(x) proportional to a(x) exp(r(x) / beta)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    X = all_sequences(base.space)
    ls = base.log_prob_all() + r(X) / beta
    m = ls.max()
    Z = math.exp(m) * math.fsum(np.exp(ls - m))
    dist = ExactDistribution(base.space, np.exp(ls - m) / math.fsum(np.exp(ls - m)))
    return (dist, Z) if return_partition else dist


def exact_ziegler_objective(policy: TabularPolicy, base: TabularPolicy, r: RewardSpec, beta: float) -> float:
    """E_pi[r(x) - beta log(pi(x)/a(x))]."""
    X = all_sequences(policy.space)
    log_pi = policy.log_prob_all()
    return math.fsum(np.exp(log_pi) * (r(X) - beta * (log_pi - base.log_prob_all())))
