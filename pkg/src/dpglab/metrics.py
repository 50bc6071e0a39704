"""Sample-based training metrics (used when the exact oracle is not consulted)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dpglab.ebm import EbmSpec
from dpglab.estimators import GradBatch
from dpglab.policy import TabularPolicy

METRIC_COLUMNS = ["z_ma", "kl_p_pi", "kl_pi_a", "tvd", "var_grad", "var_adv", "mean_abs_adv", "distinct_1"]


def _xs(batch) -> np.ndarray:
    return batch.xs if isinstance(batch, GradBatch) else np.atleast_2d(batch)


@dataclass
class RunningPartition:
    """Running mean of per-iteration importance-sampling estimates of Z."""

    z_ma: float = 0.0
    iterations: int = 0

    def update_value(self, z_hat: float) -> float:
        i = self.iterations
        self.z_ma = (i * self.z_ma + z_hat) / (i + 1)
        self.iterations = i + 1
        return z_hat

    def update(self, batch: GradBatch) -> float:
        """Fold in a batch drawn from the proposal whose rewards are P(x)/q(x)."""
        if len(batch) == 0:
            raise ValueError("empty batch")
        return self.update_value(float(np.mean(batch.reward)))


def is_kl_from_target(ebm: EbmSpec, z: float, proposal: TabularPolicy, model: TabularPolicy, batch) -> float:
    """-log z + 1/(K z) sum_k P(x_k)/q(x_k) log(P(x_k)/model(x_k)), x_k ~ proposal.

    Not clamped: may be slightly negative from sampling noise.
    """
    if z <= 0:
        raise ValueError("z must be positive")
    xs = _xs(batch)
    log_P = ebm.log_score(xs)
    alive = np.isfinite(log_P)
    w = np.exp(log_P[alive] - proposal.log_prob(xs[alive]))
    terms = w * (log_P[alive] - model.log_prob(xs[alive]))
    return float(-np.log(z) + terms.sum() / (len(xs) * z))


def is_tvd(ebm: EbmSpec, z: float, proposal: TabularPolicy, model: TabularPolicy, batch) -> float:
    """1/2 E_q |model(x)/q(x) - P(x)/(z q(x))|."""
    xs = _xs(batch)
    log_q = proposal.log_prob(xs)
    diff = np.exp(model.log_prob(xs) - log_q) - np.exp(ebm.log_score(xs) - log_q) / z
    return float(0.5 * np.mean(np.abs(diff)))


def mc_kl(model: TabularPolicy, other: TabularPolicy, xs_from_model) -> float:
    """Monte-Carlo KL(model, other) from samples of ``model``."""
    xs = _xs(xs_from_model)
    return float(np.mean(model.log_prob(xs) - other.log_prob(xs)))


@dataclass
class VarianceDiagnostics:
    var_grad: float
    var_adv: float
    mean_abs_adv: float
    mean_adv: float


def variance_diagnostics(batch: GradBatch, scale: float = 1.0) -> VarianceDiagnostics:
    """Var(G), Var(A), E|A| and E[A] over a batch.

    ``scale`` multiplies every advantage first; DPG callers pass 1/Z so that
    E|A| / 2 estimates TVD(p, pi) when the baseline is Z pi/q.
    """
    n = len(batch)
    if n < 2:
        raise ValueError("variance diagnostics need a batch of at least 2")
    A = scale * batch.advantage
    mean_g = scale * batch.mean_grad()
    var_grad = float(np.mean(scale**2 * batch.grad_sq_norms()) - mean_g @ mean_g)
    return VarianceDiagnostics(
        var_grad=max(var_grad, 0.0),
        var_adv=float(np.var(A, ddof=1)),
        mean_abs_adv=float(np.mean(np.abs(A))),
        mean_adv=float(np.mean(A)),
    )


def distinct_n_per_sequence(samples, n: int = 1) -> np.ndarray:
    """#unique n-grams / #n-grams for each sequence."""
    xs = np.atleast_2d(np.asarray(samples))
    if xs.shape[0] == 0:
        raise ValueError("no samples")
    L = xs.shape[1]
    if not 1 <= n <= L:
        raise ValueError(f"gram size {n} must be in [1, {L}]")
    m = L - n + 1
    grams = np.stack([xs[:, i : i + m] for i in range(n)], axis=2)  # (N, m, n)
    # encode each n-gram as one integer, then count distinct per row
    base = int(xs.max()) + 1
    codes = (grams * base ** np.arange(n - 1, -1, -1)).sum(axis=2)
    codes.sort(axis=1)
    uniques = 1 + np.count_nonzero(np.diff(codes, axis=1), axis=1)
    return uniques / m


def distinct_n(samples, n: int = 1) -> float:
    """Mean over sequences of (#unique n-grams / #n-grams)."""
    return float(np.mean(distinct_n_per_sequence(samples, n)))
