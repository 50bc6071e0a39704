"""Energy-based targets P(x) = a(x) * exp(sum_i lambda_i phi_i(x)) * b(x) and moment fitting."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from dpglab.features import Feature
from dpglab.policy import TabularPolicy
from dpglab.seqspace import ExactDistribution, all_sequences

log = logging.getLogger(__name__)

LAMBDA_MAX = 30.0


class UnsatisfiableError(ValueError):
    """The target has no mass (Z == 0) or a moment target cannot be reached."""


class NoSurvivingSamplesError(RuntimeError):
    pass


@dataclass
class EbmSpec:
    base: TabularPolicy
    features: list[Feature] = field(default_factory=list)
    lambdas: np.ndarray | None = None
    filter: Feature | None = None

    def __post_init__(self):
        self.features = list(self.features)
        if self.lambdas is None:
            self.lambdas = np.zeros(len(self.features))
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64).copy()
        if self.lambdas.shape != (len(self.features),):
            raise ValueError(f"{len(self.features)} features but {self.lambdas.size} lambdas")
        for f in self.features:
            f.validate(self.base.space)
        if self.filter is not None:
            self.filter.validate(self.base.space)

    @property
    def space(self):
        return self.base.space

    def copy(self) -> "EbmSpec":
        return EbmSpec(self.base, list(self.features), self.lambdas.copy(), self.filter)

    def feature_matrix(self, xs) -> np.ndarray:
        xs = np.atleast_2d(xs)
        if not self.features:
            return np.zeros((xs.shape[0], 0))
        return np.stack([f(xs) for f in self.features], axis=1).astype(np.float64)

    def log_filter(self, xs) -> np.ndarray:
        xs = np.atleast_2d(xs)
        if self.filter is None:
            return np.zeros(xs.shape[0])
        return np.where(self.filter(xs), 0.0, -np.inf)

    def log_score(self, xs) -> np.ndarray:
        """log P(x) for an (n, L) batch; -inf where the filter rejects."""
        xs = np.atleast_2d(xs)
        return self.base.log_prob(xs) + self.feature_matrix(xs) @ self.lambdas + self.log_filter(xs)

    def score(self, x) -> float:
        return float(np.exp(self.log_score(np.asarray(x)[None, :])[0]))

    def log_score_all(self) -> np.ndarray:
        X = all_sequences(self.space)
        return self.base.log_prob_all() + self.feature_matrix(X) @ self.lambdas + self.log_filter(X)

    def exact_partition(self) -> float:
        Z = math.fsum(np.exp(self.log_score_all()))
        if Z <= 0.0:
            raise UnsatisfiableError("partition function is zero: the filter rejects every sequence")
        return Z

    def normalize(self) -> tuple[ExactDistribution, float]:
        ls = self.log_score_all()
        Z = math.fsum(np.exp(ls))
        if Z <= 0.0:
            raise UnsatisfiableError("partition function is zero: the filter rejects every sequence")
        return ExactDistribution(self.space, np.exp(ls - math.log(Z))), Z


@dataclass
class MomentTargets:
    mu_bar: np.ndarray

    def __post_init__(self):
        self.mu_bar = np.asarray(self.mu_bar, dtype=np.float64)
        if np.any((self.mu_bar < 0) | (self.mu_bar > 1)):
            raise ValueError(f"moment targets must lie in [0, 1], got {self.mu_bar.tolist()}")

    def validate(self, ebm: EbmSpec) -> None:
        """Check each target is attainable on the support of a(x) b(x).

        The tabular base gives every sequence positive mass, so a target is
        attainable iff the feature takes the required value(s) somewhere the
        filter allows.
        """
        if len(self.mu_bar) != len(ebm.features):
            raise UnsatisfiableError(f"{len(ebm.features)} features but {len(self.mu_bar)} targets")
        X = all_sequences(ebm.space)
        support = np.isfinite(ebm.log_filter(X))
        if not support.any():
            raise UnsatisfiableError("filter rejects every sequence")
        phi = ebm.feature_matrix(X)[support]
        for i, mu in enumerate(self.mu_bar):
            has1, has0 = bool(phi[:, i].max() > 0), bool(phi[:, i].min() < 1)
            ok = (has1 and has0) if 0 < mu < 1 else (has1 if mu == 1 else has0)
            if not ok:
                raise UnsatisfiableError(
                    f"target {mu} for feature {ebm.features[i]} is not attainable under the base/filter"
                )


def snis_moments(ebm: EbmSpec, proposal: TabularPolicy, n: int, rng: np.random.Generator) -> np.ndarray:
    """Self-normalized importance sampling estimate of E_p phi_i."""
    if n < 1:
        raise ValueError("n must be >= 1")
    xs = proposal.sample(rng, n)
    return _snis(ebm.log_score(xs) - proposal.log_prob(xs), ebm.feature_matrix(xs))


def _snis(log_w: np.ndarray, phi: np.ndarray) -> np.ndarray:
    finite = np.isfinite(log_w)
    if not finite.any():
        raise NoSurvivingSamplesError(f"no surviving samples: all {log_w.size} importance weights are zero")
    w = np.exp(log_w - log_w[finite].max())
    return (w @ phi) / w.sum()


@dataclass
class FitConfig:
    lr: float = 0.5
    tolerance: float = 0.01
    max_iters: int = 10_000
    sample_size: int = 4096
    mode: str = "exact"
    lambda_max: float = LAMBDA_MAX


@dataclass
class FitReport:
    converged: bool
    iterations: int
    lambdas: list[float]
    moments: list[float]
    residuals: list[float]
    capped: bool
    mode: str

    @property
    def max_residual(self) -> float:
        return max((abs(r) for r in self.residuals), default=0.0)


def fit_lambdas(ebm: EbmSpec, targets: MomentTargets, cfg: FitConfig | None = None,
                rng: np.random.Generator | None = None, proposal: TabularPolicy | None = None) -> FitReport:
    """Fit lambda in place by gradient steps lambda += lr * (mu_bar - mu(lambda)).

    In ``exact`` mode mu is computed by enumeration. In ``snis`` mode one sample
    of ``sample_size`` sequences is drawn from ``proposal`` (default: the base)
    and mu is re-estimated on it for every new lambda by self-normalized
    importance weighting. Failure to reach tolerance is reported, not raised.
    """
    cfg = cfg or FitConfig()
    mu_bar = targets.mu_bar
    if len(mu_bar) != len(ebm.features):
        raise ValueError("one target per feature required")
    if cfg.mode == "exact":
        X = all_sequences(ebm.space)
        log_fixed = ebm.base.log_prob_all() + ebm.log_filter(X)
        phi = ebm.feature_matrix(X)
    elif cfg.mode == "snis":
        if rng is None:
            raise ValueError("snis mode needs an rng")
        proposal = proposal or ebm.base
        xs = proposal.sample(rng, cfg.sample_size)
        log_fixed = ebm.base.log_prob(xs) + ebm.log_filter(xs) - proposal.log_prob(xs)
        phi = ebm.feature_matrix(xs)
    else:
        raise ValueError(f"unknown fit mode {cfg.mode!r}")

    if cfg.mode == "exact":
        def moments(lam):
            lw = log_fixed + phi @ lam
            return np.exp(lw - logsumexp(lw)) @ phi
    else:
        def moments(lam):
            return _snis(log_fixed + phi @ lam, phi)

    lam = ebm.lambdas.copy()
    it = 0
    converged = False
    while True:
        mu = moments(lam)
        resid = mu_bar - mu
        if np.max(np.abs(resid), initial=0.0) <= cfg.tolerance:
            converged = True
            break
        if it >= cfg.max_iters:
            break
        new = np.clip(lam + cfg.lr * resid, -cfg.lambda_max, cfg.lambda_max)
        it += 1
        if np.array_equal(new, lam):
            break  # stuck at the cap
        lam = new

    capped = bool(np.any(np.abs(lam) >= cfg.lambda_max))
    if capped:
        log.warning("lambda reached the cap |lambda| = %g; target approximated", cfg.lambda_max)
    ebm.lambdas = lam
    return FitReport(
        converged=converged,
        iterations=it,
        lambdas=lam.tolist(),
        moments=mu.tolist(),
        residuals=resid.tolist(),
        capped=capped,
        mode=cfg.mode,
    )
