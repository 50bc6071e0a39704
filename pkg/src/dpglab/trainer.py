"""Training loops for reward maximization (Reinforce, Ziegler) and KL-adaptive DPG (GDC, GDC++)."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from dpglab import estimators as est
from dpglab.metrics import (
    RunningPartition,
    distinct_n,
    distinct_n_per_sequence,
    is_kl_from_target,
    is_tvd,
    mc_kl,
    variance_diagnostics,
)
from dpglab.oracle import kl, tvd
from dpglab.policy import TabularPolicy
from dpglab.seqspace import all_sequences

log = logging.getLogger(__name__)

METHODS = ("reinforce", "reinforce_baseline", "ziegler", "gdc", "gdcpp")
DM_METHODS = ("gdc", "gdcpp")


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: Literal["reinforce", "reinforce_baseline", "ziegler", "gdc", "gdcpp"] = "gdcpp"
    batch_size: int = Field(64, ge=1)
    epochs: int = Field(1000, ge=1)
    lr: float = Field(0.05, gt=0)
    optimizer: Literal["sgd", "adam"] = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    beta: float = Field(1.0, gt=0)
    z_mode: Literal["exact", "z_ma"] = "z_ma"
    seed: int = 0
    eval_every: int = Field(10, ge=1)
    accept_every: int = Field(1, ge=1)
    oracle_metrics: bool = True
    checkpoint_every: int = Field(0, ge=0)
    kl_guard: float = 50.0

    @model_validator(mode="after")
    def _check(self):
        if self.method in ("reinforce_baseline", "ziegler", "gdcpp") and self.batch_size < 2:
            raise ValueError(f"method {self.method} needs batch_size >= 2")
        return self


class TrainingAborted(RuntimeError):
    def __init__(self, reason: str, record: "TrainRecord"):
        super().__init__(reason)
        self.reason = reason
        self.record = record


@dataclass
class TrainRecord:
    method: str
    seed: int
    epoch: int
    samples_seen: int
    metrics: dict[str, float]
    wall_ms: float = 0.0
    extras: dict[str, float] = field(default_factory=dict)


def proposal_accept(kl_pi: float, kl_q: float) -> bool:
    """Replace the proposal by the policy iff the policy is strictly closer to p."""
    if not (math.isfinite(kl_pi) and math.isfinite(kl_q)):
        raise ValueError("KL estimates must be finite")
    return kl_pi < kl_q


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        params += self.lr * grad


class Adam:
    """Adam with bias correction, ascent convention."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        params += self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return Sgd(cfg.lr)
    return Adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def optimizer_step(params: np.ndarray, grad: np.ndarray, state, cfg: TrainConfig | None = None) -> None:
    """Apply one ascent step in place; ``state`` is an optimizer from `make_optimizer`."""
    if params.shape != grad.shape:
        raise ValueError(f"shape mismatch {params.shape} vs {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    state.step(params, grad)


class Trainer:
    def __init__(self, policy: TabularPolicy, task, cfg: TrainConfig,
                 sink: Callable[[TrainRecord], None] | None = None, checkpoint_dir=None):
        self.policy = policy
        self.task = task
        self.cfg = cfg
        self.sink = sink
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.base = task.ebm.base
        self.proposal = policy.copy()
        self.running_z = RunningPartition()
        self.opt = make_optimizer(cfg)
        train_ss, eval_ss = np.random.SeedSequence(cfg.seed).spawn(2)
        self.rng = np.random.Generator(np.random.Philox(train_ss))
        self.eval_rng = np.random.Generator(np.random.Philox(eval_ss))
        self.needs_oracle = cfg.oracle_metrics or cfg.z_mode == "exact"
        if self.needs_oracle:
            self.p, self.Z = task.ebm.normalize()
        else:
            self.p, self.Z = None, None
        if cfg.method not in DM_METHODS and task.reward is None:
            raise ValueError(f"task {task.name} defines no reward for {cfg.method}")
        self.epoch = 0
        self.adv_sum = 0.0
        self.adv_count = 0
        self.accepts = 0
        self.last_batch = None
        self.last_scale = 1.0

    # one epoch -----------------------------------------------------------------

    def draw_batch(self):
        cfg, task = self.cfg, self.task
        n = cfg.batch_size
        if cfg.method in DM_METHODS:
            xs = self.proposal.sample(self.rng, n)
            z_hat = float(np.mean(np.exp(task.ebm.log_score(xs) - self.proposal.log_prob(xs))))
            self.running_z.update_value(z_hat)
            Z = self.Z if cfg.z_mode == "exact" else self.running_z.z_ma
            with_baseline = cfg.method == "gdcpp"
            if Z <= 0:
                # no sample has hit the target yet: every reward is zero, so skip the baseline too
                Z, with_baseline = 1.0, False
            batch = est.dpg_off_grads(self.policy, self.proposal, task.ebm, Z, with_baseline, xs)
            return batch, 1.0 / Z
        if cfg.method == "ziegler":
            batch = est.ziegler_batch(self.policy, self.base, task.reward, cfg.beta, "mean_reward", n, self.rng)
        else:
            kind = "mean_reward" if cfg.method == "reinforce_baseline" else "none"
            batch = est.reinforce_batch(self.policy, task.reward, kind, n, self.rng)
        z_hat = float(np.mean(np.exp(task.ebm.log_score(batch.xs) - self.policy.log_prob(batch.xs))))
        self.running_z.update_value(z_hat)
        return batch, 1.0

    def step(self) -> None:
        self.epoch += 1
        batch, scale = self.draw_batch()
        grad = scale * batch.mean_grad()
        self.last_batch, self.last_scale = batch, scale
        self.adv_sum += float(np.sum(scale * batch.advantage))
        self.adv_count += len(batch)
        if not np.all(np.isfinite(grad)):
            rec = self.record(batch, scale)
            self._emit(rec)
            raise TrainingAborted(f"non-finite gradient at epoch {self.epoch}", rec)
        optimizer_step(self.policy.params, grad, self.opt, self.cfg)
        if self.cfg.method in DM_METHODS and self.epoch % self.cfg.accept_every == 0:
            self._maybe_replace_proposal(batch.xs)

    def _maybe_replace_proposal(self, xs) -> None:
        if self.cfg.z_mode == "exact":
            kl_pi = kl(self.p, self.policy.exact_distribution())
            kl_q = kl(self.p, self.proposal.exact_distribution())
        else:
            z = self.running_z.z_ma
            if z <= 0:
                return
            ebm = self.task.ebm
            kl_pi = is_kl_from_target(ebm, z, self.proposal, self.policy, xs)
            kl_q = is_kl_from_target(ebm, z, self.proposal, self.proposal, xs)
        if proposal_accept(kl_pi, kl_q):
            self.proposal = self.policy.copy()
            self.accepts += 1

    # evaluation ----------------------------------------------------------------

    def record(self, batch, scale) -> TrainRecord:
        cfg, task = self.cfg, self.task
        K = cfg.batch_size
        eval_xs = self.policy.sample(self.eval_rng, K)
        m: dict[str, float] = {"z_ma": self.running_z.z_ma}
        if cfg.oracle_metrics:
            pi = self.policy.exact_distribution()
            m["kl_p_pi"] = kl(self.p, pi)
            m["kl_pi_a"] = kl(pi, self.base.exact_distribution())
            m["tvd"] = tvd(self.p, pi)
        else:
            z = self.running_z.z_ma if self.running_z.z_ma > 0 else float("nan")
            q = self.proposal if cfg.method in DM_METHODS else self.policy
            xs = batch.xs
            m["kl_p_pi"] = is_kl_from_target(task.ebm, z, q, self.policy, xs) if z == z else float("nan")
            m["kl_pi_a"] = mc_kl(self.policy, self.base, eval_xs)
            m["tvd"] = is_tvd(task.ebm, z, q, self.policy, xs) if z == z else float("nan")
        for fid, f in task.constraints():
            if cfg.oracle_metrics:
                m[f"mean_phi_{fid}"] = float(pi.probs @ f(all_sequences(self.policy.space)))
            else:
                m[f"mean_phi_{fid}"] = float(np.mean(f(eval_xs)))
        if len(batch) >= 2:
            d = variance_diagnostics(batch, scale)
            m.update(var_grad=d.var_grad, var_adv=d.var_adv, mean_abs_adv=d.mean_abs_adv)
        else:
            m.update(var_grad=float("nan"), var_adv=float("nan"), mean_abs_adv=float("nan"))
        if cfg.oracle_metrics:
            m["distinct_1"] = float(pi.probs @ distinct_n_per_sequence(all_sequences(self.policy.space), 1))
        else:
            m["distinct_1"] = distinct_n(eval_xs, 1)
        return TrainRecord(
            method=cfg.method,
            seed=cfg.seed,
            epoch=self.epoch,
            samples_seen=self.epoch * cfg.batch_size,
            metrics=m,
            extras={
                "adv_mean_running": self.adv_sum / max(self.adv_count, 1),
                "adv_count": float(self.adv_count),
                "proposal_updates": float(self.accepts),
            },
        )

    def _emit(self, rec: TrainRecord) -> None:
        if self.sink is not None:
            self.sink(rec)

    def checkpoint(self) -> None:
        if self.checkpoint_dir is None:
            return
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        self.policy.save(self.checkpoint_dir / f"policy_e{self.epoch:06d}.txt")
        self.proposal.save(self.checkpoint_dir / f"proposal_e{self.epoch:06d}.txt")

    def run(self) -> TrainRecord:
        cfg = self.cfg
        t0 = time.perf_counter()
        rec = None
        for _ in range(cfg.epochs):
            self.step()
            if cfg.checkpoint_every and self.epoch % cfg.checkpoint_every == 0:
                self.checkpoint()
            if self.epoch % cfg.eval_every == 0 or self.epoch == cfg.epochs:
                rec = self.record(self.last_batch, self.last_scale)
                rec.wall_ms = (time.perf_counter() - t0) * 1e3
                self._emit(rec)
                if rec.metrics["kl_pi_a"] > cfg.kl_guard:
                    raise TrainingAborted(
                        f"catastrophic drift: KL(pi, a) = {rec.metrics['kl_pi_a']:.3g} nats exceeds {cfg.kl_guard}",
                        rec,
                    )
        return rec


def train(policy: TabularPolicy, task, cfg: TrainConfig, sink=None, checkpoint_dir=None) -> TrainRecord:
    """Train ``policy`` in place and return the final record."""
    return Trainer(policy, task, cfg, sink, checkpoint_dir).run()
