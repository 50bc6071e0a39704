"""Task descriptions, the toy task catalog, and resolution into EBM + reward objects."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from dpglab.ebm import EbmSpec, MomentTargets
from dpglab.estimators import RewardSpec
from dpglab.features import Feature, all_of, parse_feature
from dpglab.policy import TabularPolicy
from dpglab.seqspace import VocabSpec


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BaseSpec(_Strict):
    """How to build the pretrained model a.

    ``bias`` (length V) is added to every row of logits, which lets a uniform
    or random base make some tokens rare.
    """

    kind: Literal["uniform", "randomized", "checkpoint"] = "uniform"
    seed: int = 0
    scale: float = 1.0
    path: str | None = None
    bias: list[float] | None = None

    def build(self, space: VocabSpec) -> TabularPolicy:
        if self.kind == "uniform":
            pol = TabularPolicy.uniform(space)
        elif self.kind == "randomized":
            pol = TabularPolicy.randomized(space, self.seed, self.scale)
        else:
            if not self.path:
                raise ValueError("checkpoint base needs a path")
            pol = TabularPolicy.load(self.path)
            if pol.space != space:
                raise ValueError(f"checkpoint {self.path} has space {pol.space}, task expects {space}")
        if self.bias is not None:
            if len(self.bias) != space.vocab_size:
                raise ValueError(f"bias needs {space.vocab_size} entries")
            pol.logits += np.asarray(self.bias)
        return pol


class EbmConfig(_Strict):
    features: list[str] = Field(default_factory=list)
    lambdas: list[float] | None = None
    filter: str | None = None
    targets: list[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def _lengths(self):
        if len(self.targets) != len(self.features):
            raise ValueError(f"{len(self.features)} features but {len(self.targets)} targets")
        if self.lambdas is not None and len(self.lambdas) != len(self.features):
            raise ValueError(f"{len(self.features)} features but {len(self.lambdas)} lambdas")
        return self


class TaskConfig(_Strict):
    name: str
    vocab_size: int = Field(ge=2)
    seq_len: int = Field(ge=1)
    base: BaseSpec = Field(default_factory=BaseSpec)
    ebm: EbmConfig = Field(default_factory=EbmConfig)
    category: Literal["pointwise", "distributional", "hybrid"]

    @model_validator(mode="after")
    def _category(self):
        t = self.ebm.targets
        if self.category == "pointwise" and (self.ebm.filter is None or self.ebm.features):
            raise ValueError(f"task {self.name}: pointwise tasks express constraints as a filter only")
        if self.category == "distributional" and (not t or not all(0 < m < 1 for m in t)):
            raise ValueError(f"task {self.name}: distributional targets must satisfy 0 < mu < 1")
        if self.category == "hybrid" and (self.ebm.filter is None or not t):
            raise ValueError(f"task {self.name}: hybrid tasks need a filter and distributional targets")
        return self

    @property
    def space(self) -> VocabSpec:
        return VocabSpec(self.vocab_size, self.seq_len)


@dataclass
class Task:
    name: str
    category: str
    ebm: EbmSpec
    targets: MomentTargets
    reward: RewardSpec | None
    config: TaskConfig

    @property
    def space(self) -> VocabSpec:
        return self.ebm.space

    def constraints(self) -> list[tuple[str, Feature]]:
        """(identifier, feature) for every monitored constraint, filter first."""
        out = []
        if self.ebm.filter is not None:
            out.append((self.ebm.filter.identifier, self.ebm.filter))
        out += [(f.identifier, f) for f in self.ebm.features]
        return out

    @property
    def lambdas_fitted(self) -> bool:
        return self.config.ebm.lambdas is not None or not self.ebm.features


def build_task(cfg: TaskConfig) -> Task:
    space = cfg.space
    base = cfg.base.build(space)
    feats = [parse_feature(s, space) for s in cfg.ebm.features]
    filt = parse_feature(cfg.ebm.filter, space) if cfg.ebm.filter else None
    ebm = EbmSpec(base, feats, cfg.ebm.lambdas, filt)
    targets = MomentTargets(cfg.ebm.targets)
    targets.validate(ebm)
    # Reward maximization is only defined on the pointwise part: R(x) = 1 iff the filter passes.
    reward = RewardSpec.feature_indicator(filt) if filt is not None else None
    return Task(cfg.name, cfg.category, ebm, targets, reward, cfg)


def _bias_for_contains_rate(token: int, V: int, L: int, rate: float) -> list[float]:
    """Per-row logit bias making ``contains:token`` have probability ``rate`` under an otherwise uniform base."""
    p = 1.0 - (1.0 - rate) ** (1.0 / L)
    bias = [0.0] * V
    bias[token] = math.log((V - 1) * p / (1.0 - p))
    return bias


def _bias_for_prefix_rate(token: int, V: int, k: int, rate: float) -> list[float]:
    p = rate ** (1.0 / k)
    bias = [0.0] * V
    bias[token] = math.log((V - 1) * p / (1.0 - p))
    return bias


_SHARED_BASE = BaseSpec(kind="randomized", seed=1, scale=0.5, bias=[0.0, 0.0, -1.5, -1.5])

CATALOG: dict[str, TaskConfig] = {
    t.name: t
    for t in [
        # single rare-ish token, base rate 0.14
        TaskConfig(name="task1", vocab_size=4, seq_len=4, category="pointwise",
                   base=BaseSpec(bias=_bias_for_contains_rate(3, 4, 4, 0.14)),
                   ebm=EbmConfig(filter="contains:3")),
        # rare "word": a fixed 5-token opening, base rate 4e-4
        TaskConfig(name="task2", vocab_size=4, seq_len=6, category="pointwise",
                   base=BaseSpec(bias=_bias_for_prefix_rate(0, 4, 5, 4e-4)),
                   ebm=EbmConfig(filter="prefix:0,0,0,0,0")),
        # word lists
        TaskConfig(name="task3", vocab_size=4, seq_len=6, category="pointwise", base=_SHARED_BASE,
                   ebm=EbmConfig(filter="or[atleast:2:2,atleast:3:2]")),
        TaskConfig(name="task4", vocab_size=4, seq_len=6, category="pointwise", base=_SHARED_BASE,
                   ebm=EbmConfig(filter="or[prefix:3,and[contains:2,contains:3]]")),
        # synthetic stand-ins for sentiment classifiers
        TaskConfig(name="task5", vocab_size=4, seq_len=6, category="pointwise", base=_SHARED_BASE,
                   ebm=EbmConfig(filter="parity:2")),
        TaskConfig(name="task6", vocab_size=4, seq_len=6, category="pointwise", base=_SHARED_BASE,
                   ebm=EbmConfig(filter="not[parity:2]")),
        # one distributional constraint, base rate 0.25, target 0.5
        TaskConfig(name="task7", vocab_size=4, seq_len=8, category="distributional",
                   base=BaseSpec(bias=_bias_for_contains_rate(1, 4, 8, 0.25)),
                   ebm=EbmConfig(features=["contains:1"], targets=[0.5])),
        # four "topics" at 0.25 each
        TaskConfig(name="task8", vocab_size=4, seq_len=8, category="distributional",
                   ebm=EbmConfig(features=["atleast:0:3", "atleast:1:3", "atleast:2:3", "atleast:3:3"],
                                 targets=[0.25, 0.25, 0.25, 0.25])),
        # hybrid: distributional + pointwise
        TaskConfig(name="task9", vocab_size=4, seq_len=8, category="hybrid",
                   ebm=EbmConfig(features=["atleast:1:3"], targets=[0.5], filter="contains:3")),
        TaskConfig(name="task10", vocab_size=4, seq_len=8, category="hybrid",
                   ebm=EbmConfig(features=["atleast:1:3"], targets=[0.5], filter="or[prefix:2,prefix:3,3]")),
    ]
}


# Optimizer settings under which both gdc and gdcpp reduce KL(p, pi) on each task.
# Adam at lr 0.05 drifts on the L=8 tasks: rarely visited prefix rows get full-size
# steps from pure noise, so those tasks use plain SGD.
RECOMMENDED_TRAIN: dict[str, dict] = {
    **{f"task{i}": {"optimizer": "adam", "lr": 0.05} for i in range(1, 7)},
    **{f"task{i}": {"optimizer": "sgd", "lr": 1.0} for i in range(7, 11)},
}


def catalog_task(name: str) -> TaskConfig:
    try:
        return CATALOG[name].model_copy(deep=True)
    except KeyError:
        raise KeyError(f"unknown task {name!r}; catalog has {sorted(CATALOG)}") from None
