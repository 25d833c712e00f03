"""Experiment configuration: one JSON document validated by pydantic.

Every section rejects unknown keys.  Section fields mirror the dataclasses
the library functions take, so ``to_scenario`` and friends are plain
keyword splats.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..downstream import FineTuneConfig
from ..synthetic import DEFAULT_F_STAR, DEFAULT_F_T_STAR, Scenario
from ..transport import CriticConfig
from ..upstream import UpstreamTrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScenarioSection(_Strict):
    d: int = Field(8, ge=1)
    r: int = Field(3, ge=1)
    p: int = Field(3, ge=1)
    d_star: int = Field(2, ge=1)
    select: list[int] = [0, 1, 2]
    warps: Optional[list[float]] = None
    F_star: list[list[float]] = [list(row) for row in DEFAULT_F_STAR]
    F_T_star: list[float] = list(DEFAULT_F_T_STAR)
    A_star: Optional[list[list[float]]] = None
    q_sin: float = 1.0
    q_quad: float = 0.5
    noise_scale: float = Field(0.1, ge=0.0, le=1.0)
    task: Literal["regression", "classification"] = "regression"
    domain_probs: Optional[list[float]] = None
    domain_shift: float = 1.0


class CriticSection(_Strict):
    width: int = 16
    depth: int = 2
    norm_budget: float = 2.0
    ascent_steps: int = 5
    lr: float = 1e-2
    fixed_reference: bool = False
    rebalance: bool = True


class UpstreamSection(_Strict):
    lam: float = Field(10.0, ge=0)
    tau: float = Field(1.0, ge=0)
    mu: float = Field(0.01, ge=0)
    epochs: int = Field(100, ge=0)
    batch_size: int = Field(64, ge=8)
    width: int = 32
    depth: int = 3
    h_norm_budget: float = 100.0
    head_radius: float = 10.0
    lr_h: float = 1e-3
    lr_F: float = 0.1
    head_method: Literal["sgd", "adam"] = "sgd"
    cosine_lr: bool = True
    rebalance_h: bool = True
    critic: CriticSection = CriticSection()
    critic_batch: int = 256
    critic_schedule: Literal["batch", "epoch", "fixed"] = "batch"
    early_stop_tol: Optional[float] = None
    monitor_rows: int = 512
    train_h: bool = True


class FineTuneSection(_Strict):
    kappa: float = Field(10.0, ge=0)
    chi: Optional[float] = Field(None, ge=0)
    zeta: float = Field(0.01, ge=0)
    loss_kind: Optional[Literal["squared", "logistic"]] = None  # None follows the scenario task
    d_star: int = 2
    d_star_candidates: list[int] = [2]
    use_q: bool = True
    epochs: int = Field(200, ge=0)
    batch_size: int = 32
    lr_F: Optional[float] = None
    lr_A: float = 1e-2
    lr_q: float = 1e-2
    head_method: Literal["sgd", "adam"] = "sgd"
    q_width: int = 32
    q_depth: int = 2
    q_norm_budget: float = 100.0
    radius: float = 10.0
    cosine_lr: bool = True
    train_head: bool = True
    train_A: bool = True
    A_init: Literal["orthonormal", "identity"] = "orthonormal"


class BaselineToggles(_Strict):
    erm_d: bool = True
    tir: bool = True
    wi: bool = True
    erm_ud: bool = True

    def enabled(self) -> list[str]:
        return [name for name, on in self.model_dump().items() if on]


class RegimeOverride(_Strict):
    use_q: Optional[bool] = None
    d_star: Optional[int] = None


class ExperimentConfig(_Strict):
    name: str = "experiment"
    scenario: ScenarioSection = ScenarioSection()
    upstream: UpstreamSection = UpstreamSection()
    finetune: FineTuneSection = FineTuneSection()
    baselines: BaselineToggles = BaselineToggles()
    n: int = Field(4000, ge=2)
    m: int = Field(200, ge=10)
    regimes: list[Literal["complete", "partial", "none"]] = ["complete", "partial", "none"]
    # With Q* = 0 the auxiliary branch has nothing to learn; the head alone is the estimator.
    regime_overrides: dict[str, RegimeOverride] = {"complete": RegimeOverride(use_q=False)}
    select_dstar: bool = False
    val_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    test_rows: int = Field(2000, ge=1)
    n_mc: int = Field(5000, ge=1000)
    support_threshold: float = Field(0.05, gt=0.0)
    representation: Literal["trained", "oracle"] = "trained"
    m_sweep: list[int] = [64, 128, 256, 512, 1024, 2048]
    seeds: list[int] = [0]
    output_dir: str = "runs"

    @field_validator("regime_overrides")
    @classmethod
    def _known_regimes(cls, v):
        bad = set(v) - {"complete", "partial", "none"}
        if bad:
            raise ValueError(f"unknown regimes in overrides: {sorted(bad)}")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        sc = self.scenario
        if len(self.seeds) == 0:
            raise ValueError("seeds must not be empty")
        if self.finetune.kappa > 0 and self.finetune.batch_size < 8:
            raise ValueError("finetune.batch_size must be >= 8 when kappa > 0")
        if len(sc.select) != sc.r:
            raise ValueError("scenario.select must list r coordinates")
        return self


def to_scenario(cfg: ExperimentConfig, regime: str = "partial") -> Scenario:
    kw = cfg.scenario.model_dump()
    for key in ("select", "warps", "domain_probs"):
        if kw[key] is not None:
            kw[key] = tuple(kw[key])
    if kw["A_star"] is None:
        kw.pop("A_star")
    return Scenario(regime=regime, **kw)


def to_upstream(cfg: ExperimentConfig, seed: int, **changes) -> UpstreamTrainConfig:
    kw = cfg.upstream.model_dump()
    kw["critic"] = CriticConfig(**kw["critic"])
    kw.update(changes)
    return UpstreamTrainConfig(seed=seed, **kw)


def to_finetune(cfg: ExperimentConfig, seed: int, regime: str | None = None, **changes) -> FineTuneConfig:
    kw = cfg.finetune.model_dump()
    if kw["loss_kind"] is None:
        kw["loss_kind"] = "logistic" if cfg.scenario.task == "classification" else "squared"
    kw["d_star_candidates"] = tuple(kw["d_star_candidates"])
    if regime is not None and regime in cfg.regime_overrides:
        kw.update({k: v for k, v in cfg.regime_overrides[regime].model_dump().items() if v is not None})
    kw.update(changes)
    return FineTuneConfig(seed=seed, **kw)


def _set_path(doc: dict, dotted: str, value):
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the JSON file at ``path``, then dotted-key ``overrides``."""
    doc = {}
    if path is not None:
        doc = json.loads(Path(path).read_text())
        if not isinstance(doc, dict):
            raise ValueError("config document must be a JSON object")
    for key, value in (overrides or {}).items():
        _set_path(doc, key, value)
    return ExperimentConfig.model_validate(doc)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def config_schema() -> dict:
    return ExperimentConfig.model_json_schema()
