"""Experiment configuration: YAML in, validated pydantic models out.

The top-level :class:`ExperimentConfig` is the single input to every
entrypoint (service and CLI alike).  All fields have defaults, so ``{}``
is a valid desk-scale experiment.  Unknown keys are rejected -- a typo'd
field name is a config error, not a silent default.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .kernels import ShapeError
from .scheduler import CostModel
from .vit import ModelConfig


class ConfigError(ValueError):
    """Malformed or invalid experiment configuration.

    A ValueError so that pydantic validators surface it as a field-level
    validation failure (and FastAPI as a 422) rather than a server error.
    """


class ModelSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_h: int = Field(default=32, ge=1)
    image_w: int = Field(default=32, ge=1)
    channels: int = Field(default=3, ge=1)
    patch_size: int = Field(default=8, ge=1)
    hidden_dim: int = Field(default=64, ge=1)
    num_blocks: int = Field(default=4, ge=1)
    num_heads: int = Field(default=2, ge=1)
    mlp_ratio: float = Field(default=4.0, gt=0)
    moe_every: int = Field(default=2, ge=0)
    expert_count: int = Field(default=16, ge=1)
    top_k: int = Field(default=4, ge=1)
    expert_hidden: int | None = Field(default=None, ge=1)
    n_tasks: int = Field(default=2, ge=1)
    routing_kind: Literal["single", "multi_gate", "task_conditioned"] = "single"

    def to_model_config(self) -> ModelConfig:
        try:
            return ModelConfig(**self.model_dump())
        except ShapeError as exc:
            raise ConfigError(f"model: {exc}") from exc


class CostSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    bytes_per_weight: float = Field(default=4.0, gt=0)
    expert_weight_bytes: int | None = Field(default=None, ge=1)
    dram_bandwidth_bytes_per_s: float = Field(default=2.0e9, gt=0)
    mac_throughput_per_s: float = Field(default=2.0e10, gt=0)
    base_onchip_bytes: int = Field(default=262_144, ge=0)
    chip_capacity_bytes: int = Field(default=1_048_576, ge=1)
    power_w: float = Field(default=10.0, gt=0)
    cache_capacity_experts: int = Field(default=4, ge=1)


class SyntheticRoutingSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    distribution: Literal["uniform", "skewed"] = "uniform"
    alpha: float = Field(default=1.0, ge=0)


class WorkloadSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_frames: int = Field(default=1, ge=1)
    seed: int = 0
    task_sequence: Literal["round_robin"] | list[int] = "round_robin"
    synthetic_routing: SyntheticRoutingSpec | None = None


class OutputSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    report_path: str = "report.json"
    trace_path: str = "trace.csv"


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: ModelSpec = Field(default_factory=ModelSpec)
    cost: CostSpec = Field(default_factory=CostSpec)
    workload: WorkloadSpec = Field(default_factory=WorkloadSpec)
    strategies: list[Literal["naive", "cached", "reordered"]] = Field(
        default_factory=lambda: ["naive", "cached", "reordered"]
    )
    output: OutputSpec = Field(default_factory=OutputSpec)

    @model_validator(mode="after")
    def _cross_checks(self) -> "ExperimentConfig":
        if not self.strategies:
            raise ValueError("strategies: at least one strategy is required")
        if len(set(self.strategies)) != len(self.strategies):
            raise ValueError("strategies: duplicates are not allowed")
        model_cfg = self.model.to_model_config()  # surfaces shape errors here
        self.to_cost_model()
        if isinstance(self.workload.task_sequence, list):
            if not self.workload.task_sequence:
                raise ValueError("workload.task_sequence: list form must be non-empty")
            bad = [t for t in self.workload.task_sequence if not 0 <= t < model_cfg.n_tasks]
            if bad:
                raise ValueError(
                    f"workload.task_sequence: task ids {bad} out of range for "
                    f"n_tasks={model_cfg.n_tasks}"
                )
        return self

    def to_model_config(self) -> ModelConfig:
        return self.model.to_model_config()

    def expert_weight_bytes(self) -> int:
        if self.cost.expert_weight_bytes is not None:
            return self.cost.expert_weight_bytes
        m = self.to_model_config()
        c, he = m.hidden_dim, m.expert_hidden_resolved
        n_params = 2 * c * he + he + c
        return int(round(n_params * self.cost.bytes_per_weight))

    def to_cost_model(self) -> CostModel:
        m = self.to_model_config()
        try:
            return CostModel(
                expert_weight_bytes=self.expert_weight_bytes(),
                dram_bandwidth=self.cost.dram_bandwidth_bytes_per_s,
                mac_throughput=self.cost.mac_throughput_per_s,
                base_onchip_bytes=self.cost.base_onchip_bytes,
                chip_capacity=self.cost.chip_capacity_bytes,
                power=self.cost.power_w,
                expert_macs_per_token=2 * m.hidden_dim * m.expert_hidden_resolved,
                cache_capacity_experts=self.cost.cache_capacity_experts,
            )
        except ShapeError as exc:
            raise ConfigError(f"cost: {exc}") from exc

    def task_for_frame(self, frame: int) -> int:
        seq = self.workload.task_sequence
        if seq == "round_robin":
            return frame % self.model.n_tasks
        return seq[frame % len(seq)]


def _format_validation_error(exc: ValidationError) -> str:
    first = exc.errors()[0]
    loc = ".".join(str(p) for p in first["loc"]) or "<root>"
    return f"{loc}: {first['msg']}"


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a YAML experiment config.

    Raises ``OSError`` if the file cannot be read and :class:`ConfigError`
    for malformed YAML or failed validation, with the offending location.
    """
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1}, column {mark.column + 1})" if mark else ""
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"malformed YAML{where}: {problem}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level of the config must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation_error(exc)) from exc


def apply_overrides(
    config: ExperimentConfig,
    seed: int | None = None,
    strategies: list[str] | None = None,
) -> ExperimentConfig:
    """Return a copy of ``config`` with CLI-level overrides applied."""
    data = config.model_dump()
    if seed is not None:
        data["workload"]["seed"] = seed
    if strategies is not None:
        data["strategies"] = strategies
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation_error(exc)) from exc


def config_json_schema() -> dict:
    """JSON schema of the experiment config, for docs and editor tooling."""
    return ExperimentConfig.model_json_schema()
