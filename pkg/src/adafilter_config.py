"""
Configuration models and loading for AdaFilter experiments.

Every entry point (CLI, MCP server, bin/ scripts) reads an ExperimentConfig
from YAML. Models are pydantic so a run directory can store the exact,
fully resolved configuration that produced it.

This module must not import numpy: apply_thread_limit() has to run before
the numerical stack loads.
"""

import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Annotated, Any, Literal, Optional, Union

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from adafilter_errors import ConfigError

logger = logging.getLogger(__name__)

# ============================================================================
# Constants
# ============================================================================

CONFIG_SEARCH_PATHS = ["./adafilter.yaml", "/etc/adafilter/experiment.yaml"]
THREAD_ENV_VARS = ["OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"]
LOG_FORMAT = '%(levelname)s:     %(message)s'

StrategyName = Literal["adafilter", "standard_finetune", "finetune_half", "random_policy", "l2sp"]
GATED_STRATEGIES = ("adafilter", "random_policy")

# ============================================================================
# Environment and logging
# ============================================================================

_dotenv_loaded = False


def load_environment() -> None:
    """Load a .env file once (values already in the environment win)."""
    global _dotenv_loaded
    if not _dotenv_loaded:
        load_dotenv(override=False)
        _dotenv_loaded = True


def apply_thread_limit() -> Optional[int]:
    """Cap BLAS/OpenMP threads from ADAFILTER_THREADS. Call before numpy is imported."""
    load_environment()
    value = os.getenv("ADAFILTER_THREADS")
    if not value:
        return None
    try:
        threads = int(value)
    except ValueError:
        raise ConfigError(f"ADAFILTER_THREADS must be an integer, got {value!r}", ["ADAFILTER_THREADS: not an integer"])
    if threads < 1:
        raise ConfigError("ADAFILTER_THREADS must be >= 1", ["ADAFILTER_THREADS: must be >= 1"])
    for var in THREAD_ENV_VARS:
        os.environ.setdefault(var, str(threads))
    return threads


def configure_logging(level: Optional[str] = None) -> None:
    """Root logging setup shared by every entry point."""
    load_environment()
    resolved = (level or os.getenv("ADAFILTER_LOG_LEVEL") or "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, resolved, logging.INFO),
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler(sys.stderr)],
        force=True,
    )
    logging.getLogger("uvicorn.access").setLevel(logging.WARNING)


# ============================================================================
# Backbone descriptors
# ============================================================================

class ConvDescriptor(BaseModel):
    """Convolution without bias; must be followed by a bn descriptor."""
    kind: Literal["conv"]
    out_channels: int = Field(..., ge=1, description="Number of output channels (filters).")
    stride: int = Field(1, ge=1)
    kernel_size: Optional[int] = Field(None, ge=1, description="Defaults to the backbone-wide kernel_size.")


class BNDescriptor(BaseModel):
    kind: Literal["bn"]


class ReluDescriptor(BaseModel):
    kind: Literal["relu"]


class MaxPoolDescriptor(BaseModel):
    kind: Literal["max_pool"]
    kernel: int = Field(2, ge=1)
    stride: Optional[int] = Field(None, ge=1)


class ResidualBlockDescriptor(BaseModel):
    """Two conv+BN units with a skip connection; a 1x1 projection is inserted when shapes differ."""
    kind: Literal["residual_block"]
    out_channels: int = Field(..., ge=1)
    stride: int = Field(1, ge=1)


class GlobalAvgPoolDescriptor(BaseModel):
    kind: Literal["global_avg_pool"]


class FCDescriptor(BaseModel):
    """Final classifier; width comes from BackboneSpec.num_classes."""
    kind: Literal["fc"]


LayerDescriptor = Annotated[
    Union[ConvDescriptor, BNDescriptor, ReluDescriptor, MaxPoolDescriptor,
          ResidualBlockDescriptor, GlobalAvgPoolDescriptor, FCDescriptor],
    Field(discriminator="kind"),
]


def default_desk_layers() -> list[dict[str, Any]]:
    """Stem conv + 4 residual blocks (16, 16, 32, 32) + pooling + classifier: 9 main convs."""
    return [
        {"kind": "conv", "out_channels": 16},
        {"kind": "bn"},
        {"kind": "relu"},
        {"kind": "residual_block", "out_channels": 16, "stride": 1},
        {"kind": "residual_block", "out_channels": 16, "stride": 1},
        {"kind": "residual_block", "out_channels": 32, "stride": 2},
        {"kind": "residual_block", "out_channels": 32, "stride": 1},
        {"kind": "global_avg_pool"},
        {"kind": "fc"},
    ]


class BackboneSpec(BaseModel):
    """Ordered layer descriptors for the (pre-trained) convolutional backbone."""
    in_channels: int = Field(3, ge=1, description="Image channels.")
    image_size: int = Field(16, ge=2, description="Square input height/width.")
    kernel_size: int = Field(3, ge=1, description="Kernel size of main convolutions (odd, 'same' padding).")
    num_classes: int = Field(10, ge=1, description="Width of the final fc layer.")
    layers: list[LayerDescriptor] = Field(default_factory=default_desk_layers)

    @field_validator("kernel_size")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("kernel_size must be odd so padding k//2 preserves size")
        return value

    def layout_problems(self) -> list[str]:
        """Structural problems, each naming the offending descriptor. Empty means valid."""
        problems: list[str] = []
        layers = self.layers
        size = self.image_size
        pooled = False
        if not layers:
            return ["layers: at least one descriptor is required"]
        fc_positions = [i for i, d in enumerate(layers) if d.kind == "fc"]
        if len(fc_positions) != 1 or fc_positions[0] != len(layers) - 1:
            problems.append(f"layers: exactly one fc descriptor is required and it must be last (found at {fc_positions})")
        for i, desc in enumerate(layers):
            label = f"layers[{i}] {desc.model_dump()}"
            if desc.kind == "conv":
                nxt = layers[i + 1] if i + 1 < len(layers) else None
                if nxt is None or nxt.kind != "bn":
                    problems.append(f"{label}: conv must be followed by bn")
                k = desc.kernel_size or self.kernel_size
                if k % 2 == 0:
                    problems.append(f"{label}: kernel_size must be odd")
            elif desc.kind == "bn":
                if i == 0 or layers[i - 1].kind != "conv":
                    problems.append(f"{label}: bn must directly follow a conv")
            elif desc.kind == "global_avg_pool":
                if pooled:
                    problems.append(f"{label}: global_avg_pool appears twice")
                pooled = True
            elif desc.kind == "fc":
                if not pooled:
                    problems.append(f"{label}: fc requires a preceding global_avg_pool")
            if pooled and desc.kind in ("conv", "bn", "max_pool", "residual_block"):
                problems.append(f"{label}: spatial layer after global_avg_pool")
            stride = getattr(desc, "stride", None)
            if desc.kind == "max_pool":
                stride = desc.stride or desc.kernel
                size = (size - desc.kernel) // stride + 1
            elif desc.kind in ("conv", "residual_block"):
                size = (size - 1) // stride + 1
            if size < 1:
                problems.append(f"{label}: spatial size drops below 1")
                break
        if not any(d.kind in ("conv", "residual_block") for d in layers):
            problems.append("layers: at least one conv or residual_block is required")
        if layers[0].kind not in ("conv",):
            problems.append(f"layers[0] {layers[0].model_dump()}: the first layer must be a conv stem")
        return problems

    @model_validator(mode="after")
    def _check_layout(self) -> "BackboneSpec":
        problems = self.layout_problems()
        if problems:
            raise ValueError("; ".join(problems))
        return self


# ============================================================================
# Experiment settings
# ============================================================================

class TaskPairSettings(BaseModel):
    """Source/target transfer pair: synthetic by default, or paths to ingested datasets."""
    data_dir: str = Field("data", description="Where materialized task pairs are stored.")
    seed: int = Field(0, ge=0, description="Generator seed; fully determines both tasks.")
    num_classes: int = Field(10, ge=1, description="Classes per task (K).")
    image_size: int = Field(16, ge=8, le=64)
    channels: int = Field(3, ge=1, le=3)
    overlap: float = Field(0.6, ge=0.0, le=1.0, description="Fraction of target classes sharing a source class generator.")
    hue_shift: float = Field(0.0, ge=-1.0, le=1.0, description="Target hue rotation as a fraction of a full turn.")
    warp_strength: float = Field(0.0, ge=0.0, le=4.0, description="Target elastic warp amplitude in pixels.")
    noise: float = Field(0.05, ge=0.0, le=1.0, description="Per-pixel Gaussian noise std.")
    source_train_per_class: int = Field(60, ge=1)
    source_eval_per_class: int = Field(20, ge=1)
    target_train_per_class: int = Field(20, ge=1)
    target_eval_per_class: int = Field(20, ge=1)
    source_path: Optional[str] = Field(None, description="Use an existing dataset directory as the source task.")
    target_path: Optional[str] = Field(None, description="Use an existing dataset directory as the target task.")


class StrategySpec(BaseModel):
    """Exactly one fine-tuning strategy per run."""
    name: StrategyName
    l2sp_alpha: float = Field(0.01, ge=0.0, description="Weight of the anchor term (L2-SP only).")
    l2sp_beta: float = Field(0.01, ge=0.0, description="Weight decay on the new head (L2-SP only).")

    @property
    def gated(self) -> bool:
        return self.name in GATED_STRATEGIES


class OptimizerSettings(BaseModel):
    """SGD with momentum and step decay."""
    lr: float = Field(0.01, gt=0.0, description="Backbone learning rate.")
    gate_lr: float = Field(0.1, gt=0.0, description="Gate network learning rate.")
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(30, ge=0)
    decay_epochs: list[int] = Field(default_factory=lambda: [15, 22, 27])
    decay_factor: float = Field(10.0, ge=1.0)

    @field_validator("decay_epochs")
    @classmethod
    def _sorted_positive(cls, value: list[int]) -> list[int]:
        if any(e < 1 for e in value):
            raise ValueError("decay epochs must be >= 1")
        return sorted(value)


class PretrainSettings(BaseModel):
    """Source-task training that produces the pre-trained checkpoint."""
    epochs: int = Field(8, ge=0)
    lr: float = Field(0.05, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    batch_size: int = Field(32, ge=1)
    decay_epochs: list[int] = Field(default_factory=lambda: [5, 7])
    decay_factor: float = Field(10.0, ge=1.0)
    checkpoint: Optional[str] = Field(None, description="Use this checkpoint instead of pre-training.")


class GateSettings(BaseModel):
    embedding_size: int = Field(64, ge=1)
    hidden_size: int = Field(64, ge=1)
    binarizer: Literal["ste", "stop_gradient"] = Field(
        "ste", description="'stop_gradient' is an ablation: gate parameters receive no gradient."
    )


class AugmentSettings(BaseModel):
    flip: bool = False
    crop_padding: int = Field(0, ge=0, le=8)


class CompareSettings(BaseModel):
    strategies: list[StrategySpec] = Field(
        default_factory=lambda: [StrategySpec(name="standard_finetune"), StrategySpec(name="adafilter")]
    )
    seeds: list[int] = Field(default_factory=lambda: [0])
    bn_modes: list[Literal["gated", "standard"]] = Field(
        default_factory=list,
        description="Run every gated strategy once per BN mode, labelled <strategy>-<bn_mode>. "
                    "Empty: every run uses the top-level bn_mode.",
    )

    @field_validator("strategies", mode="before")
    @classmethod
    def _names_to_specs(cls, value: Any) -> Any:
        if isinstance(value, list):
            return [{"name": v} if isinstance(v, str) else v for v in value]
        return value

    @field_validator("bn_modes")
    @classmethod
    def _distinct_modes(cls, value: list[str]) -> list[str]:
        if len(set(value)) != len(value):
            raise ValueError(f"BN modes must be distinct, got {value}")
        return value

    def variants(self, default_bn_mode: str) -> list[tuple[str, StrategySpec, str]]:
        """(label, strategy, bn_mode) per compared arm; non-gated strategies run once."""
        arms = []
        for strategy in self.strategies:
            if self.bn_modes and strategy.gated:
                arms.extend((f"{strategy.name}-{mode}", strategy, mode) for mode in self.bn_modes)
            else:
                arms.append((strategy.name, strategy, default_bn_mode))
        return arms


class ExperimentConfig(BaseModel):
    """Declarative description of one transfer run (or a comparison of several)."""
    model_config = ConfigDict(extra="forbid")

    name: str = Field("adafilter-desk", pattern=r"^[A-Za-z0-9_.-]+$")
    seed: int = Field(0, ge=0, description="Seed for model init, batch order and random policies.")
    output_dir: str = Field("runs", description="Run directories are created below this path.")
    task: TaskPairSettings = Field(default_factory=TaskPairSettings)
    strategy: Optional[StrategySpec] = Field(
        None, description="Required for a single run; compare runs take theirs from compare.strategies."
    )
    backbone: BackboneSpec = Field(default_factory=BackboneSpec)
    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    pretrain: PretrainSettings = Field(default_factory=PretrainSettings)
    gate: GateSettings = Field(default_factory=GateSettings)
    augment: AugmentSettings = Field(default_factory=AugmentSettings)
    compare: CompareSettings = Field(default_factory=CompareSettings)
    bn_mode: Literal["gated", "standard"] = "gated"
    bn_statistics: Literal["full_batch", "masked"] = Field(
        "full_batch", description="'masked' (experimental) gives each BN statistics over its own selected positions."
    )
    precision: Literal["float32", "float64"] = "float32"
    dump_policies: bool = False
    prefetch: bool = False

    @field_validator("strategy", mode="before")
    @classmethod
    def _strategy_shorthand(cls, value: Any) -> Any:
        return {"name": value} if isinstance(value, str) else value

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentConfig":
        if self.backbone.in_channels != self.task.channels:
            raise ValueError(
                f"backbone.in_channels ({self.backbone.in_channels}) must equal task.channels ({self.task.channels})"
            )
        if self.backbone.image_size != self.task.image_size:
            raise ValueError(
                f"backbone.image_size ({self.backbone.image_size}) must equal task.image_size ({self.task.image_size})"
            )
        return self

    def require_strategy(self) -> StrategySpec:
        if self.strategy is None:
            raise ConfigError("Invalid experiment configuration:\n  strategy: Field required",
                              ["strategy: Field required"])
        return self.strategy


# ============================================================================
# Loading and persistence
# ============================================================================

def format_validation_errors(error: ValidationError) -> list[str]:
    """One 'field.path: message' line per pydantic error."""
    lines = []
    for item in error.errors():
        path = ".".join(str(part) for part in item.get("loc", ())) or "<root>"
        lines.append(f"{path}: {item.get('msg', 'invalid value')}")
    return lines


def find_config_file(config_path: Optional[str] = None) -> Optional[Path]:
    """Explicit path, then $ADAFILTER_CONFIG, then the standard search paths."""
    load_environment()
    candidates = []
    if config_path:
        candidates.append(config_path)
    elif os.getenv("ADAFILTER_CONFIG"):
        candidates.append(os.environ["ADAFILTER_CONFIG"])
    candidates.extend(CONFIG_SEARCH_PATHS if not config_path else [])
    for candidate in candidates:
        path = Path(candidate)
        if path.is_file():
            return path
    if config_path:
        raise ConfigError(f"Config file not found: {config_path}", [f"config: {config_path} does not exist"])
    return None


def _set_override(data: dict[str, Any], dotted: str, value: Any) -> None:
    node = data
    parts = dotted.split(".")
    for part in parts[:-1]:
        # "strategy: l2sp" shorthand
        if isinstance(node.get(part), str):
            node[part] = {"name": node[part]}
        elif node.get(part) is None:
            node[part] = {}
        node = node[part]
        if not isinstance(node, dict):
            raise ConfigError(f"Cannot override {dotted}: {part} is not a mapping", [f"{dotted}: not a mapping"])
    node[parts[-1]] = value


def parse_experiment_config(raw: dict[str, Any], overrides: Optional[dict[str, Any]] = None) -> ExperimentConfig:
    data = dict(raw or {})
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_override(data, dotted, value)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        fields = format_validation_errors(e)
        raise ConfigError("Invalid experiment configuration:\n  " + "\n  ".join(fields), fields) from e


def load_experiment_config(config_path: Optional[str] = None,
                           overrides: Optional[dict[str, Any]] = None) -> ExperimentConfig:
    """
    Load and validate an ExperimentConfig from YAML.

    overrides maps dotted field paths (e.g. "strategy.name", "seed") to values
    and is applied before validation; None values are ignored.
    """
    path = find_config_file(config_path)
    if path is None:
        raise ConfigError(
            "No experiment config found. Pass --config, set ADAFILTER_CONFIG, or create ./adafilter.yaml",
            ["config: no file found"],
        )
    logger.info(f"Loading experiment config from: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file {path} is not valid YAML: {e}", [f"config: invalid YAML ({e})"]) from e
    if not isinstance(raw, dict):
        raise ConfigError(f"Config file {path} must contain a mapping", ["<root>: expected a mapping"])
    return parse_experiment_config(raw, overrides)


def config_to_dict(config: BaseModel) -> dict[str, Any]:
    return config.model_dump(mode="json")


def dump_resolved_config(config: ExperimentConfig, path: Path) -> None:
    """Write the fully resolved config as YAML (the run directory's reproducibility record)."""
    path.write_text(yaml.dump(config_to_dict(config), default_flow_style=False, sort_keys=False))


def load_resolved_config(path: Path) -> ExperimentConfig:
    return parse_experiment_config(yaml.safe_load(path.read_text()) or {})


def stable_hash(*models: Union[BaseModel, dict, list, str, int, float]) -> str:
    """Short content hash of configuration pieces, used for cache keys."""
    payload = [m.model_dump(mode="json") if isinstance(m, BaseModel) else m for m in models]
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
    return digest[:12]
