"""Experiment configuration: YAML file + dotted ``KEY=VALUE`` overrides."""

from __future__ import annotations

import copy
import re
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data import AugmentSpec
from .filters import GaussianSpec, PassMode
from .models import PRESETS, ModelConfig
from .train import TrainConfig

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "apply_overrides", "load_yaml", "TASKS"]

TASKS = ("train", "eval", "robustness", "gradcam", "retrieve", "dump-kernel", "gradcheck")


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads ``1e-3`` (no dot) as a float, as YAML 1.2 does."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def load_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key or file."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True)


class PassCfg(_Strict):
    kernel: int = 3
    sigma: float = 1.0

    @field_validator("kernel")
    @classmethod
    def _odd(cls, v):
        if v not in (1, 3, 5, 7):
            raise ValueError("kernel must be one of 1, 3, 5, 7")
        return v

    @field_validator("sigma")
    @classmethod
    def _positive(cls, v):
        if not v > 0:
            raise ValueError("sigma must be positive")
        return v


class FilterCfg(_Strict):
    low: PassCfg = Field(default_factory=PassCfg)
    high: PassCfg = Field(default_factory=PassCfg)
    trainable: bool = False
    single_path: Optional[Literal["low", "high"]] = None


class ModelCfg(_Strict):
    preset: Optional[str] = "fdresnet_tiny"
    variant: Optional[Literal["resnet", "fdresnet"]] = None
    stage_block_counts: Optional[list[int]] = None
    stage_channels: Optional[list[int]] = None
    stem_channels: Optional[int] = None
    stem_kernel: Optional[int] = None
    stem_stride: Optional[int] = None
    stem_pool: Optional[bool] = None
    bottleneck_ratio: Optional[int] = None
    num_classes: Optional[int] = None
    checkpoint: Optional[str] = None

    @field_validator("preset")
    @classmethod
    def _known(cls, v):
        if v is not None and v not in PRESETS:
            raise ValueError(f"unknown preset {v!r}; choose from {sorted(PRESETS)}")
        return v


class TrainCfg(_Strict):
    epochs: int = 20
    batch_size: int = 64
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: list[int] = Field(default_factory=lambda: [12, 17])
    lr_gamma: float = 0.1
    seed: int = 0
    precision: Literal["float32", "float64"] = "float32"
    checkpoint_every: int = 0
    decay_bn: bool = True


class DataCfg(_Strict):
    dataset: Literal["synthetic", "cifar10", "mnist"] = "synthetic"
    root: Optional[str] = None
    n_per_class: int = 500
    data_seed: int = 0
    flip_prob: float = 0.5
    normalize_mean: Optional[list[float]] = None
    normalize_std: Optional[list[float]] = None
    train_subset: Optional[int] = None
    test_subset: Optional[int] = None

    @field_validator("n_per_class")
    @classmethod
    def _enough(cls, v):
        if v < 50:
            raise ValueError("n_per_class must be >= 50")
        return v

    @field_validator("flip_prob")
    @classmethod
    def _prob(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        return v


class AnalysisCfg(_Strict):
    gradcam_tap: str = "stem.conv"
    gradcam_samples: int = 8
    retrieval_metric: Literal["cosine", "euclidean"] = "cosine"
    retrieval_top_k: int = 10
    retrieval_protocol: Literal["test-vs-test-self-excluded"] = "test-vs-test-self-excluded"
    robustness_kernels: list[int] = Field(default_factory=lambda: [3, 5, 7])
    robustness_sigma: float = 1.0
    gradcheck_tolerance: float = 1e-4


class ExperimentConfig(_Strict):
    name: str = "experiment"
    model: ModelCfg = Field(default_factory=ModelCfg)
    train: TrainCfg = Field(default_factory=TrainCfg)
    data: DataCfg = Field(default_factory=DataCfg)
    filter: FilterCfg = Field(default_factory=FilterCfg)
    analysis: AnalysisCfg = Field(default_factory=AnalysisCfg)
    tasks: list[Literal[TASKS]] = Field(default_factory=lambda: ["train", "eval"])

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.data.dataset != "synthetic":
            if not self.data.root:
                raise ValueError(f"data.root is required for dataset {self.data.dataset!r}")
            if not Path(self.data.root).exists():
                raise ValueError(f"data.root: path {self.data.root!r} does not exist")
        if self.model.checkpoint and not Path(self.model.checkpoint).is_file():
            raise ValueError(f"model.checkpoint: file {self.model.checkpoint!r} does not exist")
        if self.filter.single_path and self._variant() != "fdresnet":
            raise ValueError("filter.single_path requires an fdresnet model")
        if self.model.preset is None and self.model.variant is None:
            raise ValueError("model.variant is required when model.preset is null")
        try:
            self.to_train_config()
        except ValueError as exc:
            raise ValueError(f"train: {exc}") from None
        return self

    # -- conversion to library objects ----------------------------------------------
    def _variant(self) -> str:
        if self.model.variant:
            return self.model.variant
        return "resnet" if self.model.preset.startswith("resnet") else "fdresnet"

    def num_classes(self) -> int:
        if self.model.num_classes:
            return self.model.num_classes
        return {"synthetic": 4, "cifar10": 10, "mnist": 10}[self.data.dataset]

    def in_channels(self) -> int:
        return 1 if self.data.dataset == "mnist" else 3

    def gaussian_specs(self) -> tuple[GaussianSpec, GaussianSpec]:
        f = self.filter
        return (
            GaussianSpec(f.low.kernel, f.low.sigma, f.trainable, PassMode.LOW),
            GaussianSpec(f.high.kernel, f.high.sigma, f.trainable, PassMode.HIGH),
        )

    def to_model_config(self) -> ModelConfig:
        m = self.model
        variant = self._variant()
        low, high = self.gaussian_specs() if variant == "fdresnet" else (None, None)
        if m.preset:
            base = PRESETS[m.preset](num_classes=self.num_classes(), in_channels=self.in_channels()).to_dict()
        else:
            base = ModelConfig(num_classes=self.num_classes(), in_channels=self.in_channels(),
                               variant="resnet").to_dict()
        base.update(variant=variant, low=low, high=high,
                    single_path=self.filter.single_path if variant == "fdresnet" else None)
        for key in ("stage_block_counts", "stage_channels", "stem_channels", "stem_kernel",
                    "stem_stride", "stem_pool", "bottleneck_ratio"):
            if getattr(m, key) is not None:
                base[key] = getattr(m, key)
        return ModelConfig(**base)

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(**self.train.model_dump())

    def augment_spec(self, mean, std) -> AugmentSpec:
        return AugmentSpec(self.data.flip_prob, tuple(mean), tuple(std))


def _coerce_scalar(text: str):
    return load_yaml(text) if text.strip() else ""


def apply_overrides(raw: dict, overrides) -> dict:
    """Set dotted keys, e.g. ``filter.low.kernel=3``; unknown paths raise ConfigError."""
    out = copy.deepcopy(raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        schema = ExperimentConfig
        for i, part in enumerate(parts):
            fields = schema.model_fields if schema is not None else None
            if fields is None or part not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            ann = fields[part].annotation
            schema = ann if isinstance(ann, type) and issubclass(ann, BaseModel) else None
            if i == len(parts) - 1:
                node[part] = _coerce_scalar(value)
            else:
                node = node.setdefault(part, {})
                if not isinstance(node, dict):
                    raise ConfigError(f"config key {'.'.join(parts[:i + 1])!r} is not a section")
    return out


def _format_errors(err: ValidationError, source: str) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{source}: {loc}: {e['msg']}")
    return "\n".join(lines)


def load_config(path=None, overrides=None) -> ExperimentConfig:
    """Parse and validate a YAML config; every error names the key or file at fault."""
    raw: dict = {}
    source = "<defaults>"
    if path is not None:
        source = str(path)
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {source!r} not found")
        try:
            raw = load_yaml(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{source}: YAML parse error: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{source}: top level must be a mapping")
    raw = apply_overrides(raw, overrides)
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc, source)) from None


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)
