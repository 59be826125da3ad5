"""
Run configuration: one validated record holding every hyperparameter.

Files are YAML documents with one section per module. Unknown keys are
rejected at every level.
"""

from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Tuple, Union
import logging

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .utils.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

GanFlavor = Literal["hinge", "lsgan"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataConfig(_Section):
    """Synthetic paired-dataset settings."""
    train_count: int = Field(512, ge=0)
    val_count: int = Field(64, ge=0)
    test_count: int = Field(64, ge=0)
    image_size: int = 32
    channels: int = 3
    n_shapes: int = Field(3, ge=1, le=3)
    scale_range: Tuple[float, float] = (0.3, 0.9)
    position_range: Tuple[float, float] = (0.1, 0.9)
    outline_width: float = Field(1.5, gt=0)
    cue_width: int = Field(2, ge=1)
    supersample: int = Field(4, ge=1)

    def check(self) -> None:
        """Reject image sizes the networks cannot halve cleanly."""
        if self.image_size <= 0 or self.image_size % 4 != 0:
            raise ConfigurationError(
                f"image_size must be positive and divisible by 4, got {self.image_size}",
                details={"image_size": self.image_size}
            )
        if self.channels != 3:
            raise ConfigurationError("only 3-channel images are rendered", details={"channels": self.channels})
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigurationError("scale_range must lie in (0, 1]", details={"scale_range": self.scale_range})
        lo, hi = self.position_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigurationError("position_range must lie in [0, 1]", details={"position_range": self.position_range})

    def split_counts(self) -> Dict[str, int]:
        return {"train": self.train_count, "val": self.val_count, "test": self.test_count}


class ModelsConfig(_Section):
    """Generator, discriminator and encoder architecture settings."""
    style: Literal["unet", "resnet"] = "unet"
    base_width: int = Field(16, ge=1)
    depth: int = Field(3, ge=1)
    n_blocks: int = Field(4, ge=1)
    dropout_rate: float = Field(0.5, ge=0.0, lt=1.0)
    disc_depth: int = Field(3, ge=2)
    disc_base_width: int = Field(16, ge=1)
    embedding_dim: int = Field(64, ge=1)
    encoder_width: int = Field(16, ge=1)


class PretrainConfig(_Section):
    """Original GAN training (Adam (0.5, 0.999), lr 2e-4)."""
    steps: int = Field(2000, ge=0)
    batch_size: int = Field(4, ge=1)
    lr: float = Field(2e-4, gt=0)
    betas: Tuple[float, float] = (0.5, 0.999)
    lambda_l1: float = Field(100.0, ge=0)
    decay_half: bool = True
    flip: bool = False
    l1_threshold: float = Field(0.1, gt=0)
    log_every: int = Field(100, ge=1)


class EncoderConfig(_Section):
    """Contrastive encoder training."""
    steps: int = Field(1500, ge=0)
    batch_size: int = Field(64, ge=2)
    lr: float = Field(1e-3, gt=0)
    temperature: float = Field(0.1, gt=0)
    crop_padding: int = Field(4, ge=0)
    jitter: float = Field(0.2, ge=0)
    collapse_threshold: float = Field(1e-6, ge=0)
    log_every: int = Field(100, ge=1)


class ManifoldConfig(_Section):
    """Neighborhood index settings."""
    k: int = Field(5, ge=1)
    source: Literal["encoder", "oracle-factors"] = "encoder"
    similarity: Literal["signed", "absolute"] = "signed"
    oracle_bandwidth: float = Field(1.0, gt=0)


class PruningConfig(_Section):
    """Agent training (Adam (0.9, 0.999), lr 1e-3, weight decay 1e-4)."""
    lambda1: float = Field(3.0, ge=0)
    lambda2: float = Field(0.1, ge=0)
    p: float = 0.5
    tau: float = Field(1.0, gt=0)
    tau_end: Optional[float] = Field(None, gt=0)
    include_center: bool = True
    epochs: int = Field(1, ge=0)
    batch_size: int = Field(1, ge=1)
    lr: float = Field(1e-3, gt=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = Field(1e-4, ge=0)
    agent_input_dim: int = Field(128, ge=1)
    agent_hidden_dim: int = Field(256, ge=1)
    logit_init: float = -3.0
    log_every: int = Field(50, ge=1)

    def check(self) -> None:
        if not 0.0 < self.p <= 1.0:
            raise ConfigurationError(f"p must lie in (0, 1], got {self.p}", details={"p": self.p})


class AblationConfig(_Section):
    """Mechanism toggles; all on is the full method, all off is the Baseline row."""
    prune_D: bool = True
    use_agents: bool = True
    exchange_feedback: bool = True
    manifold_real_set: bool = True
    use_kd: bool = True
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])

    def check(self) -> None:
        if self.exchange_feedback and not self.use_agents:
            raise ConfigurationError("exchange_feedback requires use_agents")
        if self.exchange_feedback and not self.prune_D:
            raise ConfigurationError("exchange_feedback requires prune_D")


class FinetuneConfig(_Section):
    """Finetuning of the extracted networks (Adam (0.5, 0.999), lr 2e-4)."""
    epochs: int = Field(5, ge=0)
    batch_size: int = Field(4, ge=1)
    lr: float = Field(2e-4, gt=0)
    betas: Tuple[float, float] = (0.5, 0.999)
    lambda_l1: float = Field(100.0, ge=0)
    lambda_content: float = Field(0.05, ge=0)
    lambda_texture: float = Field(10.0, ge=0)
    flip: bool = False
    log_every: int = Field(100, ge=1)


class EvaluationConfig(_Section):
    split: Literal["train", "val", "test"] = "test"
    batch_size: int = Field(64, ge=1)


class RunConfig(_Section):
    """Every hyperparameter of a run, validated as a whole."""
    seed: int
    flavor: GanFlavor = "hinge"
    data: DataConfig = DataConfig()
    models: ModelsConfig = ModelsConfig()
    pretrain: PretrainConfig = PretrainConfig()
    encoder: EncoderConfig = EncoderConfig()
    manifold: ManifoldConfig = ManifoldConfig()
    pruning: PruningConfig = PruningConfig()
    ablation: AblationConfig = AblationConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    evaluation: EvaluationConfig = EvaluationConfig()

    @model_validator(mode="after")
    def _cross_checks(self) -> "RunConfig":
        self.data.check()
        self.pruning.check()
        self.ablation.check()
        levels = self.models.depth if self.models.style == "unet" else 2
        if self.data.image_size % (2 ** levels) != 0:
            raise ConfigurationError(
                f"image_size {self.data.image_size} is not divisible by 2**{levels}",
                details={"image_size": self.data.image_size, "levels": levels}
            )
        if self.data.image_size % (2 ** self.models.disc_depth) != 0:
            raise ConfigurationError(
                "image_size is not divisible by the discriminator stride",
                details={"image_size": self.data.image_size, "disc_depth": self.models.disc_depth}
            )
        return self

    def with_updates(self, **sections: Dict[str, Any]) -> "RunConfig":
        """Return a validated copy with section fields replaced."""
        raw = self.model_dump(mode="json")
        for name, values in sections.items():
            if isinstance(values, dict):
                raw[name] = {**raw[name], **values}
            else:
                raw[name] = values
        return build_config(raw)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def build_config(raw: Dict[str, Any]) -> RunConfig:
    """Validate a raw mapping into a RunConfig."""
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigurationError(
            f"invalid configuration: {e.error_count()} error(s)",
            details={"errors": [
                {"loc": ".".join(str(p) for p in err["loc"]), "msg": err["msg"]}
                for err in e.errors()
            ]}
        ) from e


def _section_fields() -> Dict[str, List[str]]:
    fields: Dict[str, List[str]] = {}
    for name, info in RunConfig.model_fields.items():
        annotation = info.annotation
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            for sub in annotation.model_fields:
                fields.setdefault(sub, []).append(f"{name}.{sub}")
        else:
            fields.setdefault(name, []).append(name)
    return fields


def resolve_key(key: str) -> str:
    """Map a bare or dotted override key to its dotted path."""
    fields = _section_fields()
    if "." in key:
        if key not in {p for paths in fields.values() for p in paths}:
            raise ConfigurationError(f"unknown config key: {key}", details={"key": key})
        return key
    paths = fields.get(key)
    if not paths:
        raise ConfigurationError(f"unknown config key: {key}", details={"key": key})
    if len(paths) > 1:
        raise ConfigurationError(
            f"ambiguous config key {key}; use one of {paths}",
            details={"key": key, "candidates": paths}
        )
    return paths[0]


def apply_overrides(raw: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply ``key=value`` overrides; values are parsed as YAML scalars."""
    result = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override must be key=value, got {item!r}", details={"override": item})
        key, value = item.split("=", 1)
        path = resolve_key(key.strip()).split(".")
        parsed = yaml.safe_load(value)
        node = result
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = parsed
    return result


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Iterable[str] = (),
    seed: Optional[int] = None
) -> RunConfig:
    """Load a YAML config file, apply overrides and validate."""
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path) as f:
                raw = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigurationError(f"could not read config {path}: {e}", details={"path": str(path)}) from e
        if not isinstance(raw, dict):
            raise ConfigurationError("config document must be a mapping", details={"path": str(path)})
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    if "seed" not in raw:
        raise ConfigurationError("a seed is required (set `seed:` or pass --seed)")
    cfg = build_config(raw)
    logger.debug(f"Loaded configuration from {path or '<defaults>'}")
    return cfg
