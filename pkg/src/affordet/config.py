"""Configuration dataclasses and the ``key = value`` run-config file format.

A run config has four sections, ``[model]``, ``[train]``, ``[adapter]`` and
``[data]``; each key maps to one dataclass field below.  Unknown sections or
keys raise :class:`ConfigError`.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import typing
from dataclasses import dataclass, field, fields

DEFAULT_OBJECTS = ("hammer", "cup", "knife", "bowl", "scissors")
DEFAULT_AFFORDANCES = ("grasp", "pound", "cut", "contain", "wrap-grasp")


class ConfigError(ValueError):
    """Invalid configuration value or unknown key."""


@dataclass
class BackboneConfig:
    input_size: int = 256
    stem_channels: int = 16
    stage_channels: tuple[int, int, int] = (32, 64, 128)
    blocks_per_stage: tuple[int, int, int] = (1, 1, 1)

    def validate(self) -> None:
        if self.input_size % 32:
            raise ConfigError(f"input_size must be a multiple of 32, got {self.input_size}")
        if len(self.stage_channels) != 3 or len(self.blocks_per_stage) != 3:
            raise ConfigError("stage_channels and blocks_per_stage need exactly 3 entries")
        if self.stem_channels <= 0 or min(self.stage_channels) <= 0:
            raise ConfigError("channel counts must be positive")
        if min(self.blocks_per_stage) < 0:
            raise ConfigError("blocks_per_stage must be non-negative")


@dataclass
class ModelConfig(BackboneConfig):
    """Backbone plus both branch heads (the ``[model]`` section)."""

    num_bins: int = 8
    head_channels: int = 32
    aff_channels: int = 32
    aff_hidden: int = 32
    cls_prior: float = 0.01
    # gains for the IoU, BCE and DFL terms of the detection loss
    det_gains: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # "mean": BCE averaged over all cells and classes; "positives": summed and
    # divided by the number of positive cells
    cls_norm: str = "mean"
    aff_pos_weight: float = 1.0

    def validate(self) -> None:
        super().validate()
        if self.num_bins < 1:
            raise ConfigError("num_bins must be >= 1")
        if self.cls_norm not in ("mean", "positives"):
            raise ConfigError(f"cls_norm must be 'mean' or 'positives', got {self.cls_norm!r}")
        if not 0 < self.cls_prior < 1:
            raise ConfigError("cls_prior must lie in (0, 1)")


@dataclass
class RefinementConfig:
    alpha: float = 0.01
    beta: float = 0.01
    gamma: float = 0.001
    k: int = 5
    gate_outside: float = 0.25
    # -1 means 10% of the training epochs
    warmup_gt_epochs: int = -1

    def validate(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("alpha, beta, gamma must be >= 0")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0 < self.gate_outside < 1:
            raise ConfigError("gate_outside must lie in (0, 1)")


@dataclass
class AdapterConfig(RefinementConfig):
    """Language-model adapter settings (the ``[adapter]`` section)."""

    enabled: bool = True
    lm_dim: int = 64
    lm_layers: int = 2
    lm_heads: int = 4
    lm_max_len: int = 64
    lm_seed: int = 1234
    lora_rank: int = 4
    lora_scaling: float = 2.0
    lora_targets: tuple[str, ...] = ("q", "v")
    pool: int = 7
    gate_grid: int = 4
    match_iou: float = 0.3
    zero_init_heads: bool = False

    def validate(self) -> None:
        super().validate()
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if self.lm_dim % self.lm_heads:
            raise ConfigError("lm_dim must be divisible by lm_heads")
        bad = set(self.lora_targets) - {"q", "k", "v", "o"}
        if bad:
            raise ConfigError(f"unknown lora_targets {sorted(bad)}")
        if self.pool < 1 or self.gate_grid < 1:
            raise ConfigError("pool and gate_grid must be >= 1")

    @property
    def refinement(self) -> RefinementConfig:
        names = [f.name for f in fields(RefinementConfig)]
        return RefinementConfig(**{n: getattr(self, n) for n in names})


@dataclass
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 10
    lr_min: float = 1e-8
    lr_max: float = 2e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 16
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    seed: int = 0
    eval_every: int = 1
    augment: bool = True

    def validate(self) -> None:
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("need 0 <= warmup_epochs < epochs")
        if not self.lr_min < self.lr_max:
            raise ConfigError("need lr_min < lr_max")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class SynthConfig:
    """Synthetic dataset generator settings (the ``[data]`` section)."""

    num_images: int = 200
    image_size: int = 256
    object_classes: tuple[str, ...] = DEFAULT_OBJECTS
    affordance_classes: tuple[str, ...] = DEFAULT_AFFORDANCES
    objects_min: int = 1
    objects_max: int = 3
    seed: int = 7

    def validate(self) -> None:
        from .data.synth import ARCHETYPES

        if self.objects_min < 1 or self.objects_max < self.objects_min:
            raise ConfigError("need 1 <= objects_min <= objects_max")
        if not self.object_classes or not self.affordance_classes:
            raise ConfigError("class lists must be non-empty")
        unknown = [c for c in self.object_classes if c not in ARCHETYPES]
        if unknown:
            raise ConfigError(f"no shape archetype for object classes {unknown}")
        for name in self.object_classes:
            if not any(a in self.affordance_classes for a in ARCHETYPES[name].parts):
                raise ConfigError(f"archetype {name!r} maps to no configured affordance")
        if self.image_size < 32:
            raise ConfigError("image_size must be >= 32")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    data: SynthConfig = field(default_factory=SynthConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.adapter.validate()
        self.data.validate()
        return self

    def warmup_gt_epochs(self) -> int:
        w = self.adapter.warmup_gt_epochs
        return max(self.train.epochs // 10, 0) if w < 0 else w

    def hash(self) -> str:
        return hashlib.sha256(dumps(self).encode()).hexdigest()[:16]


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "adapter": AdapterConfig, "data": SynthConfig}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, tp, key: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if tp in (int, float, str):
            return tp(raw)
        if origin is tuple:
            args = typing.get_args(tp)
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(_parse(s, args[0], key) for s in items)
            if len(items) != len(args):
                raise ValueError(f"expected {len(args)} values")
            return tuple(_parse(s, a, key) for s, a in zip(items, args))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None
    raise ConfigError(f"unsupported type for {key!r}")


def loads(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        target = getattr(cfg, section)
        hints = typing.get_type_hints(type(target))
        for key, raw in parser.items(section):
            if key not in hints:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            setattr(target, key, _parse(raw, hints[key], f"{section}.{key}"))
    return cfg.validate()


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def dumps(cfg: RunConfig, comments: bool = False) -> str:
    out = io.StringIO()
    for section, cls in SECTIONS.items():
        out.write(f"[{section}]\n")
        obj = getattr(cfg, section)
        for f in fields(cls):
            if comments:
                out.write(f"# {f.name} (default {_format(f.default if f.default is not dataclasses.MISSING else f.default_factory())})\n")
            out.write(f"{f.name} = {_format(getattr(obj, f.name))}\n")
        out.write("\n")
    return out.getvalue()


def replace(cfg: RunConfig, **overrides) -> RunConfig:
    """Copy ``cfg`` with dotted overrides, e.g. ``replace(cfg, **{"train.seed": 3})``."""
    new = RunConfig(
        model=dataclasses.replace(cfg.model),
        train=dataclasses.replace(cfg.train),
        adapter=dataclasses.replace(cfg.adapter),
        data=dataclasses.replace(cfg.data),
    )
    for dotted, value in overrides.items():
        section, key = dotted.split(".", 1)
        obj = getattr(new, section)
        if not hasattr(obj, key):
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        setattr(obj, key, value)
    return new
