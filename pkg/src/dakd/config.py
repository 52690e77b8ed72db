"""Experiment configuration: one document that fully determines a run.

Configs are TOML (JSON accepted as an alternative); CLI flags override
file values, and the fully resolved config is echoed into every output
directory for provenance.
"""

from __future__ import annotations

import enum
import json

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .core import DistillConfig, KLDirection, Paradigm, Reduction
from .data import DomainShiftSpec, SceneSpec, TextureMode, DEFAULT_TARGET_SHIFT
from .models import (DiscriminatorConfig, SegNetConfig, STUDENT_PRESET,
                     TEACHER_PRESET)
from .train import (DEFAULT_DISC_OPTIM, DEFAULT_GEN_OPTIM, OptimKind,
                    OptimSpec)


@dataclass(frozen=True)
class DatasetSettings:
    root: str = "dataset"
    train_count: int = 160
    val_count: int = 24


@dataclass(frozen=True)
class LoopSettings:
    max_iters: int = 5000
    batch_size: int = 2
    eval_every: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "default"
    seed: int = 0
    out_dir: str = "out/default"
    scene: SceneSpec = field(default_factory=SceneSpec)
    shift_source: DomainShiftSpec = field(default_factory=DomainShiftSpec)
    shift_target: DomainShiftSpec = DEFAULT_TARGET_SHIFT
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    teacher: SegNetConfig = TEACHER_PRESET
    student: SegNetConfig = STUDENT_PRESET
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    pretrain_loop: LoopSettings = field(default_factory=LoopSettings)
    distill_loop: LoopSettings = LoopSettings(max_iters=2000)
    gen_optim: OptimSpec = DEFAULT_GEN_OPTIM
    disc_optim: OptimSpec = DEFAULT_DISC_OPTIM
    adv_weight_out: float = 1e-3
    adv_weight_feat: float = 2e-4


_ENUM_FIELDS = {
    "texture_mode": TextureMode,
    "paradigm": Paradigm,
    "kl_direction": KLDirection,
    "reduction": Reduction,
    "kind": OptimKind,
}

_TUPLE_FIELDS = {"image_size", "input_size", "hue_shift", "brightness_scale",
                 "classes"}


def _build(cls, data: dict):
    kwargs = {}
    valid = {f.name for f in fields(cls)}
    for key, value in data.items():
        if key not in valid:
            raise ValueError(f"unknown field {key!r} for {cls.__name__}")
        if key in _ENUM_FIELDS and isinstance(value, str):
            value = _ENUM_FIELDS[key](value)
        elif key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


_SECTIONS = {
    "scene": SceneSpec,
    "shift_source": DomainShiftSpec,
    "shift_target": DomainShiftSpec,
    "dataset": DatasetSettings,
    "teacher": SegNetConfig,
    "student": SegNetConfig,
    "discriminator": DiscriminatorConfig,
    "distill": DistillConfig,
    "pretrain_loop": LoopSettings,
    "distill_loop": LoopSettings,
    "gen_optim": OptimSpec,
    "disc_optim": OptimSpec,
}


def config_from_dict(data: dict) -> ExperimentConfig:
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value)
        elif key in ("name", "seed", "out_dir", "adv_weight_out",
                     "adv_weight_feat"):
            kwargs[key] = value
        else:
            raise ValueError(f"unknown config section {key!r}")
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if path.suffix == ".json":
        data = json.loads(path.read_text())
    else:
        with path.open("rb") as f:
            data = tomllib.load(f)
    try:
        return config_from_dict(data)
    except (ValueError, TypeError) as e:
        raise ValueError(f"{path}: {e}") from e


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def clean(obj):
        if isinstance(obj, enum.Enum):
            return obj.value
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [clean(v) for v in obj]
        return obj

    return clean(asdict(cfg))


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)} to TOML")


def dump_toml(cfg: ExperimentConfig) -> str:
    """Serialize a config to TOML (flat scalars first, then one table per
    section)."""
    data = config_to_dict(cfg)
    lines = []
    for key, value in data.items():
        if not isinstance(value, dict):
            lines.append(f"{key} = {_toml_value(value)}")
    for key, value in data.items():
        if isinstance(value, dict):
            lines.append("")
            lines.append(f"[{key}]")
            for k, v in value.items():
                lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


def write_resolved(cfg: ExperimentConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.resolved.toml"
    path.write_text(dump_toml(cfg))
    return path
