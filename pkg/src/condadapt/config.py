"""Run configuration: one serializable tree holding every hyperparameter.

Unknown keys are rejected on load; every command writes its resolved config
next to its outputs so runs are reproducible from the artifact dir alone.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


@dataclass
class DataConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 6
    conditions: list = field(default_factory=lambda: ["clean", "fog", "rain"])
    unseen_condition: str = "dusk"
    source_train: int = 600
    source_eval: int = 60
    target_train: int = 600
    target_eval_per_condition: int = 150
    unseen_eval: int = 50
    strength_min: float = 0.4
    strength_max: float = 1.0


@dataclass
class ModelConfig:
    variant: str = "cam"          # cam | mix | sep | sm
    feat_dim: int = 64
    enc_widths: list = field(default_factory=lambda: [16, 32, 48])


@dataclass
class TranslatorConfig:
    steps: int = 700
    batch_size: int = 8
    lr: float = 2e-4
    lambda_sc: float = 5.0
    gen_base: int = 16
    cls_warmup_steps: int = 600
    fseg_steps: int = 400
    fseg_lr: float = 0.01


@dataclass
class Stage1Config:
    steps: int = 700
    batch_size: int = 8
    lr: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    d_lr: float = 1e-4
    lambda_adv: float = 0.001
    grad_clip: float = 5.0
    dat: bool = False


@dataclass
class Stage2Config:
    steps: int = 500
    batch_size: int = 8
    lr: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    d_lr: float = 1e-4
    grad_clip: float = 5.0
    lambda_p: float = 0.6
    use_confidence: bool = True
    use_hard_adv: bool = True
    vote: str = ""                # "" (blended) | maxv | meanv
    source_ce_joint_only: bool = False


@dataclass
class DistillConfig:
    steps: int = 400
    batch_size: int = 8
    lr: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    grad_clip: float = 5.0
    lambda_p: float = 0.9


@dataclass
class TrainConfig:
    seed: int = 42
    device: str = "cpu"
    predict_mode: str = "fused"   # fused | joint | mean
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    translator: TranslatorConfig = field(default_factory=TranslatorConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    distill: DistillConfig = field(default_factory=DistillConfig)


def to_dict(cfg: Any) -> dict:
    return dataclasses.asdict(cfg)


def _from_dict(cls, data: dict, path: str = ""):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown config key(s) {sorted(unknown)} under '{path or cls.__name__}'")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        proto = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(proto):
            kwargs[name] = _from_dict(type(proto), value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> TrainConfig:
    return _from_dict(TrainConfig, data)


def save_config(cfg: TrainConfig, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")


def load_config(path: Path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    return from_dict(json.loads(path.read_text()))


def _coerce(current: Any, raw: str) -> Any:
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, list):
        items = [s for s in raw.split(",") if s]
        if current and isinstance(current[0], int):
            return [int(s) for s in items]
        if current and isinstance(current[0], float):
            return [float(s) for s in items]
        return items
    return raw


def apply_overrides(cfg: TrainConfig, overrides: list[str]) -> TrainConfig:
    """Dotted-key overrides, e.g. stage2.lambda_p=0.5 or data.conditions=clean,fog."""
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if not hasattr(node, part):
                raise ValueError(f"unknown config key {key!r}")
            node = getattr(node, part)
        leaf = parts[-1]
        if not hasattr(node, leaf):
            raise ValueError(f"unknown config key {key!r}")
        setattr(node, leaf, _coerce(getattr(node, leaf), raw))
    return cfg
