"""Shared small-net building blocks, schedules and checkpoint I/O."""
from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn

CKPT_VERSION = 1
EPS = 1e-7


def conv_bn_relu(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def init_gan_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class PatchDiscriminator(nn.Module):
    """Patch classifier over dense maps; emits a logit grid coarser than its input."""

    def __init__(self, in_channels: int, widths: tuple = (32, 64, 64), strides: tuple = (2, 1, 1)):
        super().__init__()
        layers: list[nn.Module] = []
        cin = in_channels
        for w, s in zip(widths, strides):
            k = 4 if s == 2 else 3
            layers += [nn.Conv2d(cin, w, k, stride=s, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            cin = w
        layers.append(nn.Conv2d(cin, 1, 3, stride=1, padding=1))
        self.net = nn.Sequential(*layers)
        init_gan_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def score(self, x: torch.Tensor) -> torch.Tensor:
        """Squashed patch scores in (0,1)."""
        return torch.sigmoid(self.net(x))


def poly_lr_factor(step: int, total: int, power: float = 0.9) -> float:
    frac = min(max(step, 0), total) / max(total, 1)
    return (1.0 - frac) ** power


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def param_checksum(module: nn.Module) -> float:
    with torch.no_grad():
        return float(sum(p.double().abs().sum() for p in module.parameters()))


def save_checkpoint(path: Path, kind: str, state: dict, config: dict | None = None) -> None:
    payload = {"version": CKPT_VERSION, "kind": kind, "state": state, "config": config or {}}
    torch.save(payload, path)


def load_checkpoint(path: Path, kind: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if kind is not None and payload.get("kind") != kind:
        raise ValueError(f"{path}: expected checkpoint kind {kind!r}, found {payload.get('kind')!r}")
    return payload
