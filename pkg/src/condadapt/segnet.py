"""Segmentation networks: shared encoder, per-condition decoders, attention fusion.

Probability maps carry L channels at 1/4 input resolution; channel j scores
class j+1 (label 0 is ignore and never predicted). `upsample_probs` moves maps
to label resolution for losses and metrics.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import conv_bn_relu

VARIANTS = ("cam", "mix", "sep", "sm")


@dataclass
class PredictionBundle:
    branch_feats: list[torch.Tensor]   # K x [B,D,h,w]
    branch_probs: list[torch.Tensor]   # K x [B,L,h,w]
    attention: torch.Tensor            # [B,K,h,w], softmax over K
    fused_feat: torch.Tensor           # [B,D,h,w]
    joint_feat: torch.Tensor           # [B,D,h,w]
    joint_probs: torch.Tensor          # [B,L,h,w]


def _check_finite(name: str, t: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise RuntimeError(f"non-finite values produced by {name}")
    return t


def attention_fuse(branch_feats: list[torch.Tensor], attention: torch.Tensor) -> torch.Tensor:
    """Weighted sum of branch features, one attention channel per branch."""
    fused = torch.zeros_like(branch_feats[0])
    for i, f in enumerate(branch_feats):
        fused = fused + attention[:, i:i + 1] * f
    return fused


def blend_probs(branch_probs: list[torch.Tensor], attention: torch.Tensor,
                joint_probs: torch.Tensor) -> torch.Tensor:
    """Half attention-weighted branch mixture, half joint head."""
    mix = torch.zeros_like(branch_probs[0])
    for i, p in enumerate(branch_probs):
        mix = mix + attention[:, i:i + 1] * p
    return 0.5 * mix + 0.5 * joint_probs


def upsample_probs(probs: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear upsample + renormalize so each pixel stays a distribution."""
    if probs.shape[-2:] == tuple(size):
        return probs
    up = F.interpolate(probs, size=size, mode="bilinear", align_corners=False)
    return up / up.sum(dim=1, keepdim=True).clamp_min(1e-12)


class Encoder(nn.Module):
    """Output stride 4."""

    def __init__(self, widths: tuple = (32, 64, 96)):
        super().__init__()
        w1, w2, w3 = widths
        self.net = nn.Sequential(
            conv_bn_relu(3, w1),
            conv_bn_relu(w1, w2, stride=2),
            conv_bn_relu(w2, w2),
            conv_bn_relu(w2, w3, stride=2),
            conv_bn_relu(w3, w3),
        )
        self.out_channels = w3

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class Decoder(nn.Module):
    """Produces a feature map and a per-pixel class distribution."""

    def __init__(self, in_channels: int, feat_dim: int, num_classes: int):
        super().__init__()
        self.body = nn.Sequential(conv_bn_relu(in_channels, feat_dim), conv_bn_relu(feat_dim, feat_dim))
        self.classifier = nn.Conv2d(feat_dim, num_classes, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f = self.body(x)
        p = torch.softmax(self.classifier(f), dim=1)
        return f, p


class AttentionFuser(nn.Module):
    """3x3 + 1x1 conv block scoring the K branches per pixel."""

    def __init__(self, feat_dim: int, num_branches: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(feat_dim * num_branches, hidden, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, num_branches, 1),
        )

    def forward(self, branch_feats: list[torch.Tensor]) -> torch.Tensor:
        logits = self.net(torch.cat(branch_feats, dim=1))
        return torch.softmax(logits, dim=1)


class CamSegmenter(nn.Module):
    """Shared encoder, K condition branches, attention fusion and a joint head."""

    def __init__(self, num_classes: int, num_conditions: int, feat_dim: int = 64,
                 enc_widths: tuple = (32, 64, 96)):
        super().__init__()
        self.num_classes = num_classes
        self.num_conditions = num_conditions
        self.feat_dim = feat_dim
        self.encoder = Encoder(enc_widths)
        self.branches = nn.ModuleList(
            Decoder(self.encoder.out_channels, feat_dim, num_classes) for _ in range(num_conditions))
        self.fuser = AttentionFuser(feat_dim, num_conditions)
        self.joint = Decoder(feat_dim * (num_conditions + 1), feat_dim, num_classes)

    def forward(self, x: torch.Tensor) -> PredictionBundle:
        enc = _check_finite("encoder", self.encoder(x))
        feats, probs = [], []
        for i, branch in enumerate(self.branches):
            f, p = branch(enc)
            feats.append(_check_finite(f"branch[{i}]", f))
            probs.append(_check_finite(f"branch[{i}] probs", p))
        attn = _check_finite("fuser", self.fuser(feats))
        fused = attention_fuse(feats, attn)
        jf, jp = self.joint(torch.cat(feats + [fused], dim=1))
        return PredictionBundle(feats, probs, attn,
                                _check_finite("fusion", fused),
                                _check_finite("joint", jf),
                                _check_finite("joint probs", jp))

    def predict_probs(self, x: torch.Tensor, mode: str = "fused") -> torch.Tensor:
        bundle = self.forward(x)
        if mode == "fused":
            p = blend_probs(bundle.branch_probs, bundle.attention, bundle.joint_probs)
        elif mode == "joint":
            p = bundle.joint_probs
        elif mode == "mean":
            p = torch.stack(bundle.branch_probs + [bundle.joint_probs]).mean(dim=0)
        else:
            raise ValueError(f"unknown predict mode {mode!r}")
        return upsample_probs(p, x.shape[-2:])


class MixSegmenter(nn.Module):
    """Single decoder on the shared encoder; conditions ignored."""

    def __init__(self, num_classes: int, feat_dim: int = 64, enc_widths: tuple = (32, 64, 96)):
        super().__init__()
        self.num_classes = num_classes
        self.encoder = Encoder(enc_widths)
        self.decoder = Decoder(self.encoder.out_channels, feat_dim, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, p = self.decoder(self.encoder(x))
        return p

    def predict_probs(self, x: torch.Tensor, mode: str = "fused") -> torch.Tensor:
        return upsample_probs(self.forward(x), x.shape[-2:])


class SMSegmenter(nn.Module):
    """Shared encoder + per-condition decoders; mean voting at inference."""

    def __init__(self, num_classes: int, num_conditions: int, feat_dim: int = 64,
                 enc_widths: tuple = (32, 64, 96)):
        super().__init__()
        self.num_classes = num_classes
        self.num_conditions = num_conditions
        self.encoder = Encoder(enc_widths)
        self.branches = nn.ModuleList(
            Decoder(self.encoder.out_channels, feat_dim, num_classes) for _ in range(num_conditions))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        enc = self.encoder(x)
        return [branch(enc)[1] for branch in self.branches]

    def forward_branch(self, x: torch.Tensor, condition: int) -> torch.Tensor:
        return self.branches[condition](self.encoder(x))[1]

    def predict_probs(self, x: torch.Tensor, mode: str = "fused") -> torch.Tensor:
        p = torch.stack(self.forward(x)).mean(dim=0)
        return upsample_probs(p, x.shape[-2:])


class SepSegmenter(nn.Module):
    """Fully separate encoder/decoder per condition; mean voting at inference."""

    def __init__(self, num_classes: int, num_conditions: int, feat_dim: int = 64,
                 enc_widths: tuple = (32, 64, 96)):
        super().__init__()
        self.num_classes = num_classes
        self.num_conditions = num_conditions
        self.encoders = nn.ModuleList(Encoder(enc_widths) for _ in range(num_conditions))
        self.branches = nn.ModuleList(
            Decoder(self.encoders[0].out_channels, feat_dim, num_classes) for _ in range(num_conditions))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return [self.branches[i](self.encoders[i](x))[1] for i in range(self.num_conditions)]

    def forward_branch(self, x: torch.Tensor, condition: int) -> torch.Tensor:
        return self.branches[condition](self.encoders[condition](x))[1]

    def predict_probs(self, x: torch.Tensor, mode: str = "fused") -> torch.Tensor:
        p = torch.stack(self.forward(x)).mean(dim=0)
        return upsample_probs(p, x.shape[-2:])


def build_segmenter(variant: str, num_classes: int, num_conditions: int,
                    feat_dim: int = 64, enc_widths: tuple = (32, 64, 96)) -> nn.Module:
    if variant == "cam":
        return CamSegmenter(num_classes, num_conditions, feat_dim, enc_widths)
    if variant == "mix":
        return MixSegmenter(num_classes, feat_dim, enc_widths)
    if variant == "sm":
        return SMSegmenter(num_classes, num_conditions, feat_dim, enc_widths)
    if variant == "sep":
        return SepSegmenter(num_classes, num_conditions, feat_dim, enc_widths)
    raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
