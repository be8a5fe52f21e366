"""Stage-2 self-training: attentive pseudo-labels, confidence weighting,
hard-region adversarial loss, and teacher-student distillation.

Pseudo-label code 0 means "no label" (hard adaptation region); the easy/hard
partition is exact: every pixel is either pseudo-labeled (CE path) or hard
(adversarial path), never both.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import EPS, PatchDiscriminator, poly_lr_factor
from .segnet import CamSegmenter, MixSegmenter, PredictionBundle, blend_probs, upsample_probs
from .adversarial import DiscriminatorBank, masked_ce, source_ce_loss, _condition_streams, _bce
from .toyworld import ManifestData

log = logging.getLogger(__name__)


@dataclass
class PseudoLabelPack:
    blended_probs: torch.Tensor       # [B,L,h,w] at prediction resolution
    pseudo_labels: torch.Tensor       # [B,H,W] in {0..L}, 0 = none
    confidence: torch.Tensor | None   # [B,h,w] in (0,1), high = well adapted
    hard_mask: torch.Tensor           # [B,H,W] bool, pseudo_labels == 0


def attentive_probs(bundle: PredictionBundle) -> torch.Tensor:
    """Half attention-weighted branch mixture, half joint head (a distribution)."""
    return blend_probs(bundle.branch_probs, bundle.attention, bundle.joint_probs)


def threshold_labels(probs: torch.Tensor, lam_p: float, out_size: tuple[int, int]) -> torch.Tensor:
    """argmax where max prob strictly exceeds lam_p, else 0. Ties -> lowest class."""
    if not 0.0 <= lam_p < 1.0:
        raise ValueError(f"threshold must lie in [0,1), got {lam_p}")
    up = upsample_probs(probs, out_size)
    conf, arg = up.max(dim=1)
    return torch.where(conf > lam_p, arg + 1, torch.zeros_like(arg))


def ambivalence_map(blended: torch.Tensor, joint_disc: PatchDiscriminator) -> torch.Tensor:
    """Discriminator confidence on the blended probs, upsampled to map size."""
    grid = joint_disc.score(blended)
    d = F.interpolate(grid, size=blended.shape[-2:], mode="bilinear", align_corners=False)
    return d.squeeze(1).clamp(EPS, 1.0 - EPS)


def assign_pseudo_labels(bundle: PredictionBundle, lam_p: float,
                         out_size: tuple[int, int] | None = None,
                         joint_disc: PatchDiscriminator | None = None) -> PseudoLabelPack:
    """Blend, threshold and (optionally) attach the discriminator confidence."""
    blended = attentive_probs(bundle)
    size = tuple(out_size) if out_size is not None else tuple(blended.shape[-2:])
    labels = threshold_labels(blended, lam_p, size)
    conf = ambivalence_map(blended, joint_disc) if joint_disc is not None else None
    return PseudoLabelPack(blended, labels, conf, labels == 0)


def vote_labels(bundle: PredictionBundle, mode: str, lam_p: float,
                out_size: tuple[int, int] | None = None) -> torch.Tensor:
    """Baseline pseudo-labels: uniform mean or renormalized elementwise max of all heads."""
    heads = torch.stack(bundle.branch_probs + [bundle.joint_probs])
    if mode == "meanv":
        probs = heads.mean(dim=0)
    elif mode == "maxv":
        probs = heads.max(dim=0).values
        probs = probs / probs.sum(dim=1, keepdim=True).clamp_min(1e-12)
    else:
        raise ValueError(f"unknown voting mode {mode!r}")
    size = tuple(out_size) if out_size is not None else tuple(probs.shape[-2:])
    return threshold_labels(probs, lam_p, size)


# ---------------------------------------------------------------------------
# losses (probabilities at label resolution; caller upsamples)
# ---------------------------------------------------------------------------

def plain_ce(probs: torch.Tensor, pseudo_labels: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """CE over pseudo-labeled pixels only."""
    return masked_ce(probs, pseudo_labels, reduction)


def weighted_ce(probs: torch.Tensor, pseudo_labels: torch.Tensor, confidence: torch.Tensor,
                reduction: str = "mean") -> torch.Tensor:
    """Confidence-weighted CE; same labeled-pixel normalization as plain_ce."""
    if confidence.shape != pseudo_labels.shape:
        raise ValueError(f"confidence shape {tuple(confidence.shape)} != labels {tuple(pseudo_labels.shape)}")
    mask = pseudo_labels > 0
    if not mask.any():
        return probs.sum() * 0.0
    picked = probs.gather(1, (pseudo_labels.clamp_min(1) - 1).unsqueeze(1)).squeeze(1)
    terms = -confidence[mask] * torch.log(picked[mask].clamp_min(EPS))
    return terms.mean() if reduction == "mean" else terms.sum()


def hard_region_adv_loss(joint_probs: torch.Tensor, pseudo_labels: torch.Tensor,
                         joint_disc: PatchDiscriminator, reduction: str = "mean") -> torch.Tensor:
    """-log D(joint probs) over hard pixels (no pseudo-label), D grid upsampled."""
    hard = pseudo_labels == 0
    if not hard.any():
        return joint_probs.sum() * 0.0
    scores = joint_disc.score(joint_probs)
    scores = F.interpolate(scores, size=pseudo_labels.shape[-2:], mode="bilinear",
                           align_corners=False).squeeze(1)
    terms = -torch.log(scores[hard].clamp(EPS, 1.0 - EPS))
    return terms.mean() if reduction == "mean" else terms.sum()


# ---------------------------------------------------------------------------
# stage-2 training and distillation
# ---------------------------------------------------------------------------

def freeze_batchnorm(model: nn.Module) -> None:
    for m in model.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)


def _set_train_keep_bn_frozen(model: nn.Module) -> None:
    model.train()
    for m in model.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.eval()


def stage2_train(teacher: CamSegmenter, teacher_bank: DiscriminatorBank, student: CamSegmenter,
                 stylized: ManifestData, target: ManifestData, steps: int, batch_size: int,
                 seed: int, lam_p: float = 0.6, lr: float = 0.002, momentum: float = 0.9,
                 weight_decay: float = 5e-4, poly_power: float = 0.9, d_lr: float = 1e-4,
                 use_confidence: bool = True, use_hard_adv: bool = True,
                 use_vote: str | None = None, source_ce_joint_only: bool = False,
                 grad_clip: float = 5.0, device: str = "cpu",
                 curve_writer=None) -> DiscriminatorBank:
    """Retrain on stylized source CE + pseudo-labeled target terms.

    The teacher and its discriminator bank stay frozen and generate labels and
    confidence on the fly; the live joint discriminator (initialized from the
    teacher's) keeps its adversarial game with the student for the hard-region
    loss. use_confidence=False and use_hard_adv=False reduce the target term to
    plain CE; use_vote in {maxv, meanv} swaps the blended labels for voting
    baselines (confidence/hard-adv then follow the same flags).
    Batch-norm statistics and affine parameters are frozen for this stage.
    """
    teacher.to(device).eval()
    teacher_bank.to(device).eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    for p in teacher_bank.parameters():
        p.requires_grad_(False)

    student.to(device)
    freeze_batchnorm(student)
    _set_train_keep_bn_frozen(student)
    live_disc = copy.deepcopy(teacher_bank.joint).to(device).train()
    for p in live_disc.parameters():
        p.requires_grad_(True)

    k = max(1, stylized.manifest.num_conditions)
    trainable = [p for p in student.parameters() if p.requires_grad]
    opt = torch.optim.SGD(trainable, lr=lr, momentum=momentum, weight_decay=weight_decay)
    opt_d = torch.optim.Adam(live_disc.parameters(), lr=d_lr, betas=(0.9, 0.99))
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: poly_lr_factor(s, steps, poly_power))
    sched_d = torch.optim.lr_scheduler.LambdaLR(opt_d, lambda s: poly_lr_factor(s, steps, poly_power))

    src_streams = _condition_streams(stylized, k, batch_size, seed + 10)
    tgt_streams = _condition_streams(target, k, batch_size, seed + 50)

    for step in range(steps):
        ci = step % k
        src = next(src_streams[ci])
        tgt = next(tgt_streams[ci])
        x_s = torch.from_numpy(src.images).to(device)
        y_s = torch.from_numpy(src.labels).to(device)
        c_s = torch.from_numpy(src.conditions).to(device)
        x_t = torch.from_numpy(tgt.images).to(device)

        with torch.no_grad():
            t_bundle = teacher(x_t)
            if use_vote is None:
                pack = assign_pseudo_labels(t_bundle, lam_p, x_t.shape[-2:],
                                            teacher_bank.joint if use_confidence else None)
            else:
                labels_t = vote_labels(t_bundle, use_vote, lam_p, x_t.shape[-2:])
                blended = attentive_probs(t_bundle)
                conf = ambivalence_map(blended, teacher_bank.joint) if use_confidence else None
                pack = PseudoLabelPack(blended, labels_t, conf, labels_t == 0)

        opt.zero_grad()
        s_bundle = student(x_s)
        if source_ce_joint_only:
            ce_s = masked_ce(upsample_probs(s_bundle.joint_probs, y_s.shape[-2:]), y_s)
        else:
            ce_s = source_ce_loss(s_bundle, y_s, c_s)

        t_out = student(x_t)
        joint_up = upsample_probs(t_out.joint_probs, x_t.shape[-2:])
        if use_confidence:
            conf_up = F.interpolate(pack.confidence.unsqueeze(1), size=x_t.shape[-2:],
                                    mode="bilinear", align_corners=False).squeeze(1)
            ce_t = weighted_ce(joint_up, pack.pseudo_labels, conf_up)
        else:
            ce_t = plain_ce(joint_up, pack.pseudo_labels)
        loss = ce_s + ce_t
        adv_value = 0.0
        if use_hard_adv:
            adv_t = hard_region_adv_loss(t_out.joint_probs, pack.pseudo_labels, live_disc)
            adv_value = float(adv_t.detach())
            loss = loss + adv_t
        if not torch.isfinite(loss):
            raise RuntimeError(f"stage-2 diverged at step {step}: non-finite loss")
        loss.backward()
        if grad_clip:
            torch.nn.utils.clip_grad_norm_(trainable, grad_clip)
        opt.step()
        sched.step()

        if use_hard_adv:
            opt_d.zero_grad()
            d_loss = _bce(live_disc, s_bundle.joint_probs, 1.0) + _bce(live_disc, t_out.joint_probs, 0.0)
            d_loss.backward()
            opt_d.step()
            sched_d.step()

        if curve_writer is not None and (step % 10 == 0 or step == steps - 1):
            curve_writer(step, "ce_source", float(ce_s.detach()))
            curve_writer(step, "ce_target", float(ce_t.detach()))
            curve_writer(step, "hard_adv", adv_value)

    bank_out = copy.deepcopy(teacher_bank)
    bank_out.joint = live_disc
    return bank_out


def distill_student(teacher: CamSegmenter, teacher_bank: DiscriminatorBank, student: MixSegmenter,
                    stylized: ManifestData, target: ManifestData, steps: int, batch_size: int,
                    seed: int, lam_p: float = 0.9, lr: float = 0.002, momentum: float = 0.9,
                    weight_decay: float = 5e-4, poly_power: float = 0.9, grad_clip: float = 5.0,
                    device: str = "cpu", curve_writer=None) -> None:
    """Train a single-decoder student on stylized-source CE plus teacher pseudo-labels.

    The student encoder is initialized from the teacher's; the teacher stays
    frozen and its blended output thresholded at lam_p provides target labels.
    """
    teacher.to(device).eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    student.encoder.load_state_dict(teacher.encoder.state_dict())
    student.to(device).train()

    k = max(1, stylized.manifest.num_conditions)
    opt = torch.optim.SGD(student.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: poly_lr_factor(s, steps, poly_power))
    src_streams = _condition_streams(stylized, k, batch_size, seed + 10)
    tgt_streams = _condition_streams(target, k, batch_size, seed + 50)

    for step in range(steps):
        ci = step % k
        src = next(src_streams[ci])
        tgt = next(tgt_streams[ci])
        x_s = torch.from_numpy(src.images).to(device)
        y_s = torch.from_numpy(src.labels).to(device)
        x_t = torch.from_numpy(tgt.images).to(device)

        with torch.no_grad():
            pack = assign_pseudo_labels(teacher(x_t), lam_p, x_t.shape[-2:])

        opt.zero_grad()
        ce_s = masked_ce(student.predict_probs(x_s), y_s)
        ce_t = plain_ce(student.predict_probs(x_t), pack.pseudo_labels)
        loss = ce_s + ce_t
        if not torch.isfinite(loss):
            raise RuntimeError(f"distillation diverged at step {step}: non-finite loss")
        loss.backward()
        if grad_clip:
            torch.nn.utils.clip_grad_norm_(student.parameters(), grad_clip)
        opt.step()
        sched.step()
        if curve_writer is not None and (step % 10 == 0 or step == steps - 1):
            curve_writer(step, "ce_source", float(ce_s.detach()))
            curve_writer(step, "ce_pseudo", float(ce_t.detach()))
