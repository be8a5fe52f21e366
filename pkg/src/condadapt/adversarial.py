"""Stage-1 adversarial alignment over probability maps.

One patch discriminator per condition branch plus one for the joint head;
each consumes L-channel probability maps and scores "looks like (stylized)
source" = 1 vs target = 0. Alignment runs target-to-source: the segmenter is
pushed to make target predictions score source-like.
"""
from __future__ import annotations

import logging

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import EPS, PatchDiscriminator, poly_lr_factor
from .segnet import PredictionBundle, upsample_probs
from .toyworld import ManifestData, cycle_batches

log = logging.getLogger(__name__)


class DiscriminatorBank(nn.Module):
    """Per-condition discriminators and/or one for the joint head.

    cam -> K branch discriminators + joint; mix -> joint only; sep/sm -> K
    branch discriminators, no joint.
    """

    def __init__(self, num_classes: int, num_conditions: int, with_joint: bool = True):
        super().__init__()
        self.num_conditions = num_conditions
        self.cond = nn.ModuleList(PatchDiscriminator(num_classes) for _ in range(num_conditions))
        self.joint = PatchDiscriminator(num_classes) if with_joint else None


def _mean_neg_log(scores: torch.Tensor) -> torch.Tensor:
    return -torch.log(scores.clamp(EPS, 1.0 - EPS)).mean()


def _branch_terms(branch_probs: list[torch.Tensor], conditions: torch.Tensor,
                  bank: DiscriminatorBank) -> torch.Tensor:
    """Per-sample -log D^{c_b}(p^{c_b}) averaged over the batch."""
    per_sample = torch.zeros(conditions.shape[0], dtype=branch_probs[0].dtype,
                             device=branch_probs[0].device)
    for i in range(bank.num_conditions):
        sel = conditions == i
        if sel.any():
            scores = bank.cond[i].score(branch_probs[i][sel])
            per_sample[sel] = -torch.log(scores.clamp(EPS, 1.0 - EPS)).mean(dim=(1, 2, 3))
    return per_sample.mean()


def condition_adv_loss(bundle: PredictionBundle, conditions: torch.Tensor,
                       bank: DiscriminatorBank) -> torch.Tensor:
    """Joint-head term + the one active per-condition term per sample."""
    if (conditions < 0).any() or (conditions >= bank.num_conditions).any():
        raise ValueError(f"condition index outside [0,{bank.num_conditions})")
    loss = _mean_neg_log(bank.joint.score(bundle.joint_probs))
    return loss + _branch_terms(bundle.branch_probs, conditions, bank)


def domain_adv_loss(bundle: PredictionBundle, bank: DiscriminatorBank) -> torch.Tensor:
    """Condition masking removed: every discriminator sees every sample."""
    loss = _mean_neg_log(bank.joint.score(bundle.joint_probs))
    for i in range(bank.num_conditions):
        loss = loss + _mean_neg_log(bank.cond[i].score(bundle.branch_probs[i]))
    return loss


def masked_ce(probs: torch.Tensor, labels: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """-log p(true class) over labeled pixels (label 0 ignored)."""
    mask = labels > 0
    if not mask.any():
        return probs.sum() * 0.0
    picked = probs.gather(1, (labels.clamp_min(1) - 1).unsqueeze(1)).squeeze(1)
    terms = -torch.log(picked[mask].clamp_min(EPS))
    return terms.mean() if reduction == "mean" else terms.sum()


def select_branch(branch_probs: list[torch.Tensor], conditions: torch.Tensor) -> torch.Tensor:
    """Per-sample probability map from the sample's condition branch."""
    stacked = torch.stack(branch_probs, dim=1)  # [B,K,L,h,w]
    idx = torch.arange(conditions.shape[0], device=conditions.device)
    return stacked[idx, conditions.long()]


def source_ce_loss(bundle: PredictionBundle, labels: torch.Tensor,
                   conditions: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Joint-head CE + active-branch CE over labeled pixels, at label resolution."""
    size = labels.shape[-2:]
    loss = masked_ce(upsample_probs(bundle.joint_probs, size), labels, reduction)
    sel = select_branch(bundle.branch_probs, conditions)
    return loss + masked_ce(upsample_probs(sel, size), labels, reduction)


def _bce(disc: nn.Module, maps: torch.Tensor, target: float) -> torch.Tensor:
    logits = disc(maps.detach())
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, target))


def discriminator_step(bank: DiscriminatorBank,
                       src_branches: list[torch.Tensor], src_joint: torch.Tensor | None,
                       conds_s: torch.Tensor,
                       tgt_branches: list[torch.Tensor], tgt_joint: torch.Tensor | None,
                       conds_t: torch.Tensor,
                       optimizer: torch.optim.Optimizer, all_conditions: bool = False) -> dict:
    """BCE per discriminator: source maps -> 1, target -> 0. Detaches inputs."""
    optimizer.zero_grad()
    losses: dict[str, float] = {}
    total = None
    if bank.joint is not None and src_joint is not None:
        total = _bce(bank.joint, src_joint, 1.0) + _bce(bank.joint, tgt_joint, 0.0)
        losses["d_joint"] = float(total.detach())
    for i in range(bank.num_conditions):
        if all_conditions:
            li = _bce(bank.cond[i], src_branches[i], 1.0) + _bce(bank.cond[i], tgt_branches[i], 0.0)
        else:
            sel_s, sel_t = conds_s == i, conds_t == i
            if not (bool(sel_s.any()) and bool(sel_t.any())):
                log.debug("condition %d bucket empty this step; skipping its discriminator", i)
                continue
            li = _bce(bank.cond[i], src_branches[i][sel_s], 1.0) \
                + _bce(bank.cond[i], tgt_branches[i][sel_t], 0.0)
        losses[f"d_cond{i}"] = float(li.detach())
        total = li if total is None else total + li
    if total is not None:
        total.backward()
        optimizer.step()
    return losses


# ---------------------------------------------------------------------------
# variant adapters: expose (branch_probs, joint_probs) for any segmenter kind
# ---------------------------------------------------------------------------

def model_heads(model: nn.Module, x: torch.Tensor):
    """Returns (branch_probs, joint_probs, bundle). Unused slots are None/[]."""
    out = model(x)
    if isinstance(out, PredictionBundle):
        return out.branch_probs, out.joint_probs, out
    if isinstance(out, list):
        return out, None, None
    return [], out, None


def bank_for(model: nn.Module, num_classes: int, num_conditions: int) -> DiscriminatorBank:
    kind = type(model).__name__
    if kind == "CamSegmenter":
        return DiscriminatorBank(num_classes, num_conditions, with_joint=True)
    if kind == "MixSegmenter":
        return DiscriminatorBank(num_classes, 0, with_joint=True)
    return DiscriminatorBank(num_classes, num_conditions, with_joint=False)


def heads_adv_loss(branches: list[torch.Tensor], joint: torch.Tensor | None,
                   conditions: torch.Tensor, bank: DiscriminatorBank, dat: bool) -> torch.Tensor:
    terms = []
    if bank.joint is not None and joint is not None:
        terms.append(_mean_neg_log(bank.joint.score(joint)))
    if bank.num_conditions:
        if dat:
            for i in range(bank.num_conditions):
                terms.append(_mean_neg_log(bank.cond[i].score(branches[i])))
        else:
            terms.append(_branch_terms(branches, conditions, bank))
    return sum(terms)


def heads_ce_loss(branches: list[torch.Tensor], joint: torch.Tensor | None,
                  labels: torch.Tensor, conditions: torch.Tensor) -> torch.Tensor:
    size = labels.shape[-2:]
    parts = []
    if joint is not None:
        parts.append(masked_ce(upsample_probs(joint, size), labels))
    if branches:
        sel = select_branch(branches, conditions)
        parts.append(masked_ce(upsample_probs(sel, size), labels))
    return sum(parts)


def _condition_streams(data: ManifestData, k: int, batch_size: int, seed: int):
    """Per-condition cyclic streams; falls back to the pooled stream when a
    condition bucket does not exist in the manifest."""
    streams = []
    pooled = None
    for i in range(k):
        sub = data.subset(i)
        if len(sub):
            streams.append(cycle_batches(sub, batch_size, seed + i))
        else:
            if pooled is None:
                pooled = cycle_batches(data, batch_size, seed + 97)
            streams.append(pooled)
    return streams


def stage1_train(model: nn.Module, bank: DiscriminatorBank, stylized: ManifestData,
                 target: ManifestData | None, steps: int, batch_size: int, seed: int,
                 lambda_adv: float = 0.001, lr: float = 0.0025, momentum: float = 0.9,
                 weight_decay: float = 5e-4, poly_power: float = 0.9, d_lr: float = 1e-4,
                 dat: bool = False, grad_clip: float = 5.0, device: str = "cpu",
                 curve_writer=None) -> None:
    """Alternating segmentation/discriminator updates with per-condition batches.

    Conditions rotate round-robin across steps so every branch discriminator
    trains each cycle. lambda_adv=0 degenerates to supervised training on the
    stylized source and leaves the discriminators untouched.
    """
    model.to(device).train()
    bank.to(device).train()
    k = max(1, stylized.manifest.num_conditions)
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: poly_lr_factor(s, steps, poly_power))
    d_params = list(bank.parameters())
    opt_d = sched_d = None
    if lambda_adv > 0 and d_params:
        opt_d = torch.optim.Adam(d_params, lr=d_lr, betas=(0.9, 0.99))
        sched_d = torch.optim.lr_scheduler.LambdaLR(opt_d, lambda s: poly_lr_factor(s, steps, poly_power))

    if lambda_adv > 0 and target is None:
        raise ValueError("adversarial training needs a target manifest")
    src_streams = _condition_streams(stylized, k, batch_size, seed + 10)
    tgt_streams = _condition_streams(target, k, batch_size, seed + 50) if target is not None else None

    for step in range(steps):
        ci = step % k
        src = next(src_streams[ci])
        x_s = torch.from_numpy(src.images).to(device)
        y_s = torch.from_numpy(src.labels).to(device)
        c_s = torch.from_numpy(src.conditions).to(device)
        if tgt_streams is not None:
            tgt = next(tgt_streams[ci])
            x_t = torch.from_numpy(tgt.images).to(device)
            c_t = torch.from_numpy(tgt.conditions).to(device)

        opt.zero_grad()
        br_s, jt_s, _ = model_heads(model, x_s)
        seg_loss = heads_ce_loss(br_s, jt_s, y_s, c_s)
        adv_value = 0.0
        if lambda_adv > 0:
            br_t, jt_t, _ = model_heads(model, x_t)
            adv = heads_adv_loss(br_t, jt_t, c_t, bank, dat)
            adv_value = float(adv.detach())
            seg_loss = seg_loss + lambda_adv * adv
        if not torch.isfinite(seg_loss):
            raise RuntimeError(f"stage-1 diverged at step {step}: non-finite loss")
        seg_loss.backward()
        if grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
        opt.step()
        sched.step()

        d_losses = {}
        if opt_d is not None:
            # discriminators train on the pre-update maps from this step
            d_losses = discriminator_step(bank, br_s, jt_s, c_s, br_t, jt_t, c_t,
                                          opt_d, all_conditions=dat)
            sched_d.step()

        if curve_writer is not None and (step % 10 == 0 or step == steps - 1):
            curve_writer(step, "seg_ce", float(seg_loss.detach()))
            curve_writer(step, "adv", adv_value)
            for name, value in d_losses.items():
                curve_writer(step, name, value)
