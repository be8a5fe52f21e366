"""Condition-guided style translator with adversarial + classification + semantic losses.

The generator is a small 2-down/2-up residual CNN; the condition one-hot is
concatenated as constant channels at the input and before each downsampling
stage (no norm layers: per-sample normalization would cancel the constant
condition channels). The discriminator is a patch CNN with a realism head and
a per-image condition-classifier head.
"""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import toyworld
from .blocks import EPS, save_checkpoint
from .toyworld import ConditionId, DatasetManifest, ManifestData, ManifestRecord, cycle_batches

log = logging.getLogger(__name__)


def inject_condition(features: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
    """Append K spatially-constant one-hot channels to a [B,C,H,W] tensor."""
    if features.dim() != 4:
        raise ValueError(f"expected rank-4 features, got shape {tuple(features.shape)}")
    if code.dim() != 2 or code.shape[0] != features.shape[0]:
        raise ValueError(f"condition code shape {tuple(code.shape)} does not match batch {features.shape[0]}")
    b, k = code.shape
    maps = code.view(b, k, 1, 1).expand(b, k, features.shape[2], features.shape[3])
    return torch.cat([features, maps.to(features.dtype)], dim=1)


def one_hot(conditions: torch.Tensor, num_conditions: int) -> torch.Tensor:
    return F.one_hot(conditions.long(), num_conditions).float()


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
        )

    def forward(self, x):
        return F.relu(x + self.net(x))


class ConditionGenerator(nn.Module):
    """Residual image-to-image net; identity at init (zero final layer)."""

    def __init__(self, num_conditions: int, base: int = 32):
        super().__init__()
        self.num_conditions = num_conditions
        self.stem = nn.Sequential(nn.Conv2d(3 + num_conditions, base, 3, padding=1), nn.ReLU(inplace=True))
        self.down1 = nn.Sequential(nn.Conv2d(base + num_conditions, base * 2, 3, stride=2, padding=1),
                                   nn.ReLU(inplace=True))
        self.down2 = nn.Sequential(nn.Conv2d(base * 2 + num_conditions, base * 4, 3, stride=2, padding=1),
                                   nn.ReLU(inplace=True))
        self.body = nn.Sequential(ResBlock(base * 4), ResBlock(base * 4))
        self.up1 = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                                 nn.Conv2d(base * 4, base * 2, 3, padding=1), nn.ReLU(inplace=True))
        self.up2 = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                                 nn.Conv2d(base * 2, base, 3, padding=1), nn.ReLU(inplace=True))
        self.head = nn.Conv2d(base, 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor, conditions: torch.Tensor) -> torch.Tensor:
        code = one_hot(conditions, self.num_conditions)
        h = self.stem(inject_condition(x, code))
        h = self.down1(inject_condition(h, code))
        h = self.down2(inject_condition(h, code))
        h = self.body(h)
        h = self.up2(self.up1(h))
        return torch.clamp(x + self.head(h), 0.0, 1.0)


class TranslationDiscriminator(nn.Module):
    """Shared patch trunk; realism logit grid + per-image condition logits."""

    def __init__(self, num_conditions: int, base: int = 32):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Conv2d(3, base, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base, base * 2, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base * 2, base * 4, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
        )
        self.realism = nn.Conv2d(base * 4, 1, 3, padding=1)
        self.condition_head = nn.Conv2d(base * 4, num_conditions, 1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, 0.0, 0.02)
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.trunk(x)
        return self.realism(h), self.condition_head(h).mean(dim=(2, 3))

    def realism_scores(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.realism(self.trunk(x)))

    def condition_probs(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.condition_head(self.trunk(x)).mean(dim=(2, 3)), dim=1)


# ---------------------------------------------------------------------------
# losses (scores/probabilities already squashed into (0,1))
# ---------------------------------------------------------------------------

def adversarial_realism_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """mean log(real) + mean log(1 - fake); the discriminator ascends this."""
    real = real_scores.clamp(EPS, 1.0 - EPS)
    fake = fake_scores.clamp(EPS, 1.0 - EPS)
    return torch.log(real).mean() + torch.log(1.0 - fake).mean()


def generator_realism_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """Non-saturating surrogate: -mean log(fake)."""
    return -torch.log(fake_scores.clamp(EPS, 1.0 - EPS)).mean()


def _nll(probs: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    picked = probs.gather(1, idx.long().view(-1, 1)).squeeze(1)
    if (picked <= EPS).any():
        log.warning("condition classifier assigns ~0 probability to a true class; clamping")
    return -torch.log(picked.clamp_min(EPS)).mean()


def condition_cls_loss(real_probs: torch.Tensor, real_conds: torch.Tensor,
                       fake_probs: torch.Tensor, fake_conds: torch.Tensor) -> torch.Tensor:
    """NLL of the true condition on real images + of the injected one on translations."""
    return _nll(real_probs, real_conds) + _nll(fake_probs, fake_conds)


def semantic_consistency_loss(seg_probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean -log p(true class) over labeled pixels (label 0 excluded)."""
    mask = labels > 0
    if not mask.any():
        log.warning("semantic consistency: batch has no labeled pixels")
        return seg_probs.sum() * 0.0
    idx = (labels.clamp_min(1) - 1).unsqueeze(1)
    picked = seg_probs.gather(1, idx).squeeze(1)
    return -torch.log(picked[mask].clamp_min(EPS)).mean()


def translator_objective(realism: torch.Tensor, cls: torch.Tensor, semantic: torch.Tensor,
                         lambda_sc: float = 5.0) -> torch.Tensor:
    return realism + cls + lambda_sc * semantic


# ---------------------------------------------------------------------------
# training / inference
# ---------------------------------------------------------------------------

def translate(generator: ConditionGenerator, images: torch.Tensor, conditions: torch.Tensor) -> torch.Tensor:
    """Deterministic eval-mode translation, output in [0,1]."""
    was_training = generator.training
    generator.eval()
    with torch.no_grad():
        out = generator(images, conditions)
    if was_training:
        generator.train()
    return out


def train_translator(generator: ConditionGenerator, discriminator: TranslationDiscriminator,
                     fseg: nn.Module, source: ManifestData, target: ManifestData,
                     steps: int, batch_size: int, seed: int, lambda_sc: float = 5.0,
                     lr: float = 2e-4, fixed_frac: float = 1.0 / 3.0, cls_warmup_steps: int = 600,
                     device: str = "cpu", curve_writer=None) -> None:
    """Alternating D/G updates; `fseg` must be a frozen source-trained segmenter.

    The condition-classifier head is warmed up on real target batches first so
    the generator receives meaningful condition gradients from step one.
    """
    generator.to(device).train()
    discriminator.to(device).train()
    fseg.to(device).eval()
    k = generator.num_conditions
    opt_g = torch.optim.Adam(generator.parameters(), lr=lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=lr, betas=(0.5, 0.999))

    warm_stream = cycle_batches(target, batch_size, seed + 3)
    opt_w = torch.optim.Adam(discriminator.parameters(), lr=lr, betas=(0.5, 0.999))
    for _ in range(cls_warmup_steps):
        batch = next(warm_stream)
        x = torch.from_numpy(batch.images).to(device)
        c = torch.from_numpy(batch.conditions).to(device)
        opt_w.zero_grad()
        _nll(discriminator.condition_probs(x), c).backward()
        opt_w.step()

    def lr_factor(step: int) -> float:
        fixed = int(steps * fixed_frac)
        if step < fixed:
            return 1.0
        return max(0.0, 1.0 - (step - fixed) / max(1, steps - fixed))

    sched_g = torch.optim.lr_scheduler.LambdaLR(opt_g, lr_factor)
    sched_d = torch.optim.lr_scheduler.LambdaLR(opt_d, lr_factor)

    gen = torch.Generator().manual_seed(seed)
    src_stream = cycle_batches(source, batch_size, seed + 1)
    tgt_stream = cycle_batches(target, batch_size, seed + 2)

    for step in range(steps):
        src = next(src_stream)
        tgt = next(tgt_stream)
        x_s = torch.from_numpy(src.images).to(device)
        y_s = torch.from_numpy(src.labels).to(device)
        x_t = torch.from_numpy(tgt.images).to(device)
        c_t = torch.from_numpy(tgt.conditions).to(device)
        c_inj = torch.randint(0, k, (x_s.shape[0],), generator=gen).to(device)

        fake = generator(x_s, c_inj)

        # discriminator: ascend realism objective, classify real conditions
        opt_d.zero_grad()
        real_logits, real_cls = discriminator(x_t)
        fake_logits, _ = discriminator(fake.detach())
        adv = adversarial_realism_loss(torch.sigmoid(real_logits), torch.sigmoid(fake_logits))
        d_cls = _nll(torch.softmax(real_cls, dim=1), c_t)
        (-adv + d_cls).backward()
        opt_d.step()

        # generator: non-saturating realism + injected-condition cls + semantics
        opt_g.zero_grad()
        fake_logits, fake_cls = discriminator(fake)
        g_adv = generator_realism_loss(torch.sigmoid(fake_logits))
        g_cls = _nll(torch.softmax(fake_cls, dim=1), c_inj)
        sc = semantic_consistency_loss(fseg.predict_probs(fake), y_s)
        g_loss = g_adv + g_cls + lambda_sc * sc
        if not torch.isfinite(g_loss):
            raise RuntimeError(f"translator diverged at step {step}: non-finite generator loss")
        g_loss.backward()
        opt_g.step()
        sched_g.step()
        sched_d.step()

        if curve_writer is not None and (step % 10 == 0 or step == steps - 1):
            for name, value in (("d_adv", float(adv.detach())), ("d_cls", float(d_cls.detach())),
                                ("g_adv", float(g_adv.detach())), ("g_cls", float(g_cls.detach())),
                                ("g_sc", float(sc.detach()))):
                curve_writer(step, name, value)


def write_stylized_dataset(generator: ConditionGenerator, source: ManifestData,
                           conditions: list[str], out_root: Path, batch_size: int = 16,
                           device: str = "cpu") -> DatasetManifest:
    """Translate every source sample into every condition; toyworld manifest format."""
    out_root = Path(out_root)
    (out_root / "images").mkdir(parents=True, exist_ok=True)
    (out_root / "labels").mkdir(parents=True, exist_ok=True)
    man = DatasetManifest(
        root=out_root, records=[], num_classes=source.manifest.num_classes,
        num_conditions=len(conditions), split="train",
        height=source.manifest.height, width=source.manifest.width,
        condition_names={i: n for i, n in enumerate(conditions)},
    )
    generator.to(device).eval()
    idx = 0
    for cidx, cname in enumerate(conditions):
        for start in range(0, len(source), batch_size):
            sl = np.arange(start, min(start + batch_size, len(source)))
            batch = source.batch_at(sl)
            imgs = torch.from_numpy(batch.images).to(device)
            conds = torch.full((imgs.shape[0],), cidx, dtype=torch.long, device=device)
            styled = translate(generator, imgs, conds).cpu().numpy()
            for b in range(styled.shape[0]):
                img_rel = f"images/styled_{idx:05d}.png"
                lab_rel = f"labels/styled_{idx:05d}.png"
                toyworld.save_image(styled[b], out_root / img_rel)
                toyworld.save_label(batch.labels[b], out_root / lab_rel)
                man.records.append(ManifestRecord(img_rel, lab_rel, toyworld.SOURCE, ConditionId(cidx, cname)))
                idx += 1
    toyworld.write_manifest(man, out_root / "stylized_train.manifest")
    return man


def make_curve_writer(path: Path):
    """CSV (step, name, value) appender used by the training loops."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(["step", "name", "value"])

    def emit(step: int, name: str, value: float):
        writer.writerow([step, name, f"{value:.6f}"])
        fh.flush()

    emit.close = fh.close
    return emit


def condition_accuracy(generator: ConditionGenerator, discriminator: TranslationDiscriminator,
                       source: ManifestData, conditions: list[str], batch_size: int = 16,
                       device: str = "cpu") -> dict[str, float]:
    """Per-condition classifier accuracy on freshly translated images."""
    generator.to(device).eval()
    discriminator.to(device).eval()
    accs = {}
    with torch.no_grad():
        for cidx, cname in enumerate(conditions):
            hits, total = 0, 0
            for start in range(0, len(source), batch_size):
                sl = np.arange(start, min(start + batch_size, len(source)))
                imgs = torch.from_numpy(source.batch_at(sl).images).to(device)
                conds = torch.full((imgs.shape[0],), cidx, dtype=torch.long, device=device)
                styled = generator(imgs, conds)
                hits += int((discriminator.condition_probs(styled).argmax(1) == cidx).sum())
                total += imgs.shape[0]
            accs[cname] = hits / total
    return accs
