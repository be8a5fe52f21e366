"""Procedural two-domain segmentation toy world.

Generates a "synthetic" source domain (flat class colors + grid texture) and a
target domain (noise-perturbed colors) split into weather-style sub-domains
produced by closed-form condition transforms. Labels use 0 for unlabeled/ignore
and 1..L for semantic classes; generated ground truth never contains 0.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

SOURCE = "source"
TARGET = "target"

# class palette, index 1..L (0 = ignore, never generated)
DEFAULT_PALETTE = (
    (0.53, 0.71, 0.92),  # 1 sky
    (0.36, 0.29, 0.22),  # 2 ground
    (0.55, 0.55, 0.58),  # 3 block
    (0.18, 0.45, 0.20),  # 4 foliage
    (0.65, 0.15, 0.15),  # 5 cart
    (0.85, 0.75, 0.20),  # 6 marker
)

FOG_TONE = (0.82, 0.84, 0.86)
RAIN_TONE = (0.44, 0.50, 0.62)
DUSK_TONE = (0.08, 0.08, 0.16)


@dataclass(frozen=True)
class ConditionId:
    index: int
    name: str


@dataclass
class Sample:
    image: np.ndarray  # float32 [3,H,W] in [0,1]
    label: np.ndarray  # int64 [H,W] in {0..L}
    domain: str
    condition: ConditionId


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    num_classes: int = 6
    domain: str = SOURCE
    palette: tuple = DEFAULT_PALETTE
    sky_frac: tuple = (0.22, 0.42)
    min_shapes: int = 2
    max_shapes: int = 6
    grid_step: int = 8       # source texture
    grid_gain: float = 0.85
    jitter_gain: tuple = (0.85, 1.15)  # target texture
    jitter_bias: float = 0.05
    noise_sigma: float = 0.03

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.height < 16 or self.width < 16:
            raise ValueError(f"scene too small: {self.height}x{self.width}")
        if self.domain not in (SOURCE, TARGET):
            raise ValueError(f"unknown domain {self.domain!r}")
        if len(self.palette) < self.num_classes:
            raise ValueError("palette shorter than class count")


def _draw_shapes(rng: np.random.Generator, label: np.ndarray, spec: SceneSpec) -> None:
    H, W, L = spec.height, spec.width, spec.num_classes
    yy, xx = np.ogrid[:H, :W]
    n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    for _ in range(n):
        cls = int(rng.integers(3, L + 1)) if L >= 3 else 2
        kind = cls % 3  # shape family follows the class so classes stay visually distinct
        cx = int(rng.integers(4, W - 4))
        cy = int(rng.integers(H // 4, H - 4))
        size = int(rng.integers(4, max(5, min(H, W) // 4)))
        if kind == 0:  # upright box
            h2 = size + int(rng.integers(0, size))
            mask = (np.abs(xx - cx) <= size // 2 + 1) & (yy >= cy - h2) & (yy <= cy + size // 2)
        elif kind == 1:  # disc
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= size ** 2
        else:  # triangle pointing up
            mask = (yy <= cy) & (yy >= cy - size) & (np.abs(xx - cx) <= (yy - (cy - size)) * 0.7 + 1)
        label[mask] = cls


def generate_scene(seed: int, spec: SceneSpec) -> Sample:
    """Render one labeled scene. Pure function of (seed, spec)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    H, W, L = spec.height, spec.width, spec.num_classes

    label = np.full((H, W), 2, dtype=np.int64)  # ground everywhere
    horizon = int(rng.uniform(*spec.sky_frac) * H)
    label[:horizon] = 1  # sky band
    if L >= 3:
        _draw_shapes(rng, label, spec)

    palette = np.asarray(spec.palette[:L], dtype=np.float32)
    img = palette[label - 1].transpose(2, 0, 1).copy()  # [3,H,W]

    if spec.domain == SOURCE:
        img[:, ::spec.grid_step, :] *= spec.grid_gain
        img[:, :, ::spec.grid_step] *= spec.grid_gain
    else:
        gain = rng.uniform(*spec.jitter_gain, size=3).astype(np.float32)
        bias = rng.uniform(-spec.jitter_bias, spec.jitter_bias, size=3).astype(np.float32)
        img = img * gain[:, None, None] + bias[:, None, None]
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape).astype(np.float32)

    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    cond = ConditionId(0, "clean")
    return Sample(image=img, label=label, domain=spec.domain, condition=cond)


# ---------------------------------------------------------------------------
# condition transforms (labels are never touched)
# ---------------------------------------------------------------------------

def _fog(img: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    t = 1.0 - 0.6 * strength
    tone = np.asarray(FOG_TONE, dtype=np.float32)[:, None, None]
    return t * img + (1.0 - t) * tone


def _rain(img: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    # wet-atmosphere veil (a tint direction per-image gain jitter cannot mimic)
    # plus seeded oriented streaks
    H, W = img.shape[1:]
    t = 0.18 * strength
    tone = np.asarray(RAIN_TONE, dtype=np.float32)[:, None, None]
    out = (1.0 - t) * img + t * tone
    n = int(round(120.0 * strength * (H * W) / 4096.0))
    for _ in range(n):
        x0 = rng.uniform(0, W)
        y0 = rng.uniform(0, H)
        length = rng.uniform(0.15, 0.30) * H
        ang = np.deg2rad(rng.uniform(55.0, 75.0))
        gain = rng.uniform(0.20, 0.40)
        steps = max(2, int(length * 2))
        ts = np.linspace(0.0, length, steps)
        ys = np.clip((y0 + ts * np.sin(ang)).astype(int), 0, H - 1)
        xs = np.clip((x0 + ts * np.cos(ang)).astype(int), 0, W - 1)
        out[:, ys, xs] += gain
    return np.clip(out, 0.0, 1.0)


def _dusk(img: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    t = 1.0 - 0.5 * strength
    tone = np.asarray(DUSK_TONE, dtype=np.float32)[:, None, None]
    return t * img + (1.0 - t) * tone


_CONDITIONS = {
    "clean": lambda img, s, rng: img,
    "fog": _fog,
    "rain": _rain,
    "dusk": _dusk,
}


def condition_names() -> list[str]:
    return list(_CONDITIONS)


def apply_condition(img: np.ndarray, name: str, strength: float, seed: int) -> np.ndarray:
    """Apply a weather transform to an image in [0,1]. Deterministic in seed."""
    if name not in _CONDITIONS:
        raise ValueError(f"unknown condition {name!r}, known: {sorted(_CONDITIONS)}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0,1]")
    rng = np.random.default_rng(seed)
    out = _CONDITIONS[name](img.astype(np.float32), float(strength), rng)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# manifest + on-disk dataset
# ---------------------------------------------------------------------------

MANIFEST_FORMAT = "toyworld-manifest-v1"


@dataclass
class ManifestRecord:
    image: str
    label: str
    domain: str
    condition: ConditionId


@dataclass
class DatasetManifest:
    root: Path
    records: list[ManifestRecord]
    num_classes: int
    num_conditions: int  # conditions used in training (eval may reference more)
    split: str
    height: int
    width: int
    condition_names: dict[int, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)


def save_image(img: np.ndarray, path: Path) -> None:
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def save_label(label: np.ndarray, path: Path) -> None:
    Image.fromarray(label.astype(np.uint8), mode="L").save(path)


def load_label(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.int64)


def write_manifest(manifest: DatasetManifest, path: Path) -> None:
    lines = [
        f"format {MANIFEST_FORMAT}",
        f"height {manifest.height}",
        f"width {manifest.width}",
        f"classes {manifest.num_classes}",
        f"train_conditions {manifest.num_conditions}",
        f"split {manifest.split}",
    ]
    conds = dict(manifest.condition_names)
    for rec in manifest.records:
        conds.setdefault(rec.condition.index, rec.condition.name)
    for idx in sorted(conds):
        lines.append(f"condition {idx} {conds[idx]}")
    for rec in manifest.records:
        lines.append(f"sample {rec.image} {rec.label} {rec.domain} {rec.condition.index}")
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path: Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    header: dict[str, str] = {}
    cond_names: dict[int, str] = {}
    records: list[ManifestRecord] = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, rest = line.split(None, 1)
        if key == "condition":
            idx, name = rest.split()
            cond_names[int(idx)] = name
        elif key == "sample":
            img, lab, domain, cidx = rest.split()
            cidx = int(cidx)
            records.append(ManifestRecord(img, lab, domain, ConditionId(cidx, cond_names.get(cidx, str(cidx)))))
        else:
            header[key] = rest
    if header.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: unsupported manifest format {header.get('format')!r}")
    manifest = DatasetManifest(
        root=path.parent,
        records=records,
        num_classes=int(header["classes"]),
        num_conditions=int(header["train_conditions"]),
        split=header["split"],
        height=int(header["height"]),
        width=int(header["width"]),
        condition_names=cond_names,
    )
    for rec in records:
        for rel in (rec.image, rec.label):
            if not (manifest.root / rel).exists():
                raise FileNotFoundError(f"manifest {path} references missing file: {manifest.root / rel}")
    return manifest


@dataclass
class DataBuildConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 6
    conditions: tuple = ("clean", "fog", "rain")
    unseen_condition: str = "dusk"
    source_train: int = 600
    source_eval: int = 60
    target_train: int = 600          # split evenly over conditions, one scene per condition triple
    target_eval_per_condition: int = 150
    unseen_eval: int = 50
    strength_range: tuple = (0.4, 1.0)

    @property
    def num_conditions(self) -> int:
        return len(self.conditions)


def build_dataset(cfg: DataBuildConfig, out_root: Path, seed: int) -> dict[str, DatasetManifest]:
    """Generate and write the full toy dataset; returns manifests by split name.

    Target scenes are rendered once per scene seed and every train/eval
    condition is applied to the same base image, so sub-domains share content.
    """
    out_root = Path(out_root)
    (out_root / "images").mkdir(parents=True, exist_ok=True)
    (out_root / "labels").mkdir(parents=True, exist_ok=True)
    for name in cfg.conditions:
        if name not in _CONDITIONS:
            raise ValueError(f"unknown condition {name!r}")
    if cfg.unseen_condition not in _CONDITIONS:
        raise ValueError(f"unknown condition {cfg.unseen_condition!r}")

    src_spec = SceneSpec(cfg.height, cfg.width, cfg.num_classes, domain=SOURCE)
    tgt_spec = SceneSpec(cfg.height, cfg.width, cfg.num_classes, domain=TARGET)
    rng = np.random.default_rng(seed)
    manifests: dict[str, DatasetManifest] = {}

    def new_manifest(split: str) -> DatasetManifest:
        return DatasetManifest(
            root=out_root, records=[], num_classes=cfg.num_classes,
            num_conditions=cfg.num_conditions, split=split,
            height=cfg.height, width=cfg.width,
            condition_names={i: n for i, n in enumerate(cfg.conditions)},
        )

    def emit(manifest: DatasetManifest, tag: str, idx: int, sample: Sample) -> None:
        img_rel = f"images/{tag}_{idx:05d}.png"
        lab_rel = f"labels/{tag}_{idx:05d}.png"
        save_image(sample.image, out_root / img_rel)
        save_label(sample.label, out_root / lab_rel)
        manifest.records.append(ManifestRecord(img_rel, lab_rel, sample.domain, sample.condition))

    # source: clean synthetic renders only
    for split, count, base in (("source_train", cfg.source_train, 0), ("source_eval", cfg.source_eval, 10**6)):
        man = new_manifest("train" if split.endswith("train") else "eval")
        for i in range(count):
            emit(man, split, i, generate_scene(seed * 7 + base + i, src_spec))
        manifests[split] = man

    def conditioned(base_sample: Sample, cidx: int, cname: str, strength_seed: int) -> Sample:
        sub = np.random.default_rng(strength_seed)
        strength = 0.0 if cname == "clean" else float(sub.uniform(*cfg.strength_range))
        img = apply_condition(base_sample.image, cname, strength, strength_seed)
        return Sample(img, base_sample.label, TARGET, ConditionId(cidx, cname))

    # target train: scenes shared across conditions
    man = new_manifest("train")
    scenes = cfg.target_train // cfg.num_conditions
    i = 0
    for s in range(scenes):
        base = generate_scene(seed * 7 + 2 * 10**6 + s, tgt_spec)
        for cidx, cname in enumerate(cfg.conditions):
            emit(man, "target_train", i, conditioned(base, cidx, cname, seed * 13 + i))
            i += 1
    manifests["target_train"] = man

    # target eval: seen conditions on shared scenes, plus an unseen condition
    man = new_manifest("eval")
    i = 0
    for s in range(cfg.target_eval_per_condition):
        base = generate_scene(seed * 7 + 3 * 10**6 + s, tgt_spec)
        for cidx, cname in enumerate(cfg.conditions):
            emit(man, "target_eval", i, conditioned(base, cidx, cname, seed * 17 + i))
            i += 1
    unseen_id = cfg.num_conditions
    man.condition_names[unseen_id] = cfg.unseen_condition
    for s in range(cfg.unseen_eval):
        base = generate_scene(seed * 7 + 4 * 10**6 + s, tgt_spec)
        emit(man, "target_eval", i, conditioned(base, unseen_id, cfg.unseen_condition, seed * 17 + i))
        i += 1
    manifests["target_eval"] = man

    for split, manifest in manifests.items():
        write_manifest(manifest, out_root / f"{split}.manifest")
    return manifests


# ---------------------------------------------------------------------------
# in-memory batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray      # float32 [B,3,H,W]
    labels: np.ndarray      # int64 [B,H,W]
    domains: list[str]
    conditions: np.ndarray  # int64 [B]


class ManifestData:
    """Manifest with its images preloaded (desk scale -> everything fits in RAM)."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.images = np.stack([load_image(manifest.root / r.image) for r in manifest.records]) \
            if manifest.records else np.zeros((0, 3, manifest.height, manifest.width), np.float32)
        self.labels = np.stack([load_label(manifest.root / r.label) for r in manifest.records]) \
            if manifest.records else np.zeros((0, manifest.height, manifest.width), np.int64)
        self.conditions = np.array([r.condition.index for r in manifest.records], dtype=np.int64)
        self.domains = [r.domain for r in manifest.records]

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, condition: int) -> "ManifestData":
        keep = np.where(self.conditions == condition)[0]
        sub = ManifestData.__new__(ManifestData)
        sub.manifest = self.manifest
        sub.images = self.images[keep]
        sub.labels = self.labels[keep]
        sub.conditions = self.conditions[keep]
        sub.domains = [self.domains[k] for k in keep]
        return sub

    def batch_at(self, idx: np.ndarray) -> Batch:
        return Batch(self.images[idx], self.labels[idx],
                     [self.domains[i] for i in idx], self.conditions[idx])


def load_batches(data: ManifestData | DatasetManifest, batch_size: int,
                 shuffle_seed: int | None = None) -> Iterator[Batch]:
    """One epoch of batches covering each sample exactly once; seeded shuffle."""
    if isinstance(data, DatasetManifest):
        data = ManifestData(data)
    order = np.arange(len(data))
    if shuffle_seed is not None:
        np.random.default_rng(shuffle_seed).shuffle(order)
    for start in range(0, len(order), batch_size):
        yield data.batch_at(order[start:start + batch_size])


def cycle_batches(data: ManifestData, batch_size: int, seed: int) -> Iterator[Batch]:
    """Endless batch stream; reshuffles each pass with a derived seed."""
    epoch = 0
    while True:
        yield from load_batches(data, batch_size, shuffle_seed=seed + epoch)
        epoch += 1
