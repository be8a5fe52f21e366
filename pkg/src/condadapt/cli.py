"""Pipeline CLI: gen-data -> train-translator -> translate -> train-stage1
-> train-stage2 -> distill -> eval, plus ablation matrices.

Every command is idempotent given (config, seed), writes its resolved config
next to its outputs, and never touches another command's artifact directory.
Relative --out paths resolve under $CONDADAPT_RUNS when it is set.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import torch

from . import adversarial, evalkit, selftrain, toyworld, translator as tr
from .blocks import load_checkpoint, save_checkpoint
from .config import TrainConfig, apply_overrides, load_config, save_config, to_dict
from .segnet import CamSegmenter, MixSegmenter, build_segmenter
from .toyworld import DataBuildConfig, ManifestData, read_manifest

ENV_RUNS = "CONDADAPT_RUNS"


def _seed_all(seed: int) -> None:
    np.random.seed(seed)
    torch.manual_seed(seed)


def _resolve_out(out: str) -> Path:
    path = Path(out)
    root = os.environ.get(ENV_RUNS)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_cfg(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.set:
        apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.device is not None:
        cfg.device = args.device
    return cfg


def _data_cfg(cfg: TrainConfig) -> DataBuildConfig:
    d = cfg.data
    return DataBuildConfig(
        height=d.height, width=d.width, num_classes=d.num_classes,
        conditions=tuple(d.conditions), unseen_condition=d.unseen_condition,
        source_train=d.source_train, source_eval=d.source_eval,
        target_train=d.target_train, target_eval_per_condition=d.target_eval_per_condition,
        unseen_eval=d.unseen_eval, strength_range=(d.strength_min, d.strength_max),
    )


def _manifest(dir_or_file: str, default_name: str, hint: str) -> ManifestData:
    path = Path(dir_or_file)
    if path.is_dir():
        path = path / default_name
    if not path.exists():
        raise SystemExit(f"missing prerequisite: {path} not found — run `condadapt {hint}` first")
    return ManifestData(read_manifest(path))


def _ckpt_path(dir_or_file: str, default_name: str, hint: str) -> Path:
    path = Path(dir_or_file)
    if path.is_dir():
        path = path / default_name
    if not path.exists():
        raise SystemExit(f"missing prerequisite: {path} not found — run `condadapt {hint}` first")
    return path


def _build_from_ckpt(path: Path, kind: str):
    payload = load_checkpoint(path, kind)
    cfg = payload["config"]
    model = build_segmenter(cfg["variant"], cfg["num_classes"], cfg["num_conditions"],
                            cfg["feat_dim"], tuple(cfg["enc_widths"]))
    if kind == "adapted-segmenter":
        bank = adversarial.bank_for(model, cfg["num_classes"], cfg["num_conditions"])
        model.load_state_dict(payload["state"]["model"])
        bank.load_state_dict(payload["state"]["bank"])
        return model, bank, cfg
    model.load_state_dict(payload["state"])
    return model, None, cfg


def _seg_cfg_dict(cfg: TrainConfig, variant: str | None = None) -> dict:
    return {
        "variant": variant or cfg.model.variant,
        "num_classes": cfg.data.num_classes,
        "num_conditions": len(cfg.data.conditions),
        "feat_dim": cfg.model.feat_dim,
        "enc_widths": list(cfg.model.enc_widths),
    }


def _save_curve_plot(csv_path: Path, png_path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows: dict[str, list[tuple[int, float]]] = {}
    with open(csv_path) as fh:
        next(fh)
        for line in fh:
            step, name, value = line.strip().split(",")
            rows.setdefault(name, []).append((int(step), float(value)))
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, pts in sorted(rows.items()):
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=name, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)


def _save_miou_bars(report: evalkit.MetricReport, png_path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(report.per_condition)
    values = [report.per_condition[n].miou for n in names]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(names, values, color="#4878a8")
    ax.set_ylabel("mIoU")
    ax.set_ylim(0, 1)
    for i, v in enumerate(values):
        ax.text(i, v + 0.01, f"{v:.3f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve_out(args.out)
    _seed_all(cfg.seed)
    toyworld.build_dataset(_data_cfg(cfg), out, cfg.seed)
    save_config(cfg, out / "config.json")
    print(f"dataset written to {out}")
    return 0


def cmd_train_translator(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve_out(args.out)
    _seed_all(cfg.seed)
    source = _manifest(args.data, "source_train.manifest", "gen-data")
    target = _manifest(args.data, "target_train.manifest", "gen-data")
    k = len(cfg.data.conditions)

    if args.fseg:
        fseg_path = _ckpt_path(args.fseg, "fseg.ckpt", "train-translator")
        fseg, _, _ = _build_from_ckpt(fseg_path, "segmenter")
    else:
        # reference segmenter: single-head net supervised on the raw source
        fseg = MixSegmenter(cfg.data.num_classes, cfg.model.feat_dim, tuple(cfg.model.enc_widths))
        curves_f = tr.make_curve_writer(out / "fseg_curves.csv")
        adversarial.stage1_train(
            fseg, adversarial.DiscriminatorBank(cfg.data.num_classes, 0, with_joint=False),
            source, None, steps=cfg.translator.fseg_steps, batch_size=cfg.translator.batch_size,
            seed=cfg.seed, lambda_adv=0.0, lr=cfg.translator.fseg_lr, device=cfg.device,
            curve_writer=curves_f)
        curves_f.close()
    save_checkpoint(out / "fseg.ckpt", "segmenter", fseg.state_dict(), _seg_cfg_dict(cfg, "mix"))

    for p in fseg.parameters():
        p.requires_grad_(False)
    fseg.eval()

    gen = tr.ConditionGenerator(k, cfg.translator.gen_base)
    disc = tr.TranslationDiscriminator(k)
    curves = tr.make_curve_writer(out / "curves.csv")
    tr.train_translator(gen, disc, fseg, source, target,
                        steps=cfg.translator.steps, batch_size=cfg.translator.batch_size,
                        seed=cfg.seed, lambda_sc=cfg.translator.lambda_sc,
                        lr=cfg.translator.lr, cls_warmup_steps=cfg.translator.cls_warmup_steps,
                        device=cfg.device, curve_writer=curves)
    curves.close()
    save_checkpoint(out / "translator.ckpt", "translator",
                    {"generator": gen.state_dict(), "discriminator": disc.state_dict()},
                    {"num_conditions": k, "gen_base": cfg.translator.gen_base,
                     "conditions": list(cfg.data.conditions)})
    _save_curve_plot(out / "curves.csv", out / "curves.png")
    save_config(cfg, out / "config.json")
    print(f"translator artifacts written to {out}")
    return 0


def load_translator(path: Path) -> tuple[tr.ConditionGenerator, tr.TranslationDiscriminator, dict]:
    payload = load_checkpoint(path, "translator")
    cfg = payload["config"]
    gen = tr.ConditionGenerator(cfg["num_conditions"], cfg["gen_base"])
    disc = tr.TranslationDiscriminator(cfg["num_conditions"])
    gen.load_state_dict(payload["state"]["generator"])
    disc.load_state_dict(payload["state"]["discriminator"])
    return gen, disc, cfg


def cmd_translate(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve_out(args.out)
    _seed_all(cfg.seed)
    ckpt = _ckpt_path(args.translator, "translator.ckpt", "train-translator")
    gen, _, tcfg = load_translator(ckpt)
    source = _manifest(args.data, args.manifest, "gen-data")
    tr.write_stylized_dataset(gen, source, tcfg["conditions"], out, device=cfg.device)
    save_config(cfg, out / "config.json")
    print(f"stylized dataset written to {out}")
    return 0


def cmd_train_stage1(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve_out(args.out)
    _seed_all(cfg.seed)
    stylized = _manifest(args.stylized, args.train_manifest, "translate")
    target = _manifest(args.data, "target_train.manifest", "gen-data")
    sc = _seg_cfg_dict(cfg)
    model = build_segmenter(sc["variant"], sc["num_classes"], sc["num_conditions"],
                            sc["feat_dim"], tuple(sc["enc_widths"]))
    bank = adversarial.bank_for(model, cfg.data.num_classes, len(cfg.data.conditions))
    curves = tr.make_curve_writer(out / "curves.csv")
    s1 = cfg.stage1
    adversarial.stage1_train(model, bank, stylized, target, steps=s1.steps,
                             batch_size=s1.batch_size, seed=cfg.seed, lambda_adv=s1.lambda_adv,
                             lr=s1.lr, momentum=s1.momentum, weight_decay=s1.weight_decay,
                             poly_power=s1.poly_power, d_lr=s1.d_lr, dat=s1.dat,
                             grad_clip=s1.grad_clip, device=cfg.device, curve_writer=curves)
    curves.close()
    seg_cfg = _seg_cfg_dict(cfg)
    seg_cfg["tag"] = "M0"
    save_checkpoint(out / "m0.ckpt", "adapted-segmenter",
                    {"model": model.state_dict(), "bank": bank.state_dict()}, seg_cfg)
    _save_curve_plot(out / "curves.csv", out / "curves.png")
    save_config(cfg, out / "config.json")
    print(f"stage-1 checkpoint written to {out / 'm0.ckpt'}")
    return 0


def cmd_train_stage2(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve_out(args.out)
    _seed_all(cfg.seed)
    stylized = _manifest(args.stylized, args.train_manifest, "translate")
    target = _manifest(args.data, "target_train.manifest", "gen-data")
    m0_path = _ckpt_path(args.m0, "m0.ckpt", "train-stage1")
    teacher, teacher_bank, seg_cfg = _build_from_ckpt(m0_path, "adapted-segmenter")
    if not isinstance(teacher, CamSegmenter):
        raise SystemExit("stage 2 expects a cam-variant stage-1 checkpoint")
    student = copy.deepcopy(teacher)
    s2 = cfg.stage2
    curves = tr.make_curve_writer(out / "curves.csv")
    bank_out = selftrain.stage2_train(
        teacher, teacher_bank, student, stylized, target, steps=s2.steps,
        batch_size=s2.batch_size, seed=cfg.seed, lam_p=s2.lambda_p, lr=s2.lr,
        momentum=s2.momentum, weight_decay=s2.weight_decay, poly_power=s2.poly_power,
        d_lr=s2.d_lr, use_confidence=s2.use_confidence, use_hard_adv=s2.use_hard_adv,
        use_vote=s2.vote or None, source_ce_joint_only=s2.source_ce_joint_only,
        grad_clip=s2.grad_clip, device=cfg.device, curve_writer=curves)
    curves.close()
    seg_cfg = dict(seg_cfg)
    seg_cfg["tag"] = "M1"
    save_checkpoint(out / "m1.ckpt", "adapted-segmenter",
                    {"model": student.state_dict(), "bank": bank_out.state_dict()}, seg_cfg)
    _save_curve_plot(out / "curves.csv", out / "curves.png")
    save_config(cfg, out / "config.json")
    print(f"stage-2 checkpoint written to {out / 'm1.ckpt'}")
    return 0


def cmd_distill(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve_out(args.out)
    _seed_all(cfg.seed)
    stylized = _manifest(args.stylized, args.train_manifest, "translate")
    target = _manifest(args.data, "target_train.manifest", "gen-data")
    m1_path = _ckpt_path(args.m1, "m1.ckpt", "train-stage2")
    teacher, teacher_bank, seg_cfg = _build_from_ckpt(m1_path, "adapted-segmenter")
    student = MixSegmenter(seg_cfg["num_classes"], seg_cfg["feat_dim"], tuple(seg_cfg["enc_widths"]))
    d = cfg.distill
    curves = tr.make_curve_writer(out / "curves.csv")
    selftrain.distill_student(teacher, teacher_bank, student, stylized, target,
                              steps=d.steps, batch_size=d.batch_size, seed=cfg.seed,
                              lam_p=d.lambda_p, lr=d.lr, momentum=d.momentum,
                              weight_decay=d.weight_decay, poly_power=d.poly_power,
                              grad_clip=d.grad_clip, device=cfg.device, curve_writer=curves)
    curves.close()
    student_cfg = dict(seg_cfg)
    student_cfg["variant"] = "mix"
    student_cfg["tag"] = "student"
    save_checkpoint(out / "student.ckpt", "segmenter", student.state_dict(), student_cfg)
    _save_curve_plot(out / "curves.csv", out / "curves.png")
    save_config(cfg, out / "config.json")
    print(f"distilled checkpoint written to {out / 'student.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve_out(args.out)
    _seed_all(cfg.seed)
    data = _manifest(args.data, f"{args.split}.manifest", "gen-data")
    ckpt = Path(args.ckpt)
    if ckpt.is_dir():
        for name in ("m1.ckpt", "m0.ckpt", "student.ckpt", "fseg.ckpt"):
            if (ckpt / name).exists():
                ckpt = ckpt / name
                break
    if not ckpt.exists():
        raise SystemExit(f"missing prerequisite: checkpoint {ckpt} not found — train a model first")
    payload = load_checkpoint(ckpt)
    if payload["kind"] == "adapted-segmenter":
        model, bank, _ = _build_from_ckpt(ckpt, "adapted-segmenter")
    else:
        model, bank, _ = _build_from_ckpt(ckpt, "segmenter")

    report = evalkit.evaluate(model, data, mode=cfg.predict_mode, device=cfg.device)
    evalkit.write_metrics_csv(report, out / "metrics.csv")
    (out / "report.txt").write_text(evalkit.format_report(report) + "\n")
    _save_miou_bars(report, out / "miou_bars.png")
    if isinstance(model, CamSegmenter):
        joint_report = evalkit.evaluate(model, data, mode="joint", device=cfg.device)
        evalkit.write_metrics_csv(joint_report, out / "metrics_joint.csv")

    stats = {"miou": report.miou, "predict_mode": cfg.predict_mode}
    if report.seen is not None:
        stats["seen_miou"] = report.seen.miou
    if isinstance(model, CamSegmenter) and bank is not None:
        gap, corr = confidence_consistency(model, bank, data, device=cfg.device)
        stats["confidence_gap"] = gap
        stats["point_biserial"] = corr
    (out / "stats.json").write_text(json.dumps({k: round(v, 6) if isinstance(v, float) else v
                                                for k, v in stats.items()}, indent=2, sort_keys=True) + "\n")

    n_panels = min(args.panels, len(data))
    if n_panels:
        preds = evalkit.predict_labels(model, data.images[:n_panels], cfg.predict_mode, device=cfg.device)
        conf = pseudo = None
        if isinstance(model, CamSegmenter) and bank is not None:
            pseudo_t, conf_t = _packs_for_panels(model, bank, data.images[:n_panels],
                                                 cfg.stage2.lambda_p, cfg.device)
            pseudo, conf = pseudo_t, conf_t
        for i in range(n_panels):
            evalkit.write_panels(out / "panels", i, data.images[i], data.labels[i], preds[i],
                                 None if pseudo is None else pseudo[i],
                                 None if conf is None else conf[i])
    print(evalkit.format_report(report))
    save_config(cfg, out / "config.json")
    return 0


def confidence_consistency(model: CamSegmenter, bank, data: ManifestData,
                           device: str = "cpu", batch_size: int = 16):
    """Mean confidence gap (correct - incorrect pixels) and point-biserial r."""
    model.eval().to(device)
    bank.eval().to(device)
    confs, corrects = [], []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            x = torch.from_numpy(data.images[start:start + batch_size]).to(device)
            y = data.labels[start:start + batch_size]
            bundle = model(x)
            pack = selftrain.assign_pseudo_labels(bundle, 0.0, x.shape[-2:], bank.joint)
            conf = torch.nn.functional.interpolate(
                pack.confidence.unsqueeze(1), size=x.shape[-2:], mode="bilinear",
                align_corners=False).squeeze(1).cpu().numpy()
            pred = pack.pseudo_labels.cpu().numpy()
            keep = y > 0
            confs.append(conf[keep])
            corrects.append((pred == y)[keep])
    conf = np.concatenate(confs)
    correct = np.concatenate(corrects)
    gap = float(conf[correct].mean() - conf[~correct].mean()) if correct.any() and (~correct).any() else 0.0
    return gap, evalkit.point_biserial(conf, correct)


def _packs_for_panels(model, bank, images, lam_p, device):
    with torch.no_grad():
        x = torch.from_numpy(images).to(device)
        pack = selftrain.assign_pseudo_labels(model(x), lam_p, x.shape[-2:], bank.joint)
        conf = torch.nn.functional.interpolate(pack.confidence.unsqueeze(1), size=x.shape[-2:],
                                               mode="bilinear", align_corners=False).squeeze(1)
    return pack.pseudo_labels.cpu().numpy(), conf.cpu().numpy()


def cmd_dump_pseudo(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve_out(args.out)
    _seed_all(cfg.seed)
    target = _manifest(args.data, "target_train.manifest", "gen-data")
    m0_path = _ckpt_path(args.m0, "m0.ckpt", "train-stage1")
    model, bank, _ = _build_from_ckpt(m0_path, "adapted-segmenter")
    model.eval()
    (out / "labels").mkdir(parents=True, exist_ok=True)
    (out / "confidence").mkdir(parents=True, exist_ok=True)
    man = copy.deepcopy(target.manifest)
    man.root = out
    man.records = []
    with torch.no_grad():
        for start in range(0, len(target), 16):
            idx = np.arange(start, min(start + 16, len(target)))
            batch = target.batch_at(idx)
            x = torch.from_numpy(batch.images)
            pack = selftrain.assign_pseudo_labels(model(x), cfg.stage2.lambda_p,
                                                  x.shape[-2:], bank.joint)
            conf = torch.nn.functional.interpolate(pack.confidence.unsqueeze(1), size=x.shape[-2:],
                                                   mode="bilinear", align_corners=False).squeeze(1)
            for b, i in enumerate(idx):
                rec = target.manifest.records[i]
                lab_rel = f"labels/pseudo_{i:05d}.png"
                toyworld.save_label(pack.pseudo_labels[b].numpy(), out / lab_rel)
                conf_img = np.repeat(conf[b].numpy()[None], 3, axis=0)
                toyworld.save_image(conf_img, out / f"confidence/conf_{i:05d}.png")
                img_rel = os.path.relpath(target.manifest.root / rec.image, out)
                man.records.append(toyworld.ManifestRecord(img_rel, lab_rel, rec.domain, rec.condition))
    toyworld.write_manifest(man, out / "pseudo_train.manifest")
    save_config(cfg, out / "config.json")
    print(f"pseudo-label dump written to {out}")
    return 0


# ---------------------------------------------------------------------------
# ablation matrices
# ---------------------------------------------------------------------------

ABLATE_BLOCKS = ("heads", "adversarial", "self-training", "ambivalence", "lambda-p")


def _ensure_prereqs(cfg: TrainConfig, out: Path, args) -> dict[str, Path]:
    """Build dataset/translator/stylized/m0 inside the ablation dir when absent."""
    paths = {"data": out / "data", "translator": out / "translator",
             "stylized": out / "stylized", "m0": out / "m0"}
    base = ["--seed", str(cfg.seed), "--device", cfg.device]
    if args.config:
        base += ["--config", args.config]
    for kv in args.set or []:
        base += ["--set", kv]
    if not (paths["data"] / "target_train.manifest").exists():
        main(["gen-data", "--out", str(paths["data"]), *base])
    if not (paths["translator"] / "translator.ckpt").exists():
        main(["train-translator", "--data", str(paths["data"]), "--out", str(paths["translator"]), *base])
    if not (paths["stylized"] / "stylized_train.manifest").exists():
        main(["translate", "--data", str(paths["data"]), "--translator", str(paths["translator"]),
              "--out", str(paths["stylized"]), *base])
    if not (paths["m0"] / "m0.ckpt").exists():
        main(["train-stage1", "--data", str(paths["data"]), "--stylized", str(paths["stylized"]),
              "--out", str(paths["m0"]), *base])
    return paths


def _cell_eval_miou(out_dir: Path) -> float:
    stats = json.loads((out_dir / "stats.json").read_text())
    return stats.get("seen_miou", stats["miou"])


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve_out(args.out)
    _seed_all(cfg.seed)
    if args.block not in ABLATE_BLOCKS:
        raise SystemExit(f"unknown block {args.block!r}; choose from {ABLATE_BLOCKS}")
    paths = _ensure_prereqs(cfg, out, args)
    base = ["--seed", str(cfg.seed), "--device", cfg.device]
    if args.config:
        base += ["--config", args.config]
    for kv in args.set or []:
        base += ["--set", kv]
    data, stylized, m0 = str(paths["data"]), str(paths["stylized"]), str(paths["m0"])

    cells: list[tuple[str, list[list[str]]]] = []  # (name, list of command argvs)

    def stage2_cell(name: str, sets: list[str], m0_dir: str = m0):
        cell_dir = out / "cells" / name
        argv_train = ["train-stage2", "--data", data, "--stylized", stylized, "--m0", m0_dir,
                      "--out", str(cell_dir), *base] + [x for s in sets for x in ("--set", s)]
        argv_eval = ["eval", "--ckpt", str(cell_dir), "--data", data, "--out",
                     str(cell_dir / "eval"), *base]
        cells.append((name, [argv_train, argv_eval]))

    if args.block == "heads":
        for v in ("mix", "sep", "sm", "cam"):
            cell_dir = out / "cells" / v
            cells.append((v, [
                ["train-stage1", "--data", data, "--stylized", stylized, "--out", str(cell_dir),
                 *base, "--set", f"model.variant={v}"],
                ["eval", "--ckpt", str(cell_dir / "m0.ckpt"), "--data", data,
                 "--out", str(cell_dir / "eval"), *base],
            ]))
    elif args.block == "adversarial":
        dat_dir = out / "cells" / "dat-s1"
        cells.append(("dat-s1", [
            ["train-stage1", "--data", data, "--stylized", stylized, "--out", str(dat_dir),
             *base, "--set", "stage1.dat=true"],
            ["eval", "--ckpt", str(dat_dir / "m0.ckpt"), "--data", data,
             "--out", str(dat_dir / "eval"), *base],
        ]))
        cells.append(("csat-s1", [
            ["eval", "--ckpt", m0, "--data", data, "--out", str(out / "cells" / "csat-s1" / "eval"), *base],
        ]))
        stage2_cell("dat-s2", [], m0_dir=str(dat_dir))
        stage2_cell("csat-s2", [])
    elif args.block == "self-training":
        cells.append(("baseline", [
            ["eval", "--ckpt", m0, "--data", data, "--out", str(out / "cells" / "baseline" / "eval"), *base],
        ]))
        common = ["stage2.lambda_p=0.9", "stage2.use_confidence=false", "stage2.use_hard_adv=false"]
        stage2_cell("maxv", common + ["stage2.vote=maxv"])
        stage2_cell("meanv", common + ["stage2.vote=meanv"])
        stage2_cell("apla", common)
    elif args.block == "ambivalence":
        stage2_cell("plain-ce", ["stage2.use_confidence=false", "stage2.use_hard_adv=false"])
        stage2_cell("weighted-ce", ["stage2.use_confidence=true", "stage2.use_hard_adv=false"])
        stage2_cell("weighted-ce+hard-adv", ["stage2.use_confidence=true", "stage2.use_hard_adv=true"])
    elif args.block == "lambda-p":
        values = [float(v) for v in args.lambda_p.split(",")] if args.lambda_p else [0.5, 0.6, 0.7, 0.8, 0.9]
        for v in values:
            stage2_cell(f"lp{v:g}", [f"stage2.lambda_p={v}"])

    if args.jobs > 1:
        import concurrent.futures as cf
        with cf.ThreadPoolExecutor(max_workers=args.jobs) as pool:
            futs = []
            for name, argvs in cells:
                def run_cell(argvs=argvs):
                    for argv in argvs:
                        subprocess.run([sys.executable, "-m", "condadapt.cli", *argv], check=True)
                futs.append(pool.submit(run_cell))
            for f in futs:
                f.result()
    else:
        for name, argvs in cells:
            for argv in argvs:
                main(argv)

    rows = []
    for name, argvs in cells:
        eval_out = Path(argvs[-1][argvs[-1].index("--out") + 1])
        rows.append((name, _cell_eval_miou(eval_out)))
    with open(out / "summary.csv", "w") as fh:
        fh.write("cell,seen_miou\n")
        for name, value in rows:
            fh.write(f"{name},{value:.6f}\n")
    _summary_bars(rows, out / "summary.png")
    for name, value in rows:
        print(f"{name:<24}{value:.4f}")
    save_config(cfg, out / "config.json")
    return 0


def _summary_bars(rows, png_path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4, len(rows)), 3))
    ax.bar([r[0] for r in rows], [r[1] for r in rows], color="#4878a8")
    ax.set_ylabel("seen mIoU")
    ax.set_ylim(0, 1)
    plt.xticks(rotation=30, ha="right", fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config path (defaults used when omitted)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key config override, repeatable")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--device", default=None)
    p.add_argument("--out", required=True, help=f"artifact dir (relative paths resolve under ${ENV_RUNS})")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="condadapt", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the procedural two-domain dataset")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-translator", help="train the reference segmenter and the style translator")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--fseg", default=None, help="reuse an existing reference-segmenter checkpoint")
    p.set_defaults(fn=cmd_train_translator)

    p = sub.add_parser("translate", help="write the stylized source dataset (all conditions)")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--translator", required=True)
    p.add_argument("--manifest", default="source_train.manifest")
    p.set_defaults(fn=cmd_translate)

    p = sub.add_parser("train-stage1", help="adversarial alignment training (checkpoint M0)")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--stylized", required=True)
    p.add_argument("--train-manifest", default="stylized_train.manifest")
    p.set_defaults(fn=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="self-training with pseudo-labels (checkpoint M1)")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--stylized", required=True)
    p.add_argument("--train-manifest", default="stylized_train.manifest")
    p.add_argument("--m0", required=True)
    p.set_defaults(fn=cmd_train_stage2)

    p = sub.add_parser("distill", help="teacher-student distillation into a single-head net")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--stylized", required=True)
    p.add_argument("--train-manifest", default="stylized_train.manifest")
    p.add_argument("--m1", required=True)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval", help="metrics, per-condition tables, panels")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="target_eval")
    p.add_argument("--panels", type=int, default=8)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("dump-pseudo", help="write pseudo-labels + confidence maps as a dataset")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--m0", required=True)
    p.set_defaults(fn=cmd_dump_pseudo)

    p = sub.add_parser("ablate", help="run an ablation block and summarize")
    _add_common(p)
    p.add_argument("--block", required=True, choices=ABLATE_BLOCKS)
    p.add_argument("--lambda_p", default=None, help="comma list for the lambda-p block")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_ablate)

    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
