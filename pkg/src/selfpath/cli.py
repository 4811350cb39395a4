"""Command-line entry point: ``selfpath <command> --config run.yaml``.

Each invocation writes into ``<out>/<command>-<hash>/`` where the hash covers
the command, the resolved config, the seed and the code version, so identical
inputs always land in (and overwrite) the same directory.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as cfgmod
from .errors import ConfigError, DataError, SelfPathError

log = logging.getLogger("selfpath")

COMMANDS = ("datagen", "train", "sweep", "heatmap", "pretext-preview")


def code_hash() -> str:
    """Git-style content hash over the package sources."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha1()
    for path in sorted(root.rglob("*.py")):
        data = path.read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        h.update(f"{path.relative_to(root).as_posix()} {blob}\n".encode())
    return h.hexdigest()


@dataclass
class RunRecord:
    command: str
    config: dict
    seed: int
    code_version: str
    outputs: dict = field(default_factory=dict)
    started: float = 0.0
    finished: float = 0.0

    @property
    def run_id(self) -> str:
        key = json.dumps({"command": self.command, "config": self.config, "seed": self.seed,
                          "code": self.code_version}, sort_keys=True, default=str)
        return hashlib.sha256(key.encode()).hexdigest()[:12]

    def directory(self, out: Path) -> Path:
        return Path(out) / f"{self.command}-{self.run_id}"

    def write(self, run_dir: Path) -> Path:
        payload = {
            "run_id": self.run_id, "command": self.command, "seed": self.seed,
            "code_version": self.code_version, "config": self.config,
            "outputs": {k: str(Path(v).relative_to(run_dir)) if Path(v).is_absolute() else str(v)
                        for k, v in sorted(self.outputs.items())},
            "wall_clock": {"started": self.started, "finished": self.finished,
                           "seconds": round(self.finished - self.started, 3)},
        }
        path = run_dir / "record.json"
        path.write_text(json.dumps(payload, indent=2, default=str) + "\n")
        return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _manifests(cfg: cfgmod.RunConfig, budget: Optional[float] = None, seed: Optional[int] = None):
    from .datagen import build_manifest

    d = cfg.data
    seed = cfg.seed if seed is None else seed
    budget = d.label_budget if budget is None else budget
    slides = cfgmod.source_slides(d)
    source = build_manifest(slides, d.patches_per_slide, budget, seed=seed, split_fractions=d.split_fractions,
                            granularity=d.granularity, placement_seed=d.placement_seed)
    if cfg.train.mode != "da":
        return slides, source, None
    t = d.target
    tslides = cfgmod.target_slides(d)
    target = build_manifest(tslides, t.patches_per_slide or d.patches_per_slide, 0.0, seed=seed,
                            split_fractions=t.split_fractions, placement_seed=d.placement_seed)
    return slides + tslides, source, target


def cmd_datagen(cfg: cfgmod.RunConfig, run_dir: Path) -> dict:
    from .datagen import export_patches, params_dict, save_patch

    slides, source, target = _manifests(cfg)
    out = {}
    for name, man in (("source", source), ("target", target)):
        if man is None:
            continue
        man.validate()
        out[f"{name}_manifest"] = man.save(run_dir / f"{name}_manifest.txt")
        export_patches(man, slides, run_dir / f"{name}_patches")
        out[f"{name}_patches"] = run_dir / f"{name}_patches"
    thumbs = run_dir / "slides"
    thumbs.mkdir(exist_ok=True)
    meta = []
    for s in slides:
        save_patch(s.image, thumbs / f"{s.slide_id}.png")
        meta.append({"slide_id": s.slide_id, "seed": s.seed, "domain": s.domain, "params": params_dict(s.params),
                     "tumor_fraction": float((s.class_field > 0).mean()), "nuclei": int(len(s.nuclei))})
    (run_dir / "slides.json").write_text(json.dumps(meta, indent=2) + "\n")
    out["slides"] = thumbs
    out["slide_metadata"] = run_dir / "slides.json"
    log.info("generated %d slides, %d source patches", len(slides), len(source.entries))
    return out


def _train_once(cfg: cfgmod.RunConfig, tasks=None, budget=None, seed=None):
    from .trainer import train_da, train_semi

    seed = cfg.seed if seed is None else seed
    tc = cfg.train_config(tasks=tasks, seed=seed, label_budget=budget)
    slides, source, target = _manifests(cfg, budget=budget, seed=seed)
    if tc.mode == "da":
        return train_da(tc, source, target, slides)
    return train_semi(tc, source, slides)


def cmd_train(cfg: cfgmod.RunConfig, run_dir: Path) -> dict:
    from .model import save_checkpoint

    result = _train_once(cfg)
    ckpt = run_dir / "checkpoint.pt"
    save_checkpoint(result.model, ckpt, result.config.tasks, extra={"seed": cfg.seed, **result.metrics()})
    with (run_dir / "history.jsonl").open("w") as fh:
        for rec in result.history:
            fh.write(json.dumps(rec) + "\n")
    (run_dir / "metrics.json").write_text(json.dumps(result.metrics(), indent=2) + "\n")
    log.info("best epoch %d, val AUC %.4f, test AUC %s", result.best_epoch, result.best_val_auc,
             "n/a" if result.test_auc is None else f"{result.test_auc:.4f}")
    return {"checkpoint": ckpt, "history": run_dir / "history.jsonl", "metrics": run_dir / "metrics.json"}


def cmd_sweep(cfg: cfgmod.RunConfig, run_dir: Path) -> dict:
    from .evalkit import budget_sweep, plot_budget_curves, write_results

    sw = cfg.sweep
    rows = {}
    for arm, tasks in sw.arms.items():
        def cell(budget, seed, tasks=tasks):
            r = _train_once(cfg, tasks=tasks, budget=budget, seed=seed)
            if r.test_auc is None:
                raise DataError("sweep cells need a test split")
            log.info("arm=%s budget=%g seed=%d test AUC %.4f", arm, budget, seed, r.test_auc)
            return r.test_auc
        rows[arm] = budget_sweep(cell, sw.budgets, sw.seeds)
    out = write_results(rows, sw.budgets, run_dir, title=f"test AUC by annotation budget ({cfg.train.mode})")
    out["plot"] = plot_budget_curves(rows, run_dir / "budget_curves.png")
    print((run_dir / "results.txt").read_text(), end="")
    return out


def _heatmap_slides(cfg: cfgmod.RunConfig):
    from dataclasses import replace

    from .datagen import generate_slide

    h = cfg.heatmap
    base = cfgmod.slide_params({**cfg.data.params, **h.params}, "heatmap.params")
    n_pos = int(round(h.slides * h.tumor_slide_fraction))
    slides, labels = [], []
    for i in range(h.slides):
        label = int(i < n_pos)
        params = base if label else replace(base, tumor_fraction=0.0)
        slides.append(generate_slide(params, seed=h.slide_seed + i, slide_id=f"wsi{i}", domain=cfg.data.domain))
        labels.append(label)
    return slides, np.array(labels)


def cmd_heatmap(cfg: cfgmod.RunConfig, run_dir: Path) -> dict:
    from .model import load_checkpoint
    from .wsiheat import (build_heatmap, classify_slides, evaluate_slides, extract_features, model_predictor,
                          render_overlay, write_feature_csv)

    h = cfg.heatmap
    if not h.checkpoint:
        raise ConfigError("heatmap.checkpoint is required")
    model = load_checkpoint(h.checkpoint)
    slides, labels = _heatmap_slides(cfg)
    predict = model_predictor(model)
    maps_dir = run_dir / "heatmaps"
    maps_dir.mkdir(exist_ok=True)
    vectors = []
    for s in slides:
        hm = build_heatmap(predict, s)
        hm.save(maps_dir / s.slide_id)
        if h.overlays:
            render_overlay(s.image, hm, maps_dir / f"{s.slide_id}_overlay.png")
        vectors.append(extract_features(hm))
    ids = [s.slide_id for s in slides]
    feats = write_feature_csv(run_dir / "features.csv", ids, vectors, labels.tolist())
    # stratified split: the first train_fraction of each class trains the forest
    train_idx, test_idx = [], []
    for c in (0, 1):
        idx = np.flatnonzero(labels == c)
        k = int(np.ceil(h.train_fraction * len(idx)))
        train_idx += idx[:k].tolist()
        test_idx += idx[k:].tolist()
    X = np.stack(vectors)
    scores = classify_slides(X[train_idx], labels[train_idx], X[test_idx], seed=h.forest_seed)
    auc, ap = evaluate_slides(scores, labels[test_idx])
    with (run_dir / "slide_scores.csv").open("w") as fh:
        fh.write("slide_id,label,score\n")
        for i, s in zip(test_idx, scores):
            fh.write(f"{ids[i]},{labels[i]},{float(s)!r}\n")
    (run_dir / "metrics.json").write_text(json.dumps({"slide_auc": auc, "average_precision": ap}, indent=2) + "\n")
    log.info("slide AUC %.4f, AP %.4f", auc, ap)
    return {"heatmaps": maps_dir, "features": feats, "scores": run_dir / "slide_scores.csv",
            "metrics": run_dir / "metrics.json"}


def cmd_pretext_preview(cfg: cfgmod.RunConfig, run_dir: Path) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .datagen import MAGNIFICATIONS, generate_slide, sample_pyramid
    from .pretext import CLASSIFICATION, PIXELWISE, make_batch

    p = cfg.preview
    tasks = [t for t in cfgmod.parse_tasks(p.tasks, "preview.tasks") if t.kind in (CLASSIFICATION, PIXELWISE)]
    slide = generate_slide(cfg.data.slide_params, seed=p.slide_seed, slide_id="preview", domain=cfg.data.domain)
    rng = np.random.default_rng(cfg.seed)
    margin = 64 * 8
    lo = margin // 2 + 1
    if min(slide.height, slide.width) <= 2 * lo:
        raise ConfigError(f"pretext-preview needs slides larger than {2 * lo} px to sample every magnification")
    cy = rng.integers(lo, slide.height - lo, p.samples)
    cx = rng.integers(lo, slide.width - lo, p.samples)
    pyramid = np.stack([np.stack([s.image for s in sample_pyramid(slide, (x, y), 128, MAGNIFICATIONS)])
                        for x, y in zip(cx, cy)])
    images = pyramid[:, MAGNIFICATIONS.index(10)]

    rows = [("input", images, None)]
    for t in tasks:
        b = make_batch(t, images, rng, pyramid=pyramid, stain=cfg.data.slide_params.stain)
        if t.kind == PIXELWISE:
            rows.append((f"{t.name} input", b.inputs, None))
            rows.append((f"{t.name} target", b.targets, None))
        else:
            rows.append((t.name, b.inputs, b.targets))
    fig, axes = plt.subplots(len(rows), p.samples, figsize=(2 * p.samples, 2 * len(rows)), squeeze=False)
    for i, (name, imgs, labels) in enumerate(rows):
        for j in range(p.samples):
            ax = axes[i, j]
            img = np.asarray(imgs[j], dtype=np.float32)
            if img.ndim == 3 and img.shape[0] in (1, 3) and img.shape[-1] not in (1, 3):
                img = np.moveaxis(img, 0, -1)
            ax.imshow(np.clip(img.squeeze(), 0, 1), cmap="gray" if img.squeeze().ndim == 2 else None,
                      vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if labels is not None:
                ax.set_title(f"r={int(labels[j])}", fontsize=8)
            if j == 0:
                ax.set_ylabel(name, fontsize=8)
    fig.tight_layout()
    path = run_dir / "pretext_preview.png"
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return {"preview": path}


HANDLERS = {
    "datagen": cmd_datagen,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "heatmap": cmd_heatmap,
    "pretext-preview": cmd_pretext_preview,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfpath", description="Multi-task self-supervised patch classification.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML or JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default="runs", help="parent directory for run outputs")
        p.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    return parser


def run(command: str, cfg: cfgmod.RunConfig, out) -> tuple:
    """Execute one command; returns (run directory, RunRecord)."""
    import torch

    torch.manual_seed(cfg.seed)
    record = RunRecord(command, cfg.snapshot(), cfg.seed, code_hash())
    run_dir = record.directory(Path(out))
    run_dir.mkdir(parents=True, exist_ok=True)
    record.started = time.time()
    record.outputs = HANDLERS[command](cfg, run_dir)
    record.finished = time.time()
    record.write(run_dir)
    return run_dir, record


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        run_dir, _ = run(args.command, cfg, args.out)
    except SelfPathError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    if not args.quiet:
        print(run_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
