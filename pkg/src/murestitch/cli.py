"""Command-line pipeline: synth, pretrain, finetune, generate, evaluate.

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure. Every
command writes a run manifest with the effective configuration next to its
artifacts, and identical flags plus seeds reproduce identical outputs.
"""

from __future__ import annotations

import logging
from pathlib import Path

import click
import numpy as np
from PIL import Image

from . import dataprep, evaluation
from .config import RunConfig, write_manifest
from .dataprep import BBox, RefProvenance, ReferenceImage
from .diffusion import make_schedule, sample, soft_box_mask
from .finetune import (Checkpoint, TrainConfig, finetune_object,
                       load_checkpoint, pretrain_toy, save_checkpoint)

logger = logging.getLogger(__name__)


def _validated(fn, *args, **kwargs):
    """Run a setup/validation step; domain errors become usage errors (exit 2)."""
    try:
        return fn(*args, **kwargs)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        raise click.UsageError(str(exc)) from exc


def _run(fn, *args, **kwargs):
    """Run an execution step; failures become runtime errors (exit 1)."""
    try:
        return fn(*args, **kwargs)
    except click.ClickException:
        raise
    except Exception as exc:
        raise click.ClickException(str(exc)) from exc


def _parse_bbox(_ctx, _param, value: str | None) -> BBox | None:
    if value is None:
        return None
    parts = value.split(",")
    if len(parts) != 4:
        raise click.BadParameter("bbox must be x,y,w,h")
    try:
        x, y, w, h = (int(p) for p in parts)
        return BBox(x, y, w, h)
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from exc


def _parse_seeds(_ctx, _param, value: str) -> list[int]:
    try:
        seeds = [int(p) for p in value.split(",") if p.strip() != ""]
    except ValueError as exc:
        raise click.BadParameter("seeds must be a comma-separated integer list") from exc
    if not seeds:
        raise click.BadParameter("need at least one seed")
    return seeds


config_option = click.option(
    "--config", "config_path", type=click.Path(), default=None,
    help="Flat JSON config with dotted keys; falls back to $MURESTITCH_CONFIG.")


@click.group()
@click.option("-q", "--quiet", is_flag=True, help="Suppress progress logging.")
def main(quiet: bool) -> None:
    """Desk-scale generative image composition pipeline."""
    logging.basicConfig(level=logging.WARNING if quiet else logging.INFO,
                        format="%(message)s")


@main.command()
@click.option("--objects", type=int, required=True, help="Number of distinct objects.")
@click.option("--scenes", type=int, required=True, help="Scenes per object.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@config_option
def synth(objects: int, scenes: int, seed: int, out_dir: str,
          config_path: str | None) -> None:
    """Generate a synthetic training corpus with exact masks and boxes."""
    cfg = _validated(RunConfig.load, config_path)
    if objects < 1 or scenes < 1:
        raise click.UsageError("--objects and --scenes must be >= 1")
    _run(evaluation.gen_synthetic_corpus, objects, scenes, seed, out_dir,
         resolution=cfg["data.image_size"])
    write_manifest(Path(out_dir) / "manifest.json", "synth", cfg, [seed],
                   {"objects": objects, "scenes": scenes},
                   [str(Path(out_dir) / "synthetic")])
    click.echo(f"wrote {objects * scenes} scenes to {out_dir}")


@main.command()
@click.option("--corpus", "corpus_dir", type=click.Path(), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--epochs", type=int, default=None, help="Override pretrain.epochs.")
@click.option("--seed", type=int, default=None, help="Override train.seed.")
@click.option("--resume", is_flag=True,
              help="Continue training from the checkpoint at --out.")
@config_option
def pretrain(corpus_dir: str, out_path: str, epochs: int | None,
             seed: int | None, resume: bool, config_path: str | None) -> None:
    """Train a base model on a corpus of annotated scenes."""
    cfg = _validated(RunConfig.load, config_path)
    train_cfg = _validated(
        cfg.train_config,
        epochs=cfg["pretrain.epochs"] if epochs is None else epochs, seed=seed)
    resume_from = None
    if resume:
        resume_from = _validated(load_checkpoint, out_path)
    if not Path(corpus_dir).is_dir():
        raise click.UsageError(f"corpus directory not found: {corpus_dir}")
    ckpt = _run(pretrain_toy, corpus_dir, train_cfg,
                model_config=cfg.model_config(),
                schedule=make_schedule(cfg["diffusion.timesteps"],
                                       cfg["diffusion.beta_start"],
                                       cfg["diffusion.beta_end"]),
                perturb=cfg.perturb_config(),
                resume_from=resume_from)
    _run(save_checkpoint, out_path, ckpt)
    write_manifest(Path(out_path).with_suffix(".manifest.json"), "pretrain",
                   cfg, [train_cfg.seed], {"corpus": str(corpus_dir)},
                   [str(out_path)])
    click.echo(f"pretrained {ckpt.step} steps, final loss "
               f"{ckpt.loss_history[-1]:.5f}, saved {out_path}")


@main.command()
@click.option("--base", "base_path", type=click.Path(), required=True)
@click.option("--object", "object_dir", type=click.Path(), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--epochs", type=int, default=None, help="Override train.epochs.")
@click.option("--k-refs", type=int, default=None,
              help="References per sample (default: all images).")
@click.option("--seed", type=int, default=None, help="Override train.seed.")
@config_option
def finetune(base_path: str, object_dir: str, out_path: str,
             epochs: int | None, k_refs: int | None, seed: int | None,
             config_path: str | None) -> None:
    """Finetune a base checkpoint on one object's annotated images."""
    cfg = _validated(RunConfig.load, config_path)
    train_cfg = _validated(cfg.train_config, epochs=epochs, seed=seed)
    base = _validated(load_checkpoint, base_path)
    images = _validated(dataprep.load_object_dir, object_dir)
    k = k_refs if k_refs is not None else cfg.k_refs()
    if k is not None and not 1 <= k <= len(images):
        raise click.UsageError(f"k_refs must be in [1, {len(images)}], got {k}")
    ckpt = _run(finetune_object, base, images, train_cfg, k_refs=k,
                perturb=cfg.perturb_config())
    _run(save_checkpoint, out_path, ckpt)
    write_manifest(Path(out_path).with_suffix(".manifest.json"), "finetune",
                   cfg, [train_cfg.seed],
                   {"base": str(base_path), "object": str(object_dir),
                    "k_refs": k or len(images)},
                   [str(out_path)])
    click.echo(f"finetuned to step {ckpt.step}, final loss "
               f"{ckpt.loss_history[-1]:.5f}, saved {out_path}")


def _clean_references(object_dir: str, ref_size: int) -> list[ReferenceImage]:
    images = dataprep.load_object_dir(object_dir)
    refs = []
    for idx, img in enumerate(images):
        canvas = dataprep.extract_foreground(img.pixels, img.bbox, img.fg_mask,
                                             ref_size)
        refs.append(ReferenceImage(
            pixels=canvas,
            provenance=RefProvenance(source_id=img.source_id,
                                     source_index=idx, params=None)))
    return refs


def _save_grid(path: Path, panels: list[np.ndarray], gap: int = 2) -> None:
    """Horizontal contact sheet: background | references | results."""
    height = max(p.shape[0] for p in panels)
    width = sum(p.shape[1] for p in panels) + gap * (len(panels) - 1)
    canvas = np.ones((height, width, 3), dtype=np.float32)
    x = 0
    for panel in panels:
        canvas[: panel.shape[0], x : x + panel.shape[1]] = panel
        x += panel.shape[1] + gap
    dataprep.save_image(path, canvas)


@main.command()
@click.option("--ckpt", "ckpt_path", type=click.Path(), required=True)
@click.option("--background", "background_path", type=click.Path(), required=True)
@click.option("--bbox", callback=_parse_bbox, required=True,
              help="Placement box as x,y,w,h.")
@click.option("--refs", "refs_dir", type=click.Path(), required=True,
              help="Directory of annotated reference images.")
@click.option("--seeds", callback=_parse_seeds, default="1,2,3,4,5",
              show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--steps", type=int, default=None, help="Override sample.steps.")
@click.option("--eta", type=float, default=None, help="Override sample.eta.")
@config_option
def generate(ckpt_path: str, background_path: str, bbox: BBox, refs_dir: str,
             seeds: list[int], out_dir: str, steps: int | None,
             eta: float | None, config_path: str | None) -> None:
    """Generate composites for each seed, plus a contact-sheet grid."""
    cfg = _validated(RunConfig.load, config_path)
    ckpt = _validated(load_checkpoint, ckpt_path)
    if not Path(background_path).exists():
        raise click.UsageError(f"background not found: {background_path}")
    background = dataprep.load_image(background_path)
    _validated(bbox.validate_within, *background.shape[:2])
    refs = _validated(_clean_references, refs_dir, ckpt.model.config.ref_size)
    cond = _validated(ckpt.model.encode_refs, refs)
    mask = dataprep.bbox_mask(bbox, *background.shape[:2])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sample_steps = cfg["sample.steps"] if steps is None else steps
    sample_eta = cfg["sample.eta"] if eta is None else eta
    results = []
    outputs = []
    for seed in seeds:
        composite = _run(sample, background, mask, cond, ckpt.model.unet,
                         ckpt.schedule, seed, steps=sample_steps,
                         eta=sample_eta, dilate=cfg["sample.dilate"],
                         feather=cfg["sample.feather"])
        target = out / f"seed{seed}.png"
        dataprep.save_image(target, composite)
        results.append(dataprep.load_image(target))
        outputs.append(str(target))
        logger.info("wrote %s", target)
    _save_grid(out / "grid.png", [background] + [r.pixels for r in refs] + results)
    outputs.append(str(out / "grid.png"))
    write_manifest(out / "manifest.json", "generate", cfg, seeds,
                   {"ckpt": str(ckpt_path), "background": str(background_path),
                    "bbox": list(bbox.as_tuple()), "refs": str(refs_dir),
                    "steps": sample_steps, "eta": sample_eta},
                   outputs)
    click.echo(f"wrote {len(seeds)} composites + grid to {out_dir}")


def _match_predictions(pred_dir: Path, gt_dir: Path):
    gt_pngs = sorted(p for p in gt_dir.glob("*.png") if not p.stem.endswith("_mask"))
    if not gt_pngs:
        raise ValueError(f"no ground-truth images in {gt_dir}")
    no_annotation = [p.name for p in gt_pngs if not p.with_suffix(".json").exists()]
    if no_annotation:
        raise ValueError("ground-truth images missing annotations: "
                         + ", ".join(no_annotation))
    pred_pngs = {p for p in pred_dir.glob("*.png") if not p.stem.endswith("_mask")}
    pairs, missing, matched = [], [], set()
    for gt in gt_pngs:
        preds = sorted(p for p in pred_pngs
                       if p.stem == gt.stem or p.stem.startswith(gt.stem + "__"))
        if not preds:
            missing.append(gt.name)
            continue
        matched.update(preds)
        pairs.append((gt, preds))
    unmatched = sorted(p.name for p in pred_pngs - matched)
    if missing or unmatched:
        raise ValueError(
            "mismatched file sets; missing predictions: "
            f"{', '.join(missing) or 'none'}; unmatched predictions: "
            f"{', '.join(unmatched) or 'none'}")
    return pairs


@main.command()
@click.option("--pred", "pred_dir", type=click.Path(), required=True)
@click.option("--gt", "gt_dir", type=click.Path(), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@config_option
def evaluate(pred_dir: str, gt_dir: str, out_path: str,
             config_path: str | None) -> None:
    """Score predictions against annotated ground truth, write a JSON report.

    Predictions match ground-truth stems exactly or as ``<stem>__<suffix>``;
    groups of several predictions per scene also get a seed-diversity score.
    """
    cfg = _validated(RunConfig.load, config_path)
    pred_path, gt_path = Path(pred_dir), Path(gt_dir)
    for p in (pred_path, gt_path):
        if not p.is_dir():
            raise click.UsageError(f"directory not found: {p}")
    pairs = _validated(_match_predictions, pred_path, gt_path)
    per_sample = []
    psnrs, l1s, diversities = [], [], []
    for gt_png, preds in pairs:
        gt = dataprep.load_image(gt_png)
        bbox = dataprep.load_bbox_annotation(gt_png.with_suffix(".json"))
        _validated(bbox.validate_within, *gt.shape[:2])
        mask = dataprep.bbox_mask(bbox, *gt.shape[:2])
        dilated = (soft_box_mask(bbox, *gt.shape[:2], dilate=cfg["sample.dilate"],
                                 feather=cfg["sample.feather"]) > 0).astype(np.float32)
        images = [dataprep.load_image(p) for p in preds]
        entry = {"gt": gt_png.name, "preds": [p.name for p in preds]}
        entry["fg_psnr"] = [evaluation.fg_fidelity(img, gt, mask) for img in images]
        entry["bg_l1"] = [evaluation.bg_preservation(img, gt, dilated)
                          for img in images]
        psnrs.extend(entry["fg_psnr"])
        l1s.extend(entry["bg_l1"])
        if len(images) >= 2:
            entry["seed_diversity"] = evaluation.seed_diversity(images, mask)
            diversities.append(entry["seed_diversity"])
        per_sample.append(entry)
    report = evaluation.MetricsReport(
        fg_psnr=float(np.mean(psnrs)),
        bg_l1=float(np.mean(l1s)),
        seed_diversity=float(np.mean(diversities)) if diversities else None,
        per_sample=per_sample)
    _run(report.save, out_path)
    write_manifest(Path(out_path).with_suffix(".manifest.json"), "evaluate",
                   cfg, [], {"pred": str(pred_dir), "gt": str(gt_dir)},
                   [str(out_path)])
    click.echo(f"fg_psnr {report.fg_psnr:.2f} dB, bg_l1 {report.bg_l1:.5f}, "
               f"report saved to {out_path}")


if __name__ == "__main__":
    main()
