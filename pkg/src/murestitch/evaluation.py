"""Synthetic corpus generation, dataset layout validation, and metrics.

The synthetic corpus renders procedurally textured polygons onto gradient
backgrounds with exact masks and tight boxes, giving the training and
acceptance experiments known ground truth. Metrics quantify masked
foreground fidelity (PSNR), background preservation (L1 outside the dilated
box), and variation across sampling seeds.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .dataprep import (AnnotatedImage, BBox, derive_seed, save_image,
                       save_mask)
from .validation import ensure_binary_mask, ensure_image, ensure_same_shape

PSNR_CAP_DB = 99.0


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Everything needed to render one scene of one procedural object."""

    object_id: int
    vertices: tuple[tuple[float, float], ...]  # unit-circle polygon
    base_color: tuple[float, float, float]
    texture_seed: int
    background_seed: int
    position: tuple[float, float]  # center, pixels
    scale: float                   # fraction of frame size
    rotation: float                # radians
    resolution: int

    def __post_init__(self) -> None:
        if not 0.2 <= self.scale <= 0.6:
            raise ValueError(f"scale must be in [0.2, 0.6], got {self.scale}")
        if self.resolution < 16:
            raise ValueError("resolution must be at least 16")


def _object_geometry(object_id: int, seed: int):
    """Base polygon, color, and texture seed for one object identity."""
    rng = np.random.default_rng(derive_seed(seed, object_id, 0xFACE))
    n = int(rng.integers(5, 9))
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, n))
    radii = rng.uniform(0.55, 1.0, n)
    verts = tuple((float(r * np.cos(a)), float(r * np.sin(a)))
                  for r, a in zip(radii, angles))
    hue = float(rng.uniform(0.0, 1.0))
    sat = float(rng.uniform(0.55, 0.95))
    val = float(rng.uniform(0.55, 0.95))
    color = colorsys.hsv_to_rgb(hue, sat, val)
    return verts, color, int(rng.integers(0, 2**31 - 1))


def make_scene_spec(object_id: int, scene_id: int, seed: int,
                    resolution: int) -> SyntheticSceneSpec:
    verts, color, texture_seed = _object_geometry(object_id, seed)
    rng = np.random.default_rng(derive_seed(seed, object_id, scene_id, 0x5CE2E))
    scale = float(rng.uniform(0.2, 0.6))
    rotation = float(rng.uniform(0.0, 2.0 * np.pi))
    # Keep the whole polygon at least 2 px inside the frame.
    radius = scale * resolution / 2.0
    low, high = radius + 2.0, resolution - radius - 3.0
    if low >= high:
        center = (resolution / 2.0, resolution / 2.0)
    else:
        center = (float(rng.uniform(low, high)), float(rng.uniform(low, high)))
    return SyntheticSceneSpec(
        object_id=object_id, vertices=verts, base_color=color,
        texture_seed=texture_seed,
        background_seed=derive_seed(seed, object_id, scene_id, 0xB6),
        position=center, scale=scale, rotation=rotation, resolution=resolution)


def _render_background(spec: SyntheticSceneSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.background_seed)
    res = spec.resolution
    c0 = rng.uniform(0.1, 0.9, 3)
    c1 = rng.uniform(0.1, 0.9, 3)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    ys, xs = np.mgrid[0:res, 0:res].astype(np.float64) / max(res - 1, 1)
    ramp = (xs * np.cos(theta) + ys * np.sin(theta) + 1.0) / 2.0
    img = c0[None, None] * (1.0 - ramp[:, :, None]) + c1[None, None] * ramp[:, :, None]
    coarse = rng.uniform(-1.0, 1.0, (4, 4, 3))
    zoom = np.array(Image.fromarray(
        ((coarse + 1.0) * 127.5).astype(np.uint8)).resize((res, res), Image.BILINEAR),
        dtype=np.float64) / 127.5 - 1.0
    img = img + 0.06 * zoom
    return np.clip(img, 0.0, 1.0)


def render_scene(spec: SyntheticSceneSpec) -> AnnotatedImage:
    """Rasterize the scene: background, textured polygon, exact mask, tight box."""
    res = spec.resolution
    background = _render_background(spec)
    cos_r, sin_r = np.cos(spec.rotation), np.sin(spec.rotation)
    radius = spec.scale * res / 2.0
    points = []
    for vx, vy in spec.vertices:
        rx = (vx * cos_r - vy * sin_r) * radius + spec.position[0]
        ry = (vx * sin_r + vy * cos_r) * radius + spec.position[1]
        points.append((rx, ry))
    mask_img = Image.new("L", (res, res), 0)
    ImageDraw.Draw(mask_img).polygon(points, fill=255)
    mask = (np.asarray(mask_img) >= 128).astype(np.float32)
    if not mask.any():
        raise ValueError(f"degenerate synthetic object {spec.object_id}")

    # Stripe texture in object-local coordinates so it rotates with the pose.
    trng = np.random.default_rng(spec.texture_seed)
    second = np.clip(np.asarray(spec.base_color) * trng.uniform(0.3, 0.6), 0.0, 1.0)
    freq = trng.uniform(2.0, 5.0)
    phase = trng.uniform(0.0, 2.0 * np.pi)
    ys, xs = np.mgrid[0:res, 0:res].astype(np.float64)
    u = ((xs - spec.position[0]) * cos_r + (ys - spec.position[1]) * sin_r) / radius
    stripe = 0.5 + 0.5 * np.sin(2.0 * np.pi * freq * u + phase)
    obj = (np.asarray(spec.base_color)[None, None] * (1.0 - stripe[:, :, None])
           + second[None, None] * stripe[:, :, None])

    pixels = np.where(mask[:, :, None] > 0, obj, background).astype(np.float32)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    bbox = BBox(int(cols[0]), int(rows[0]),
                int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))
    return AnnotatedImage(pixels=pixels, bbox=bbox, fg_mask=mask,
                          source_id=f"obj{spec.object_id}")


def gen_synthetic_corpus(num_objects: int, scenes_per_object: int, seed: int,
                         out_dir: str | Path, resolution: int = 64) -> Path:
    """Render the corpus to disk in the dataset layout, one fg dir per object.

    Every scene shows the same object in a fresh pose on a fresh background.
    Deterministic per seed: the same call produces byte-identical trees.
    """
    if num_objects < 1 or scenes_per_object < 1:
        raise ValueError("num_objects and scenes_per_object must be >= 1")
    out_dir = Path(out_dir)
    category = out_dir / "synthetic"
    category.mkdir(parents=True, exist_ok=True)
    for k in range(num_objects):
        obj_dir = category / f"fg{k}"
        obj_dir.mkdir(parents=True, exist_ok=True)
        for j in range(scenes_per_object):
            spec = make_scene_spec(k, j, seed, resolution)
            scene = render_scene(spec)
            save_image(obj_dir / f"img{j}.png", scene.pixels)
            save_mask(obj_dir / f"img{j}_mask.png", scene.fg_mask)
            with open(obj_dir / f"img{j}.json", "w") as fh:
                json.dump({"bbox": list(scene.bbox.as_tuple())}, fh)
    return out_dir


# ---------------------------------------------------------------------------
# Dataset layout validation
# ---------------------------------------------------------------------------

EXPECTED_BACKGROUNDS = 20
EXPECTED_OBJECTS = 3
EXPECTED_IMAGES_PER_OBJECT = 5


@dataclass
class CategoryIndex:
    backgrounds: int = 0
    objects: dict = field(default_factory=dict)  # fg dir name -> image count


@dataclass
class LayoutIndex:
    categories: dict = field(default_factory=dict)
    deviations: list = field(default_factory=list)

    @property
    def total_backgrounds(self) -> int:
        return sum(c.backgrounds for c in self.categories.values())

    @property
    def total_foreground_images(self) -> int:
        return sum(sum(c.objects.values()) for c in self.categories.values())

    def to_dict(self) -> dict:
        return {
            "categories": {
                name: {"backgrounds": c.backgrounds, "objects": dict(c.objects)}
                for name, c in self.categories.items()
            },
            "total_backgrounds": self.total_backgrounds,
            "total_foreground_images": self.total_foreground_images,
            "deviations": list(self.deviations),
        }


def _check_annotation(path: Path) -> None:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed annotation {path}: {exc}") from exc
    if "bbox" not in payload:
        raise ValueError(f"malformed annotation {path}: missing 'bbox'")


def validate_murecom_layout(root: str | Path) -> LayoutIndex:
    """Walk a dataset tree, count per-category content, flag deviations.

    Deviations from (20 backgrounds, 3 objects x 5 images) are reported but
    never fatal, so partial trees remain usable. Malformed annotation JSON
    raises with the offending path.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    index = LayoutIndex()
    for category in sorted(p for p in root.iterdir() if p.is_dir()):
        cat = CategoryIndex()
        bg_dir = category / "bg"
        if bg_dir.is_dir():
            for ann in sorted(bg_dir.glob("*.json")):
                _check_annotation(ann)
                if not ann.with_suffix(".png").exists():
                    index.deviations.append(
                        f"{category.name}: background {ann.stem} has no PNG")
                else:
                    cat.backgrounds += 1
            orphans = [p for p in bg_dir.glob("*.png")
                       if not p.with_suffix(".json").exists()]
            for orphan in orphans:
                index.deviations.append(
                    f"{category.name}: background {orphan.name} has no annotation")
        if cat.backgrounds != EXPECTED_BACKGROUNDS:
            index.deviations.append(
                f"{category.name}: expected {EXPECTED_BACKGROUNDS} backgrounds, "
                f"found {cat.backgrounds}")
        fg_dirs = sorted(p for p in category.glob("fg*") if p.is_dir())
        for obj_dir in fg_dirs:
            count = 0
            pngs = sorted(p for p in obj_dir.glob("*.png")
                          if not p.stem.endswith("_mask"))
            for png in pngs:
                ann = png.with_suffix(".json")
                if not ann.exists():
                    index.deviations.append(
                        f"{category.name}/{obj_dir.name}: {png.name} has no annotation")
                    continue
                _check_annotation(ann)
                count += 1
            cat.objects[obj_dir.name] = count
            if count != EXPECTED_IMAGES_PER_OBJECT:
                index.deviations.append(
                    f"{category.name}/{obj_dir.name}: expected "
                    f"{EXPECTED_IMAGES_PER_OBJECT} images, found {count}")
        if len(fg_dirs) != EXPECTED_OBJECTS:
            index.deviations.append(
                f"{category.name}: expected {EXPECTED_OBJECTS} objects, "
                f"found {len(fg_dirs)}")
        index.categories[category.name] = cat
    return index


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def fg_fidelity(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """PSNR in dB over masked pixels only; identical inputs cap at 99 dB."""
    ensure_image(pred, "pred")
    ensure_image(gt, "gt")
    ensure_binary_mask(mask, "mask")
    ensure_same_shape(pred, gt, "pred vs gt")
    if mask.shape != pred.shape[:2]:
        raise ValueError("mask shape does not match images")
    selected = mask > 0
    if not selected.any():
        raise ValueError("empty mask: no foreground pixels to score")
    diff = (pred.astype(np.float64) - gt.astype(np.float64))[selected]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(-10.0 * np.log10(mse), PSNR_CAP_DB)


def bg_preservation(pred: np.ndarray, background: np.ndarray,
                    mask_dilated: np.ndarray) -> float:
    """Mean absolute error over pixels strictly outside the dilated mask."""
    ensure_image(pred, "pred")
    ensure_image(background, "background")
    ensure_same_shape(pred, background, "pred vs background")
    mask_dilated = np.asarray(mask_dilated)
    if mask_dilated.shape != pred.shape[:2]:
        raise ValueError("mask shape does not match images")
    outside = mask_dilated == 0
    if not outside.any():
        raise ValueError("no background region: mask covers the whole image")
    diff = np.abs(pred.astype(np.float64) - background.astype(np.float64))
    return float(diff[outside].mean())


def seed_diversity(preds: list[np.ndarray], mask: np.ndarray) -> float:
    """Mean pairwise per-pixel RMSE inside the mask across seed outputs."""
    if len(preds) < 2:
        raise ValueError("need >= 2 predictions to measure seed diversity")
    ensure_binary_mask(mask, "mask")
    selected = mask > 0
    if not selected.any():
        raise ValueError("empty mask: no foreground pixels to score")
    for p in preds:
        ensure_image(p, "pred")
        if p.shape[:2] != mask.shape:
            raise ValueError("prediction shape does not match mask")
    total, pairs = 0.0, 0
    for i in range(len(preds)):
        for j in range(i + 1, len(preds)):
            diff = (preds[i].astype(np.float64) - preds[j].astype(np.float64))[selected]
            total += float(np.sqrt(np.mean(diff * diff)))
            pairs += 1
    return total / pairs


@dataclass
class MetricsReport:
    fg_psnr: float
    bg_l1: float
    seed_diversity: float | None
    per_sample: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "fg_psnr": self.fg_psnr,
            "bg_l1": self.bg_l1,
            "seed_diversity": self.seed_diversity,
            "per_sample": list(self.per_sample),
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def score_checkpoint(ckpt, scenes, seeds=(1, 2, 3), sample_steps: int = 50,
                     dilate: int = 4, feather: int = 4) -> MetricsReport:
    """Generate on each scene's erased background and score against it."""
    from .dataprep import RefProvenance, ReferenceImage, bbox_mask, erase_bbox, extract_foreground
    from .diffusion import sample, soft_box_mask

    ref_size = ckpt.model.config.ref_size
    refs = [
        ReferenceImage(
            pixels=extract_foreground(img.pixels, img.bbox, img.fg_mask, ref_size),
            provenance=RefProvenance(img.source_id, i, None))
        for i, img in enumerate(scenes)
    ]
    cond = ckpt.model.encode_refs(refs)
    per_sample, psnrs, l1s, divs = [], [], [], []
    for idx, scene in enumerate(scenes):
        h, w = scene.pixels.shape[:2]
        background = erase_bbox(scene.pixels, scene.bbox)
        mask = bbox_mask(scene.bbox, h, w)
        dilated = (soft_box_mask(scene.bbox, h, w, dilate, feather) > 0)
        outs = [sample(background, mask, cond, ckpt.model.unet, ckpt.schedule,
                       seed=s, steps=sample_steps, dilate=dilate,
                       feather=feather) for s in seeds]
        entry = {
            "scene": scene.source_id or str(idx),
            "fg_psnr": [fg_fidelity(o, scene.pixels, mask) for o in outs],
            "bg_l1": [bg_preservation(o, background,
                                      dilated.astype(np.float32)) for o in outs],
        }
        if len(outs) >= 2:
            entry["seed_diversity"] = seed_diversity(outs, mask)
            divs.append(entry["seed_diversity"])
        psnrs.extend(entry["fg_psnr"])
        l1s.extend(entry["bg_l1"])
        per_sample.append(entry)
    return MetricsReport(fg_psnr=float(np.mean(psnrs)),
                         bg_l1=float(np.mean(l1s)),
                         seed_diversity=float(np.mean(divs)) if divs else None,
                         per_sample=per_sample)


def run_reference_ablation(base, scenes, train_config, ks=(1, 5),
                           seeds=(1, 2, 3), sample_steps: int = 50,
                           perturb=None) -> dict:
    """Finetune identically configured models that differ only in reference
    count, score each on the held-in scenes, and return a comparative report.
    """
    from dataclasses import asdict

    from .finetune import finetune_object

    arms = {}
    for k in ks:
        ckpt = finetune_object(base, scenes, train_config, k_refs=k,
                               perturb=perturb)
        arms[f"k{k}"] = score_checkpoint(ckpt, scenes, seeds=seeds,
                                         sample_steps=sample_steps).to_dict()
    return {"arms": arms, "ks": list(ks), "train_config": asdict(train_config)}
