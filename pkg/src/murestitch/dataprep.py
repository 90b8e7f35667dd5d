"""Builds finetuning pairs and reference images from annotated photos.

One annotated photo of the target object yields:
  * a background image with the placement box erased to neutral gray,
  * the rasterized box mask,
  * a set of reference images (segmented foreground crops, each warped by a
    random perspective and recolored by a per-channel affine jitter),
  * the untouched photo as ground truth.

All operations are pure functions of their inputs and seeds; repeated calls
with the same arguments produce byte-identical results.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .validation import FILL_VALUE, ensure_binary_mask, ensure_image

MASK_THRESHOLD = 128


@dataclass(frozen=True)
class BBox:
    """Integer placement rectangle, (x, y) top-left corner, w/h in pixels."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self) -> None:
        for name in ("x", "y", "w", "h"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)):
                raise ValueError(f"bbox field {name} must be an integer, got {value!r}")
        if self.w < 1 or self.h < 1:
            raise ValueError(f"bbox must have positive size, got w={self.w} h={self.h}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"bbox origin must be non-negative, got ({self.x}, {self.y})")

    def validate_within(self, height: int, width: int) -> None:
        if self.x + self.w > width or self.y + self.h > height:
            raise ValueError(
                f"bbox ({self.x},{self.y},{self.w},{self.h}) out of bounds "
                f"for image {width}x{height}"
            )

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


@dataclass
class AnnotatedImage:
    """One photo of the target object with its placement box.

    ``fg_mask`` is optional; when present every 1-pixel must lie inside the
    box. Without it the full box crop counts as foreground.
    """

    pixels: np.ndarray
    bbox: BBox
    fg_mask: np.ndarray | None = None
    source_id: str = ""

    def __post_init__(self) -> None:
        ensure_image(self.pixels, "pixels")
        h, w = self.pixels.shape[:2]
        self.bbox.validate_within(h, w)
        if self.fg_mask is not None:
            ensure_binary_mask(self.fg_mask, "fg_mask")
            if self.fg_mask.shape != (h, w):
                raise ValueError(
                    f"fg_mask shape {self.fg_mask.shape} does not match image {h}x{w}"
                )
            inside = np.zeros((h, w), dtype=bool)
            x, y, bw, bh = self.bbox.as_tuple()
            inside[y : y + bh, x : x + bw] = True
            if np.any((self.fg_mask > 0) & ~inside):
                raise ValueError("fg_mask has foreground pixels outside the bbox")


@dataclass(frozen=True)
class PerturbConfig:
    """Ranges for the reference-image perturbations."""

    max_corner_jitter: float = 0.15
    gain_range: tuple[float, float] = (0.7, 1.3)
    shift_range: tuple[float, float] = (-0.15, 0.15)

    def __post_init__(self) -> None:
        if self.max_corner_jitter < 0:
            raise ValueError("max_corner_jitter must be non-negative")
        if self.gain_range[0] > self.gain_range[1] or self.shift_range[0] > self.shift_range[1]:
            raise ValueError("perturbation ranges must be (low, high) with low <= high")


@dataclass(frozen=True)
class PerturbParams:
    """Concrete draw of one reference perturbation.

    ``corner_jitter`` holds the 4 corner offsets (dx, dy) as fractions of the
    reference size, ordered top-left, top-right, bottom-right, bottom-left.
    """

    corner_jitter: tuple[tuple[float, float], ...]
    color_gain: tuple[float, float, float]
    color_shift: tuple[float, float, float]
    rng_seed: int
    max_corner_jitter: float = 0.15

    def __post_init__(self) -> None:
        jitter = np.asarray(self.corner_jitter, dtype=np.float64)
        if jitter.shape != (4, 2):
            raise ValueError(f"corner_jitter must be 4 (dx, dy) pairs, got shape {jitter.shape}")
        if np.abs(jitter).max() > self.max_corner_jitter + 1e-12:
            raise ValueError(
                f"corner jitter {np.abs(jitter).max():.4f} exceeds configured "
                f"max {self.max_corner_jitter}"
            )
        if len(self.color_gain) != 3 or len(self.color_shift) != 3:
            raise ValueError("color_gain and color_shift must each have 3 entries")


@dataclass(frozen=True)
class RefProvenance:
    source_id: str
    source_index: int
    params: PerturbParams | None


@dataclass
class ReferenceImage:
    """Square reference canvas: the object centered on neutral fill."""

    pixels: np.ndarray
    provenance: RefProvenance

    def __post_init__(self) -> None:
        ensure_image(self.pixels, "reference pixels")
        h, w = self.pixels.shape[:2]
        if h != w:
            raise ValueError(f"reference canvas must be square, got {h}x{w}")

    @property
    def resolution(self) -> int:
        return self.pixels.shape[0]


@dataclass
class CompositionSample:
    """One finetuning pair: background, box mask, references, ground truth."""

    background: np.ndarray
    mask: np.ndarray
    references: list[ReferenceImage]
    ground_truth: np.ndarray

    def __post_init__(self) -> None:
        ensure_image(self.background, "background")
        ensure_image(self.ground_truth, "ground_truth")
        ensure_binary_mask(self.mask, "mask")
        if self.background.shape != self.ground_truth.shape:
            raise ValueError("background and ground_truth shapes differ")
        if self.mask.shape != self.background.shape[:2]:
            raise ValueError("mask shape does not match images")
        if not self.references:
            raise ValueError("sample needs at least one reference")
        off = self.mask[:, :, None] == 0
        if not np.array_equal(self.background[np.broadcast_to(off, self.background.shape)],
                              self.ground_truth[np.broadcast_to(off, self.ground_truth.shape)]):
            raise ValueError("background must equal ground_truth outside the mask")


def bbox_mask(bbox: BBox, height: int, width: int) -> np.ndarray:
    """Rasterize ``bbox`` into an HxW {0,1} float mask."""
    bbox.validate_within(height, width)
    mask = np.zeros((height, width), dtype=np.float32)
    mask[bbox.y : bbox.y + bbox.h, bbox.x : bbox.x + bbox.w] = 1.0
    return mask


def erase_bbox(image: np.ndarray, bbox: BBox) -> np.ndarray:
    """Replace the box interior with neutral gray, leaving the rest untouched."""
    ensure_image(image, "image")
    h, w = image.shape[:2]
    bbox.validate_within(h, w)
    out = image.copy()
    out[bbox.y : bbox.y + bbox.h, bbox.x : bbox.x + bbox.w, :] = FILL_VALUE
    return out


def _bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                     fill: float | None) -> np.ndarray:
    """Sample ``image`` at float pixel coordinates.

    ``fill`` replaces out-of-source samples; with ``fill=None`` coordinates
    are clamped to the border instead. Math runs in float64, the caller
    decides the output dtype.
    """
    h, w = image.shape[:2]
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if fill is None:
        xs = np.clip(xs, 0.0, w - 1.0)
        ys = np.clip(ys, 0.0, h - 1.0)
        valid = np.ones(xs.shape, dtype=bool)
    else:
        valid = (xs >= 0.0) & (xs <= w - 1.0) & (ys >= 0.0) & (ys <= h - 1.0)
        xs = np.clip(xs, 0.0, w - 1.0)
        ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (xs - x0)[..., None]
    wy = (ys - y0)[..., None]
    img = image.astype(np.float64, copy=False)
    out = (img[y0, x0] * (1.0 - wx) * (1.0 - wy)
           + img[y0, x1] * wx * (1.0 - wy)
           + img[y1, x0] * (1.0 - wx) * wy
           + img[y1, x1] * wx * wy)
    if fill is not None:
        out = np.where(valid[..., None], out, fill)
    return out


def _resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Aspect-free bilinear resize with half-pixel centers, border clamped."""
    h, w = image.shape[:2]
    if (out_h, out_w) == (h, w):
        return image.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    grid_x, grid_y = np.meshgrid(xs, ys)
    return _bilinear_sample(image, grid_x, grid_y, fill=None).astype(image.dtype)


def extract_foreground(image: np.ndarray, bbox: BBox,
                       fg_mask: np.ndarray | None = None,
                       ref_size: int = 64) -> np.ndarray:
    """Crop the box, mask out non-object pixels, letterbox onto a square canvas.

    The crop is scaled to fit ``ref_size`` preserving aspect ratio and pasted
    centered; uncovered bands and masked-out pixels take the neutral fill.
    Raises ``ValueError`` on an all-zero foreground mask inside the box.
    """
    ensure_image(image, "image")
    h, w = image.shape[:2]
    bbox.validate_within(h, w)
    crop = image[bbox.y : bbox.y + bbox.h, bbox.x : bbox.x + bbox.w, :].copy()
    if fg_mask is not None:
        ensure_binary_mask(fg_mask, "fg_mask")
        sub = fg_mask[bbox.y : bbox.y + bbox.h, bbox.x : bbox.x + bbox.w]
        if not np.any(sub > 0):
            raise ValueError("degenerate foreground: mask has no pixels inside the bbox")
        crop = np.where(sub[:, :, None] > 0, crop, FILL_VALUE).astype(image.dtype)
    scale = min(ref_size / bbox.w, ref_size / bbox.h)
    new_w = max(1, round(bbox.w * scale))
    new_h = max(1, round(bbox.h * scale))
    resized = _resize_bilinear(crop, new_h, new_w)
    canvas = np.full((ref_size, ref_size, 3), FILL_VALUE, dtype=image.dtype)
    oy = (ref_size - new_h) // 2
    ox = (ref_size - new_w) // 2
    canvas[oy : oy + new_h, ox : ox + new_w, :] = resized
    return canvas


def homography_from_corners(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Solve for the 3x3 homography H with H @ [x, y, 1] ~ [u, v, 1].

    Raises ``ValueError`` when the correspondence is degenerate (singular
    system or |det H| < 1e-6).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise ValueError("homography needs exactly 4 source and 4 target corners")
    A = np.zeros((8, 8), dtype=np.float64)
    b = np.zeros(8, dtype=np.float64)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        A[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]
        A[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    try:
        p = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"degenerate warp: {exc}") from exc
    H = np.array([[p[0], p[1], p[2]], [p[3], p[4], p[5]], [p[6], p[7], 1.0]])
    if abs(np.linalg.det(H)) < 1e-6:
        raise ValueError("degenerate warp: homography determinant below 1e-6")
    return H


UNIT_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def perspective_perturb(canvas: np.ndarray, params: PerturbParams) -> np.ndarray:
    """Warp the canvas by the homography sending unit-square corners to the
    jittered corners, resampling bilinearly; off-source pixels take the fill.
    """
    ensure_image(canvas, "canvas")
    size = canvas.shape[0]
    if canvas.shape[1] != size:
        raise ValueError("canvas must be square")
    jitter = np.asarray(params.corner_jitter, dtype=np.float64)
    dst = UNIT_CORNERS + jitter
    H = homography_from_corners(UNIT_CORNERS, dst)
    H_inv = np.linalg.inv(H)
    # Output pixel centers in unit coordinates, inverse-mapped to the source.
    coords = (np.arange(size, dtype=np.float64) + 0.5) / size
    u, v = np.meshgrid(coords, coords)
    denom = H_inv[2, 0] * u + H_inv[2, 1] * v + H_inv[2, 2]
    src_x = (H_inv[0, 0] * u + H_inv[0, 1] * v + H_inv[0, 2]) / denom
    src_y = (H_inv[1, 0] * u + H_inv[1, 1] * v + H_inv[1, 2]) / denom
    xs = src_x * size - 0.5
    ys = src_y * size - 0.5
    out = _bilinear_sample(canvas, xs, ys, fill=FILL_VALUE)
    return out.astype(canvas.dtype)


def color_transfer(canvas: np.ndarray,
                   gain: tuple[float, float, float],
                   shift: tuple[float, float, float],
                   gain_range: tuple[float, float] = (0.7, 1.3),
                   shift_range: tuple[float, float] = (-0.15, 0.15)) -> np.ndarray:
    """Per-channel affine recoloring, clipped to [0, 1].

    Neutral-fill pixels (exactly gray fill on all channels) stay untouched so
    the letterbox never gets tinted.
    """
    ensure_image(canvas, "canvas")
    gain = np.asarray(gain, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    if gain.shape != (3,) or shift.shape != (3,):
        raise ValueError("gain and shift must each have 3 channel entries")
    if gain.min() < gain_range[0] or gain.max() > gain_range[1]:
        raise ValueError(f"gains {gain.tolist()} outside allowed range {gain_range}")
    if shift.min() < shift_range[0] or shift.max() > shift_range[1]:
        raise ValueError(f"shifts {shift.tolist()} outside allowed range {shift_range}")
    is_fill = np.all(canvas == FILL_VALUE, axis=-1, keepdims=True)
    recolored = np.clip(canvas * gain + shift, 0.0, 1.0)
    out = np.where(is_fill, canvas, recolored)
    return out.astype(canvas.dtype)


def derive_seed(*parts: int) -> int:
    """Deterministically mix integer parts into one 64-bit seed.

    Both 32-bit words carry entropy: torch's CPU generator is sensitive
    mainly to the low word, numpy to the full value.
    """
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(2)
    return (int(state[0]) << 32) | int(state[1])


def sample_perturb_params(config: PerturbConfig, seed: int) -> PerturbParams:
    """Draw one perturbation from the configured ranges."""
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(-config.max_corner_jitter, config.max_corner_jitter, size=(4, 2))
    gain = rng.uniform(config.gain_range[0], config.gain_range[1], size=3)
    shift = rng.uniform(config.shift_range[0], config.shift_range[1], size=3)
    return PerturbParams(
        corner_jitter=tuple(tuple(row) for row in jitter),
        color_gain=tuple(gain),
        color_shift=tuple(shift),
        rng_seed=seed,
        max_corner_jitter=config.max_corner_jitter,
    )


def make_reference(canvas: np.ndarray, params: PerturbParams,
                   perturb: PerturbConfig,
                   provenance: RefProvenance) -> ReferenceImage:
    """Apply one perturbation draw to an extracted foreground canvas."""
    warped = perspective_perturb(canvas, params)
    recolored = color_transfer(warped, params.color_gain, params.color_shift,
                               perturb.gain_range, perturb.shift_range)
    return ReferenceImage(pixels=recolored, provenance=provenance)


def build_finetune_set(images: list[AnnotatedImage], k_refs: int, rng_seed: int,
                       perturb: PerturbConfig | None = None,
                       ref_size: int = 64) -> list[CompositionSample]:
    """Build one CompositionSample per annotated image.

    Sample i's reference list starts with its own foreground and continues
    cyclically through the other images until ``k_refs`` references are
    collected, each perturbed with a seed derived from (rng_seed, i, j).
    """
    if not images:
        raise ValueError("need at least one annotated image")
    n = len(images)
    if not 1 <= k_refs <= n:
        raise ValueError(f"k_refs must be in [1, {n}], got {k_refs}")
    perturb = perturb or PerturbConfig()
    canvases = [
        extract_foreground(img.pixels, img.bbox, img.fg_mask, ref_size)
        for img in images
    ]
    samples = []
    for i, img in enumerate(images):
        h, w = img.pixels.shape[:2]
        refs = []
        for offset in range(k_refs):
            j = (i + offset) % n
            params = sample_perturb_params(perturb, derive_seed(rng_seed, i, j))
            prov = RefProvenance(source_id=images[j].source_id, source_index=j,
                                 params=params)
            refs.append(make_reference(canvases[j], params, perturb, prov))
        samples.append(CompositionSample(
            background=erase_bbox(img.pixels, img.bbox),
            mask=bbox_mask(img.bbox, h, w),
            references=refs,
            ground_truth=img.pixels.copy(),
        ))
    return samples


# ---------------------------------------------------------------------------
# Dataset directory layout:
#   <root>/<category>/fg<k>/img<j>.png  + img<j>.json  + optional img<j>_mask.png
#   <root>/<category>/bg/bg<m>.png      + bg<m>.json
# Annotation JSON carries {"bbox": [x, y, w, h]}.
# ---------------------------------------------------------------------------


def load_image(path: str | Path) -> np.ndarray:
    """Load an 8-bit PNG as float32 RGB in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Save a float [0, 1] image as 8-bit PNG."""
    ensure_image(image, "image")
    data = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255)
    Image.fromarray(data.astype(np.uint8), mode="RGB").save(path, format="PNG")


def load_mask(path: str | Path) -> np.ndarray:
    """Load an 8-bit mask PNG, thresholded at 128, as a float32 {0,1} array."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return (arr >= MASK_THRESHOLD).astype(np.float32)


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    ensure_binary_mask(mask, "mask")
    Image.fromarray((np.asarray(mask) * 255).astype(np.uint8), mode="L").save(
        path, format="PNG")


def load_bbox_annotation(path: str | Path) -> BBox:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed annotation {path}: {exc}") from exc
    if "bbox" not in payload or len(payload["bbox"]) != 4:
        raise ValueError(f"annotation {path} must carry a 4-element 'bbox'")
    x, y, w, h = (int(v) for v in payload["bbox"])
    return BBox(x, y, w, h)


def load_annotated_image(png_path: str | Path) -> AnnotatedImage:
    """Load one dataset entry: PNG plus sibling JSON bbox and optional mask."""
    png_path = Path(png_path)
    ann_path = png_path.with_suffix(".json")
    if not ann_path.exists():
        raise FileNotFoundError(f"missing annotation for {png_path}: {ann_path}")
    pixels = load_image(png_path)
    bbox = load_bbox_annotation(ann_path)
    mask_path = png_path.with_name(png_path.stem + "_mask.png")
    fg_mask = load_mask(mask_path) if mask_path.exists() else None
    return AnnotatedImage(pixels=pixels, bbox=bbox, fg_mask=fg_mask,
                          source_id=png_path.stem)


def load_object_dir(path: str | Path) -> list[AnnotatedImage]:
    """Load every annotated image in an object directory, sorted by name.

    Raises with the full list of offending files when annotations are missing.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"object directory not found: {path}")
    pngs = sorted(p for p in path.glob("*.png") if not p.stem.endswith("_mask"))
    if not pngs:
        raise ValueError(f"object directory {path} holds no images")
    missing = [str(p) for p in pngs if not p.with_suffix(".json").exists()]
    if missing:
        raise ValueError("missing annotations for: " + ", ".join(missing))
    return [load_annotated_image(p) for p in pngs]
