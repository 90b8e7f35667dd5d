from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from murestitch import (BBox, AnnotatedImage, PerturbConfig, PerturbParams,
                        bbox_mask, build_finetune_set, color_transfer,
                        erase_bbox, extract_foreground, perspective_perturb)
from murestitch.dataprep import (FILL_VALUE, derive_seed, load_object_dir,
                                 sample_perturb_params, save_image, save_mask)

from conftest import annotated, random_image

RNG = np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# bbox_mask
# ---------------------------------------------------------------------------

def test_bbox_mask_full_image_box():
    mask = bbox_mask(BBox(0, 0, 12, 9), 9, 12)
    assert np.array_equal(mask, np.ones((9, 12), dtype=np.float32))


def test_bbox_mask_counts_match_bruteforce_rasterization():
    # Independent oracle: per-pixel membership test.
    bbox = BBox(2, 3, 4, 5)
    mask = bbox_mask(bbox, 16, 16)
    expected = np.zeros((16, 16))
    for py in range(16):
        for px in range(16):
            if bbox.x <= px < bbox.x + bbox.w and bbox.y <= py < bbox.y + bbox.h:
                expected[py, px] = 1.0
    assert np.array_equal(mask, expected)
    assert int(mask.sum()) == 20


def test_bbox_mask_unit_box():
    mask = bbox_mask(BBox(0, 0, 1, 1), 8, 8)
    assert mask[0, 0] == 1.0
    assert mask.sum() == 1.0


def test_bbox_mask_out_of_bounds_rejected():
    with pytest.raises(ValueError, match="out of bounds"):
        bbox_mask(BBox(10, 0, 8, 4), 16, 16)


@given(st.data())
@settings(max_examples=50, deadline=None)
def test_bbox_mask_ones_count_equals_area(data):
    h = data.draw(st.integers(4, 40))
    w = data.draw(st.integers(4, 40))
    bw = data.draw(st.integers(1, w))
    bh = data.draw(st.integers(1, h))
    x = data.draw(st.integers(0, w - bw))
    y = data.draw(st.integers(0, h - bh))
    mask = bbox_mask(BBox(x, y, bw, bh), h, w)
    assert int(mask.sum()) == bw * bh


def test_bbox_invalid_geometry_rejected():
    with pytest.raises(ValueError):
        BBox(0, 0, 0, 4)
    with pytest.raises(ValueError):
        BBox(-1, 0, 4, 4)
    with pytest.raises(ValueError):
        BBox(0, 0, 2.5, 4)  # type: ignore[arg-type]


# ---------------------------------------------------------------------------
# erase_bbox
# ---------------------------------------------------------------------------

def test_erase_full_image_gives_uniform_fill():
    image = random_image(RNG, 8, 8)
    out = erase_bbox(image, BBox(0, 0, 8, 8))
    assert np.all(out == FILL_VALUE)


def test_erase_single_pixel_changes_exactly_one_position():
    image = random_image(RNG, 10, 10)
    image[image == FILL_VALUE] = 0.4  # avoid accidental no-op pixels
    out = erase_bbox(image, BBox(0, 0, 1, 1))
    changed = np.any(out != image, axis=-1)
    assert int(changed.sum()) == 1
    assert changed[0, 0]
    assert np.all(out[0, 0] == FILL_VALUE)


def test_erase_preserves_outside_exactly():
    image = random_image(RNG, 16, 16)
    bbox = BBox(3, 5, 6, 4)
    out = erase_bbox(image, bbox)
    mask = bbox_mask(bbox, 16, 16).astype(bool)
    assert np.array_equal(out[~mask], image[~mask])
    assert np.all(out[mask] == FILL_VALUE)


# ---------------------------------------------------------------------------
# extract_foreground
# ---------------------------------------------------------------------------

def test_extract_square_box_matching_resolution_is_exact_crop():
    image = random_image(RNG, 32, 32)
    bbox = BBox(4, 6, 16, 16)
    canvas = extract_foreground(image, bbox, None, ref_size=16)
    assert np.array_equal(canvas, image[6:22, 4:20])


def test_extract_letterboxes_wide_box_into_middle_band():
    # Oracle: hand-computed geometry for a 32x16 crop into a 64 canvas:
    # scale 2, resized to 64x32, vertical offset (64-32)//2 = 16.
    image = np.full((40, 60, 3), 0.25, dtype=np.float32)
    bbox = BBox(10, 10, 32, 16)
    canvas = extract_foreground(image, bbox, None, ref_size=64)
    assert np.all(canvas[16:48, :, :] == 0.25)
    assert np.all(canvas[:16, :, :] == FILL_VALUE)
    assert np.all(canvas[48:, :, :] == FILL_VALUE)


def test_extract_masked_pixels_take_fill():
    image = np.full((16, 16, 3), 0.9, dtype=np.float32)
    bbox = BBox(4, 4, 8, 8)
    fg = np.zeros((16, 16), dtype=np.float32)
    fg[6:10, 6:10] = 1.0
    canvas = extract_foreground(image, bbox, fg, ref_size=8)
    assert np.all(canvas[2:6, 2:6] == 0.9)
    assert np.all(canvas[:2, :] == FILL_VALUE)


def test_extract_all_zero_mask_is_degenerate():
    image = random_image(RNG, 16, 16)
    with pytest.raises(ValueError, match="degenerate foreground"):
        extract_foreground(image, BBox(2, 2, 6, 6),
                           np.zeros((16, 16), dtype=np.float32), ref_size=8)


# ---------------------------------------------------------------------------
# perspective_perturb
# ---------------------------------------------------------------------------

def _params(jitter, max_jitter=0.15, seed=0):
    return PerturbParams(corner_jitter=tuple(tuple(j) for j in jitter),
                         color_gain=(1.0, 1.0, 1.0), color_shift=(0.0, 0.0, 0.0),
                         rng_seed=seed, max_corner_jitter=max_jitter)


def test_zero_jitter_is_bitwise_identity():
    canvas = random_image(RNG, 64, 64)
    out = perspective_perturb(canvas, _params(np.zeros((4, 2))))
    assert np.array_equal(out, canvas)


def _solve_homography_oracle(src, dst):
    # Independent oracle: same mapping written as a null-space problem of the
    # 8x9 DLT matrix, solved with SVD rather than a linear solve.
    rows = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y, -u])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y, -v])
    _, _, vt = np.linalg.svd(np.asarray(rows, dtype=np.float64))
    H = vt[-1].reshape(3, 3)
    return H / H[2, 2]


def test_corner_mapping_matches_independent_solution():
    from murestitch.dataprep import UNIT_CORNERS, homography_from_corners

    rng = np.random.default_rng(77)
    for _ in range(20):
        jitter = rng.uniform(-0.15, 0.15, (4, 2))
        dst = UNIT_CORNERS + jitter
        H = homography_from_corners(UNIT_CORNERS, dst)
        H_oracle = _solve_homography_oracle(UNIT_CORNERS, dst)
        for corner, target in zip(UNIT_CORNERS, dst):
            for M in (H, H_oracle):
                p = M @ np.array([corner[0], corner[1], 1.0])
                assert np.allclose(p[:2] / p[2], target, atol=1e-6)
        assert np.allclose(H, H_oracle, atol=1e-6)


def test_jitter_beyond_configured_max_rejected():
    with pytest.raises(ValueError, match="exceeds configured"):
        _params([[0.2, 0.0], [0, 0], [0, 0], [0, 0]])


def test_degenerate_corner_collapse_rejected():
    # Collapse all target corners onto a line; allowed only by raising the max.
    canvas = random_image(RNG, 16, 16)
    jitter = np.array([[0.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, -1.0]])
    with pytest.raises(ValueError, match="degenerate warp"):
        perspective_perturb(canvas, _params(jitter, max_jitter=2.0))


def test_warp_fills_uncovered_regions():
    canvas = np.full((32, 32, 3), 1.0, dtype=np.float32)
    jitter = np.full((4, 2), 0.15)  # shift the whole square down-right
    out = perspective_perturb(canvas, _params(jitter))
    assert np.all(out[0, 0] == FILL_VALUE)
    assert out.max() == 1.0


# ---------------------------------------------------------------------------
# color_transfer
# ---------------------------------------------------------------------------

def test_color_transfer_identity():
    canvas = random_image(RNG, 16, 16)
    out = color_transfer(canvas, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
    assert np.array_equal(out, canvas)


def test_color_transfer_scales_channel_mean_exactly():
    rng = np.random.default_rng(5)
    canvas = rng.uniform(0.2, 0.7, (32, 32, 3)).astype(np.float64)
    out = color_transfer(canvas, (1.2, 1.0, 1.0), (0.0, 0.0, 0.0))
    # Unclipped by construction: 0.7 * 1.2 = 0.84 < 1.
    assert out[..., 0].mean() == pytest.approx(1.2 * canvas[..., 0].mean(), abs=1e-6)
    assert np.array_equal(out[..., 1:], canvas[..., 1:])


def test_color_transfer_mean_affine_law():
    rng = np.random.default_rng(6)
    canvas = rng.uniform(0.3, 0.6, (24, 24, 3)).astype(np.float64)
    gain, shift = (1.1, 0.9, 1.0), (0.1, -0.1, 0.05)
    out = color_transfer(canvas, gain, shift)
    for c in range(3):
        expected = gain[c] * canvas[..., c].mean() + shift[c]
        assert out[..., c].mean() == pytest.approx(expected, abs=1e-6)


def test_color_transfer_clips_at_one():
    canvas = np.full((8, 8, 3), 0.9, dtype=np.float32)
    out = color_transfer(canvas, (1.3, 1.3, 1.3), (0.1, 0.1, 0.1))
    assert np.all(out == 1.0)


def test_color_transfer_leaves_fill_pixels_alone():
    canvas = np.full((8, 8, 3), FILL_VALUE, dtype=np.float32)
    canvas[2:4, 2:4] = 0.8
    out = color_transfer(canvas, (1.2, 1.2, 1.2), (0.0, 0.0, 0.0))
    assert np.all(out[0, 0] == FILL_VALUE)
    expected = np.float32(np.float64(np.float32(0.8)) * 1.2)
    assert np.all(out[2:4, 2:4] == expected)


def test_color_transfer_rejects_out_of_range_gain():
    canvas = random_image(RNG, 8, 8)
    with pytest.raises(ValueError, match="outside allowed range"):
        color_transfer(canvas, (1.5, 1.0, 1.0), (0.0, 0.0, 0.0))


# ---------------------------------------------------------------------------
# build_finetune_set
# ---------------------------------------------------------------------------

def _object_images(n, size=32, seed=9):
    rng = np.random.default_rng(seed)
    return [annotated(rng, size=size) for _ in range(n)]


def test_build_set_counts_and_reference_counts():
    images = _object_images(5)
    samples = build_finetune_set(images, k_refs=5, rng_seed=11)
    assert len(samples) == 5
    assert all(len(s.references) == 5 for s in samples)


def test_build_set_single_image_self_reference():
    images = _object_images(1)
    samples = build_finetune_set(images, k_refs=1, rng_seed=11)
    assert len(samples) == 1
    assert samples[0].references[0].provenance.source_index == 0


def test_build_set_reference_order_starts_with_own_foreground():
    images = _object_images(4)
    samples = build_finetune_set(images, k_refs=2, rng_seed=3)
    for i, s in enumerate(samples):
        indices = [r.provenance.source_index for r in s.references]
        assert indices == [i, (i + 1) % 4]


def test_build_set_deterministic_byte_identical():
    images = _object_images(3)
    a = build_finetune_set(images, k_refs=3, rng_seed=42)
    b = build_finetune_set(images, k_refs=3, rng_seed=42)
    for sa, sb in zip(a, b):
        assert sa.background.tobytes() == sb.background.tobytes()
        assert sa.mask.tobytes() == sb.mask.tobytes()
        for ra, rb in zip(sa.references, sb.references):
            assert ra.pixels.tobytes() == rb.pixels.tobytes()


def test_build_set_different_seed_changes_references():
    images = _object_images(2)
    a = build_finetune_set(images, k_refs=2, rng_seed=1)
    b = build_finetune_set(images, k_refs=2, rng_seed=2)
    assert not np.array_equal(a[0].references[0].pixels, b[0].references[0].pixels)


def test_build_set_background_matches_ground_truth_outside_mask():
    images = _object_images(3)
    for s in build_finetune_set(images, k_refs=3, rng_seed=0):
        off = s.mask == 0
        assert np.array_equal(s.background[off], s.ground_truth[off])
        assert np.all(s.background[s.mask == 1] == FILL_VALUE)


def test_build_set_mask_is_box_rasterization():
    images = _object_images(2)
    samples = build_finetune_set(images, k_refs=1, rng_seed=0)
    for img, s in zip(images, samples):
        assert np.array_equal(s.mask, bbox_mask(img.bbox, *img.pixels.shape[:2]))


def test_build_set_k_refs_validation():
    images = _object_images(3)
    with pytest.raises(ValueError, match="k_refs"):
        build_finetune_set(images, k_refs=4, rng_seed=0)
    with pytest.raises(ValueError, match="k_refs"):
        build_finetune_set(images, k_refs=0, rng_seed=0)


def test_sample_perturb_params_within_config_and_deterministic():
    cfg = PerturbConfig(max_corner_jitter=0.1, gain_range=(0.8, 1.2),
                        shift_range=(-0.1, 0.1))
    a = sample_perturb_params(cfg, derive_seed(1, 2, 3))
    b = sample_perturb_params(cfg, derive_seed(1, 2, 3))
    assert a == b
    assert np.abs(np.asarray(a.corner_jitter)).max() <= 0.1
    assert min(a.color_gain) >= 0.8 and max(a.color_gain) <= 1.2


# ---------------------------------------------------------------------------
# dataset I/O
# ---------------------------------------------------------------------------

def test_object_dir_roundtrip(tmp_path):
    import json

    rng = np.random.default_rng(0)
    img = annotated(rng, size=16)
    save_image(tmp_path / "img0.png", img.pixels)
    (tmp_path / "img0.json").write_text(json.dumps({"bbox": list(img.bbox.as_tuple())}))
    save_mask(tmp_path / "img0_mask.png", img.fg_mask)
    loaded = load_object_dir(tmp_path)
    assert len(loaded) == 1
    assert loaded[0].bbox == img.bbox
    assert np.array_equal(loaded[0].fg_mask, img.fg_mask)
    # 8-bit quantization bound on the pixels themselves
    assert np.abs(loaded[0].pixels - img.pixels).max() <= 0.5 / 255 + 1e-7


def test_mask_load_thresholds_at_128(tmp_path):
    from PIL import Image

    from murestitch.dataprep import load_mask

    raw = np.array([[0, 127], [128, 255]], dtype=np.uint8)
    Image.fromarray(raw, mode="L").save(tmp_path / "m.png")
    mask = load_mask(tmp_path / "m.png")
    assert np.array_equal(mask, np.array([[0, 0], [1, 1]], dtype=np.float32))


def test_object_dir_missing_annotation_lists_files(tmp_path):
    rng = np.random.default_rng(0)
    save_image(tmp_path / "img0.png", random_image(rng, 8, 8))
    with pytest.raises(ValueError, match="img0.png"):
        load_object_dir(tmp_path)


def test_annotated_image_rejects_mask_outside_bbox():
    rng = np.random.default_rng(0)
    pixels = random_image(rng, 16, 16)
    mask = np.zeros((16, 16), dtype=np.float32)
    mask[0, 0] = 1.0
    with pytest.raises(ValueError, match="outside the bbox"):
        AnnotatedImage(pixels=pixels, bbox=BBox(4, 4, 8, 8), fg_mask=mask)
