from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from murestitch import BBox, AnnotatedImage, ModelConfig, bbox_mask, build_model


def random_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    return rng.uniform(0.0, 1.0, (h, w, 3)).astype(np.float32)


def annotated(rng: np.random.Generator, size: int = 32,
              bbox: BBox | None = None, with_mask: bool = True) -> AnnotatedImage:
    pixels = random_image(rng, size, size)
    if bbox is None:
        bbox = BBox(size // 4, size // 4, size // 2, size // 2)
    fg_mask = None
    if with_mask:
        fg_mask = np.zeros((size, size), dtype=np.float32)
        fg_mask[bbox.y + 1 : bbox.y + bbox.h - 1,
                bbox.x + 1 : bbox.x + bbox.w - 1] = 1.0
        if not fg_mask.any():
            fg_mask = bbox_mask(bbox, size, size)
    return AnnotatedImage(pixels=pixels, bbox=bbox, fg_mask=fg_mask,
                          source_id="synthetic-test")


def micro_model_config(size: int = 16) -> ModelConfig:
    """Miniature architecture: 43.5k parameters at size 16, token dim 16."""
    return ModelConfig(image_size=size, ref_size=size, patch_size=8,
                       embed_dim=16, token_dim=16, encoder_depth=1,
                       encoder_heads=2, unet_channels=(8, 12, 16),
                       time_dim=16, unet_heads=2)


def small_model_config(size: int = 32) -> ModelConfig:
    return ModelConfig(image_size=size, ref_size=size, patch_size=8,
                       embed_dim=32, token_dim=32, encoder_depth=2,
                       encoder_heads=2, unet_channels=(16, 24, 32),
                       time_dim=32, unet_heads=2)


@pytest.fixture
def micro_model():
    return build_model(micro_model_config(), seed=0)


_TINY_PNG = None


def tiny_png_bytes() -> bytes:
    global _TINY_PNG
    if _TINY_PNG is None:
        buf = io.BytesIO()
        Image.new("RGB", (2, 2), (127, 127, 127)).save(buf, format="PNG")
        _TINY_PNG = buf.getvalue()
    return _TINY_PNG


def build_mock_murecom(root: Path, categories: int = 32, backgrounds: int = 20,
                       objects: int = 3, images_per_object: int = 5) -> Path:
    """Write a dataset tree with placeholder images and valid annotations."""
    png = tiny_png_bytes()
    ann = json.dumps({"bbox": [0, 0, 1, 1]})
    for c in range(categories):
        cat = root / f"category{c:02d}"
        bg = cat / "bg"
        bg.mkdir(parents=True, exist_ok=True)
        for b in range(backgrounds):
            (bg / f"bg{b}.png").write_bytes(png)
            (bg / f"bg{b}.json").write_text(ann)
        for k in range(objects):
            obj = cat / f"fg{k}"
            obj.mkdir(parents=True, exist_ok=True)
            for j in range(images_per_object):
                (obj / f"img{j}.png").write_bytes(png)
                (obj / f"img{j}.json").write_text(ann)
                (obj / f"img{j}_mask.png").write_bytes(png)
    return root
