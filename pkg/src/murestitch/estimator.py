"""Scikit-learn style front end.

``MureStitch.fit`` adapts a (possibly pretrained) compositor to the handful
of annotated photos of one object; ``predict`` then regenerates that object
into new backgrounds at given placement boxes. Hyperparameters follow the
sklearn convention (stored verbatim, introspectable via ``get_params``), so
the model drops into pipelines, grid search, and ``clone``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataprep import (AnnotatedImage, BBox, PerturbConfig, RefProvenance,
                       ReferenceImage, bbox_mask, extract_foreground,
                       load_object_dir)
from .diffusion import make_schedule, sample
from .finetune import Checkpoint, TrainConfig, finetune_object, load_checkpoint
from .model import ModelConfig, build_model
from .validation import ensure_image


class MureStitch(BaseEstimator):
    """Diffusion compositor with per-object finetuning.

    Parameters mirror the pipeline configuration; architecture settings are
    only used when no ``base_checkpoint`` is given (a base checkpoint carries
    its own architecture).
    """

    def __init__(self, base_checkpoint=None, epochs: int = 150,
                 lr: float = 1e-4, batch_size: int = 4, seed: int = 0,
                 k_refs: int | None = None,
                 finetune_scope: str = "denoiser_and_adaptor",
                 image_size: int = 64, ref_size: int = 64, patch_size: int = 8,
                 embed_dim: int = 128, token_dim: int = 128,
                 encoder_depth: int = 2, encoder_heads: int = 4,
                 unet_channels: tuple[int, int, int] = (64, 128, 256),
                 time_dim: int = 256, unet_heads: int = 4,
                 timesteps: int = 1000, beta_start: float = 1e-4,
                 beta_end: float = 0.02, sample_steps: int = 50,
                 eta: float = 0.0, dilate: int = 4, feather: int = 4,
                 max_corner_jitter: float = 0.15,
                 gain_range: tuple[float, float] = (0.7, 1.3),
                 shift_range: tuple[float, float] = (-0.15, 0.15)):
        self.base_checkpoint = base_checkpoint
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.k_refs = k_refs
        self.finetune_scope = finetune_scope
        self.image_size = image_size
        self.ref_size = ref_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.token_dim = token_dim
        self.encoder_depth = encoder_depth
        self.encoder_heads = encoder_heads
        self.unet_channels = unet_channels
        self.time_dim = time_dim
        self.unet_heads = unet_heads
        self.timesteps = timesteps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.sample_steps = sample_steps
        self.eta = eta
        self.dilate = dilate
        self.feather = feather
        self.max_corner_jitter = max_corner_jitter
        self.gain_range = gain_range
        self.shift_range = shift_range

    # ------------------------------------------------------------------

    def _resolve_base(self) -> Checkpoint:
        if self.base_checkpoint is None:
            config = ModelConfig(
                image_size=self.image_size, ref_size=self.ref_size,
                patch_size=self.patch_size, embed_dim=self.embed_dim,
                token_dim=self.token_dim, encoder_depth=self.encoder_depth,
                encoder_heads=self.encoder_heads,
                unet_channels=tuple(self.unet_channels),
                time_dim=self.time_dim, unet_heads=self.unet_heads)
            schedule = make_schedule(self.timesteps, self.beta_start, self.beta_end)
            return Checkpoint(model=build_model(config, seed=self.seed),
                              schedule=schedule, config={"phase": "scratch"})
        if isinstance(self.base_checkpoint, Checkpoint):
            return self.base_checkpoint
        return load_checkpoint(self.base_checkpoint)

    def _perturb_config(self) -> PerturbConfig:
        return PerturbConfig(max_corner_jitter=self.max_corner_jitter,
                             gain_range=tuple(self.gain_range),
                             shift_range=tuple(self.shift_range))

    @staticmethod
    def _as_annotated(X) -> list[AnnotatedImage]:
        if isinstance(X, (str, Path)):
            return load_object_dir(X)
        items = list(X)
        if not items:
            raise ValueError("fit needs at least one annotated image")
        for item in items:
            if not isinstance(item, AnnotatedImage):
                raise ValueError(
                    "fit expects AnnotatedImage items or an object directory path")
        return items

    # ------------------------------------------------------------------

    def fit(self, X, y=None):
        """Finetune on the object's annotated images.

        ``X`` is a list of ``AnnotatedImage`` or a path to an object
        directory. Without a base checkpoint the model trains from scratch on
        the object alone, which only makes sense for overfit experiments.
        """
        images = self._as_annotated(X)
        base = self._resolve_base()
        train_cfg = TrainConfig(epochs=self.epochs, lr=self.lr,
                                batch_size=min(self.batch_size, len(images)),
                                seed=self.seed,
                                finetune_scope=self.finetune_scope)
        self.checkpoint_ = finetune_object(base, images, train_cfg,
                                           k_refs=self.k_refs,
                                           perturb=self._perturb_config())
        ref_size = self.checkpoint_.model.config.ref_size
        self.references_ = [
            ReferenceImage(
                pixels=extract_foreground(img.pixels, img.bbox, img.fg_mask,
                                          ref_size),
                provenance=RefProvenance(source_id=img.source_id,
                                         source_index=idx, params=None))
            for idx, img in enumerate(images)
        ]
        self.loss_history_ = list(self.checkpoint_.loss_history or [])
        return self

    def generate(self, background: np.ndarray, bbox: BBox,
                 seeds=(1, 2, 3, 4, 5)) -> list[np.ndarray]:
        """Composite the fitted object into ``background`` once per seed."""
        check_is_fitted(self, "checkpoint_")
        ensure_image(background, "background")
        bbox.validate_within(*background.shape[:2])
        mask = bbox_mask(bbox, *background.shape[:2])
        cond = self.checkpoint_.model.encode_refs(self.references_)
        return [
            sample(background, mask, cond, self.checkpoint_.model.unet,
                   self.checkpoint_.schedule, seed, steps=self.sample_steps,
                   eta=self.eta, dilate=self.dilate, feather=self.feather)
            for seed in seeds
        ]

    def predict(self, X) -> list[np.ndarray]:
        """One composite per (background, bbox) pair, using ``seed``."""
        check_is_fitted(self, "checkpoint_")
        outputs = []
        for item in X:
            background, bbox = item
            outputs.append(self.generate(background, bbox, seeds=(self.seed,))[0])
        return outputs
