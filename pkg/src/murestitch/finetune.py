"""Training loops and checkpoint serialization.

``pretrain_toy`` trains a fresh model across every object of a corpus,
drawing a new reference count per object each epoch so one base model serves
any K at finetune time. ``finetune_object`` adapts a base checkpoint to one
object's images with fresh reference perturbations every epoch.

Checkpoints are single .npz archives: named little-endian float32 weight
arrays plus one JSON metadata entry (format tag, model config, schedule
parameters, config snapshot, step counter).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .dataprep import (AnnotatedImage, PerturbConfig, build_finetune_set,
                       derive_seed, load_object_dir)
from .diffusion import NoiseSchedule, make_schedule, training_loss
from .model import CompositionModel, ModelConfig, build_model

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "murestitch-ckpt-v1"

FINETUNE_SCOPES = ("denoiser_and_adaptor", "all")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    lr: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    finetune_scope: str = "denoiser_and_adaptor"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.finetune_scope not in FINETUNE_SCOPES:
            raise ValueError(
                f"finetune_scope must be one of {FINETUNE_SCOPES}, "
                f"got {self.finetune_scope!r}")


@dataclass
class Checkpoint:
    """In-memory checkpoint: model, its schedule, provenance, step counter."""

    model: CompositionModel
    schedule: NoiseSchedule
    config: dict
    step: int = 0
    loss_history: list[float] | None = None


def schedule_params(schedule: NoiseSchedule) -> dict:
    return {
        "timesteps": schedule.T,
        "beta_start": float(schedule.betas[0]),
        "beta_end": float(schedule.betas[-1]),
    }


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Write the checkpoint archive; weights stored as little-endian float32."""
    arrays = {}
    for name, tensor in ckpt.model.state_dict().items():
        arrays["param:" + name] = np.ascontiguousarray(
            tensor.detach().cpu().numpy().astype("<f4"))
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model": ckpt.model.config.to_dict(),
        "schedule": schedule_params(ckpt.schedule),
        "config": ckpt.config,
        "step": ckpt.step,
        "loss_history": ckpt.loss_history or [],
    }
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Rebuild a model from a checkpoint archive, bit-exact weights."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise ValueError(f"not a checkpoint archive: {path}")
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(
                f"unsupported checkpoint format {meta.get('format')!r} in {path}")
        model = CompositionModel(ModelConfig.from_dict(meta["model"]))
        state = {
            name[len("param:"):]: torch.from_numpy(np.array(data[name]))
            for name in data.files if name.startswith("param:")
        }
    model.load_state_dict(state, strict=True)
    schedule = make_schedule(meta["schedule"]["timesteps"],
                             meta["schedule"]["beta_start"],
                             meta["schedule"]["beta_end"])
    return Checkpoint(model=model, schedule=schedule, config=meta["config"],
                      step=int(meta["step"]),
                      loss_history=list(meta.get("loss_history", [])))


def trainable_parameters(model: CompositionModel, scope: str):
    """Parameter selection for a finetune scope.

    ``denoiser_and_adaptor`` freezes the encoder backbone and trains the
    U-Net plus the adaptor projection; ``all`` trains everything.
    """
    if scope == "all":
        return list(model.parameters())
    if scope == "denoiser_and_adaptor":
        return list(model.unet.parameters()) + list(model.encoder.adaptor.parameters())
    raise ValueError(f"unknown finetune scope {scope!r}")


def _batches(indices: np.ndarray, batch_size: int):
    for start in range(0, len(indices), batch_size):
        yield indices[start : start + batch_size]


def _train(model: CompositionModel, objects: list[list[AnnotatedImage]],
           config: TrainConfig, schedule: NoiseSchedule,
           perturb: PerturbConfig, params, start_step: int,
           k_refs: int | None, label: str) -> tuple[int, list[float]]:
    """Shared epoch loop. ``k_refs=None`` draws a fresh K per object and epoch."""
    total = sum(len(obj) for obj in objects)
    if config.batch_size > total:
        raise ValueError(
            f"batch_size {config.batch_size} exceeds corpus size {total}")
    for p in model.parameters():
        p.requires_grad_(False)
    for p in params:
        p.requires_grad_(True)
    optimizer = torch.optim.Adam(params, lr=config.lr)
    rng = np.random.default_rng(derive_seed(config.seed, 0xA11CE))
    step = start_step
    history = []
    for epoch in range(config.epochs):
        epoch_seed = derive_seed(config.seed, epoch)
        batches = []
        for oi, obj in enumerate(objects):
            k = int(rng.integers(1, len(obj) + 1)) if k_refs is None else k_refs
            samples = build_finetune_set(
                obj, k, derive_seed(epoch_seed, oi), perturb,
                ref_size=model.config.ref_size)
            order = rng.permutation(len(samples))
            for chunk in _batches(order, config.batch_size):
                batches.append([samples[c] for c in chunk])
        rng.shuffle(batches)
        losses = []
        for bi, batch in enumerate(batches):
            gen = torch.Generator().manual_seed(derive_seed(epoch_seed, 0x10EB, bi))
            loss = training_loss(model, batch, schedule, gen)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            step += 1
        mean_loss = float(np.mean(losses))
        history.append(mean_loss)
        logger.info("%s epoch %d/%d loss %.5f", label, epoch + 1, config.epochs,
                    mean_loss)
    for p in model.parameters():
        p.requires_grad_(True)
    return step, history


def load_corpus(root: str | Path) -> list[list[AnnotatedImage]]:
    """Load every object directory under ``<root>/<category>/fg*/``."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {root}")
    objects = []
    for category in sorted(p for p in root.iterdir() if p.is_dir()):
        for obj_dir in sorted(category.glob("fg*")):
            if obj_dir.is_dir():
                objects.append(load_object_dir(obj_dir))
    if not objects:
        raise ValueError(f"corpus {root} holds no object directories")
    return objects


def pretrain_toy(corpus_dir: str | Path, config: TrainConfig,
                 model_config: ModelConfig | None = None,
                 schedule: NoiseSchedule | None = None,
                 perturb: PerturbConfig | None = None,
                 resume_from: Checkpoint | None = None) -> Checkpoint:
    """Train a base model over a synthetic corpus.

    Each epoch rebuilds every object's samples with fresh perturbations and a
    freshly drawn reference count, so the base model learns to condition on
    anywhere from one to all available references.
    """
    objects = load_corpus(corpus_dir)
    perturb = perturb or PerturbConfig()
    if resume_from is not None:
        model = resume_from.model
        schedule = resume_from.schedule
        start_step = resume_from.step
    else:
        model_config = model_config or ModelConfig()
        schedule = schedule or make_schedule(1000)
        model = build_model(model_config, seed=derive_seed(config.seed, 0x1217))
        start_step = 0
    step, history = _train(model, objects, config, schedule, perturb,
                           list(model.parameters()), start_step,
                           k_refs=None, label="pretrain")
    return Checkpoint(model=model, schedule=schedule,
                      config={"train": asdict(config), "phase": "pretrain"},
                      step=step, loss_history=history)


def finetune_object(base: Checkpoint, images: list[AnnotatedImage] | str | Path,
                    config: TrainConfig, k_refs: int | None = None,
                    perturb: PerturbConfig | None = None) -> Checkpoint:
    """Adapt a base checkpoint to one object from its N annotated images.

    Every sample conditions on ``k_refs`` references (default: all N, the
    sample's own foreground included), re-perturbed each epoch. The base
    checkpoint is not modified; a deep copy is trained.
    """
    if not isinstance(images, list):
        images = load_object_dir(images)
    if not images:
        raise ValueError("need at least one annotated image to finetune")
    n = len(images)
    k = n if k_refs is None else k_refs
    if not 1 <= k <= n:
        raise ValueError(f"k_refs must be in [1, {n}], got {k}")
    perturb = perturb or PerturbConfig()

    model = CompositionModel(base.model.config)
    model.load_state_dict(base.model.state_dict())
    params = trainable_parameters(model, config.finetune_scope)
    step, history = _train(model, [images], config, base.schedule, perturb,
                           params, base.step, k_refs=k, label="finetune")
    return Checkpoint(model=model, schedule=base.schedule,
                      config={"train": asdict(config), "phase": "finetune",
                              "k_refs": k, "num_images": n},
                      step=step, loss_history=history)
