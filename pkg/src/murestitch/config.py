"""Run configuration: flat JSON with dotted keys.

A config file overrides the defaults below; CLI flags override both. Unknown
keys are rejected by name before any work starts. The env var
``MURESTITCH_CONFIG`` supplies a config file when no explicit path is given.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .dataprep import PerturbConfig
from .finetune import TrainConfig
from .model import ModelConfig

ENV_CONFIG = "MURESTITCH_CONFIG"
MANIFEST_FORMAT = "murestitch-run-v1"

DEFAULTS: dict[str, object] = {
    "data.image_size": 64,
    "data.ref_size": 64,
    "data.max_corner_jitter": 0.15,
    "data.gain_low": 0.7,
    "data.gain_high": 1.3,
    "data.shift_low": -0.15,
    "data.shift_high": 0.15,
    "encoder.patch_size": 8,
    "encoder.embed_dim": 128,
    "encoder.token_dim": 128,
    "encoder.depth": 2,
    "encoder.heads": 4,
    "unet.channels": [64, 128, 256],
    "unet.time_dim": 256,
    "unet.heads": 4,
    "diffusion.timesteps": 1000,
    "diffusion.beta_start": 1e-4,
    "diffusion.beta_end": 0.02,
    "sample.steps": 50,
    "sample.eta": 0.0,
    "sample.dilate": 4,
    "sample.feather": 4,
    "train.epochs": 150,
    "train.lr": 1e-4,
    "train.batch_size": 4,
    "train.seed": 0,
    "train.finetune_scope": "denoiser_and_adaptor",
    "train.k_refs": 0,  # 0 = use all available references
    "pretrain.epochs": 30,
}


def _check_value(key: str, value: object, default: object) -> object:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"config key {key!r} expects a bool, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"config key {key!r} expects an int, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"config key {key!r} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValueError(f"config key {key!r} expects a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"config key {key!r} expects a list, got {value!r}")
        return list(value)
    raise ValueError(f"config key {key!r} has unsupported type")


@dataclass
class RunConfig:
    """Validated flat configuration for a pipeline run."""

    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    def __getitem__(self, key: str):
        if key not in self.values:
            raise KeyError(f"unknown config key {key!r}")
        return self.values[key]

    def update(self, overrides: dict) -> "RunConfig":
        for key, value in overrides.items():
            if key not in DEFAULTS:
                raise ValueError(f"unknown config key {key!r}")
            self.values[key] = _check_value(key, value, DEFAULTS[key])
        return self

    @classmethod
    def load(cls, path: str | Path | None = None,
             overrides: dict | None = None) -> "RunConfig":
        """Defaults, then config file (explicit or env), then overrides."""
        cfg = cls()
        if path is None:
            env_path = os.environ.get(ENV_CONFIG)
            if env_path:
                path = env_path
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise FileNotFoundError(f"config file not found: {path}")
            with open(path) as fh:
                try:
                    payload = json.load(fh)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"malformed config {path}: {exc}") from exc
            if not isinstance(payload, dict):
                raise ValueError(f"config {path} must be a flat JSON object")
            cfg.update(payload)
        if overrides:
            cfg.update(overrides)
        return cfg

    # Typed sub-configs -----------------------------------------------------

    def perturb_config(self) -> PerturbConfig:
        return PerturbConfig(
            max_corner_jitter=self["data.max_corner_jitter"],
            gain_range=(self["data.gain_low"], self["data.gain_high"]),
            shift_range=(self["data.shift_low"], self["data.shift_high"]),
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self["data.image_size"],
            ref_size=self["data.ref_size"],
            patch_size=self["encoder.patch_size"],
            embed_dim=self["encoder.embed_dim"],
            token_dim=self["encoder.token_dim"],
            encoder_depth=self["encoder.depth"],
            encoder_heads=self["encoder.heads"],
            unet_channels=tuple(self["unet.channels"]),
            time_dim=self["unet.time_dim"],
            unet_heads=self["unet.heads"],
        )

    def train_config(self, epochs: int | None = None,
                     seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            epochs=self["train.epochs"] if epochs is None else epochs,
            lr=self["train.lr"],
            batch_size=self["train.batch_size"],
            seed=self["train.seed"] if seed is None else seed,
            finetune_scope=self["train.finetune_scope"],
        )

    def k_refs(self) -> int | None:
        k = self["train.k_refs"]
        return None if k == 0 else k

    def to_dict(self) -> dict:
        return dict(self.values)


def write_manifest(path: str | Path, command: str, config: RunConfig,
                   seeds: list[int], inputs: dict, outputs: list[str]) -> None:
    """Record the effective configuration next to a command's artifacts."""
    manifest = {
        "format": MANIFEST_FORMAT,
        "command": command,
        "config": config.to_dict(),
        "seeds": list(seeds),
        "inputs": dict(inputs),
        "outputs": list(outputs),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
