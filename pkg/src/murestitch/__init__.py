"""murestitch: multi-reference finetuning for generative image composition.

A conditional denoising diffusion model regenerates a foreground object into
a background image at a placement box, conditioned on reference images of
the object via cross-attention. A per-object finetuning procedure adapts a
pretrained base model using a handful of annotated photos.
"""

from .config import RunConfig
from .dataprep import (AnnotatedImage, BBox, CompositionSample, PerturbConfig,
                       PerturbParams, ReferenceImage, bbox_mask,
                       build_finetune_set, color_transfer, erase_bbox,
                       extract_foreground, perspective_perturb)
from .diffusion import (DenoiserInput, NoiseSchedule, forward_diffuse,
                        make_schedule, sample, soft_box_mask, training_loss,
                        unet_forward)
from .encoder import (ConditioningTokens, PatchEncoder, ReferenceTokens,
                      concat_references, encode_reference, encode_references)
from .estimator import MureStitch
from .evaluation import (LayoutIndex, MetricsReport, SyntheticSceneSpec,
                         bg_preservation, fg_fidelity, gen_synthetic_corpus,
                         run_reference_ablation, score_checkpoint,
                         seed_diversity, validate_murecom_layout)
from .finetune import (Checkpoint, TrainConfig, finetune_object,
                       load_checkpoint, pretrain_toy, save_checkpoint)
from .model import CompositionModel, ModelConfig, build_model
from .unet import ConditionalUNet, init_parameters

__version__ = "0.1.0"

__all__ = [
    "AnnotatedImage", "BBox", "Checkpoint", "CompositionModel",
    "CompositionSample", "ConditionalUNet", "ConditioningTokens",
    "DenoiserInput", "LayoutIndex", "MetricsReport", "ModelConfig",
    "MureStitch", "NoiseSchedule", "PatchEncoder", "PerturbConfig",
    "PerturbParams", "ReferenceImage", "ReferenceTokens", "RunConfig",
    "SyntheticSceneSpec", "TrainConfig", "bbox_mask", "bg_preservation",
    "build_finetune_set", "build_model", "color_transfer", "concat_references",
    "encode_reference", "encode_references", "erase_bbox", "extract_foreground",
    "fg_fidelity", "finetune_object", "forward_diffuse", "gen_synthetic_corpus",
    "init_parameters", "load_checkpoint", "make_schedule", "perspective_perturb",
    "pretrain_toy", "run_reference_ablation", "sample", "save_checkpoint",
    "score_checkpoint", "seed_diversity", "soft_box_mask", "training_loss",
    "unet_forward", "validate_murecom_layout", "__version__",
]
