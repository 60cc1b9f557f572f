"""Pixel- and patch-wise contrastive self-training for domain-adaptive
semantic segmentation, on a procedurally generated paired-domain benchmark.

The headline API is the sklearn-style :class:`DomainAdaptiveSegmenter`;
the ``pixpatch`` CLI wraps dataset generation, training, evaluation,
ablation sweeps, and the verification suites.
"""

__version__ = "0.1.0"

from .validation import IGNORE_LABEL, ValidationError  # noqa: E402
from .synth import DomainSpec, augment, generate_dataset, generate_domain, load_domain  # noqa: E402
from .geometry import (CorrespondenceMap, CropPair, Rect,  # noqa: E402
                       build_correspondence, rect_iou, sample_crop_pair)
from .mixing import MixResult, PseudoLabel, class_mix, pseudo_label  # noqa: E402
from .model import (EmaTeacher, ModelConfig, SegmentationModel,  # noqa: E402
                    build_model, ema_update)
from .losses import (ContrastConfig, LossReport, downsample_labels,  # noqa: E402
                     masked_cross_entropy, mixed_cross_entropy, patch_contrast,
                     pixel_contrast, source_cross_entropy, total_loss)
from .evaluation import ConfusionMatrix, mean_iou  # noqa: E402
from .trainer import TrainConfig, Trainer, create_trainer, trainer_from_checkpoint  # noqa: E402
from .estimator import DomainAdaptiveSegmenter  # noqa: E402
from .config import ExperimentConfig, default_config, resolve_config  # noqa: E402

__all__ = [
    "IGNORE_LABEL", "ValidationError", "DomainSpec", "augment",
    "generate_dataset", "generate_domain", "load_domain",
    "CorrespondenceMap", "CropPair", "Rect", "build_correspondence",
    "rect_iou", "sample_crop_pair", "MixResult", "PseudoLabel", "class_mix",
    "pseudo_label", "EmaTeacher", "ModelConfig", "SegmentationModel",
    "build_model", "ema_update", "ContrastConfig", "LossReport",
    "downsample_labels", "masked_cross_entropy", "mixed_cross_entropy",
    "patch_contrast", "pixel_contrast", "source_cross_entropy", "total_loss",
    "ConfusionMatrix", "mean_iou", "TrainConfig", "Trainer", "create_trainer",
    "trainer_from_checkpoint", "DomainAdaptiveSegmenter", "ExperimentConfig",
    "default_config", "resolve_config", "__version__",
]
