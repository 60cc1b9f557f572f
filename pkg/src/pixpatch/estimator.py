"""Scikit-learn style estimator wrapping the adaptation trainer.

``DomainAdaptiveSegmenter`` exposes the whole pipeline through the familiar
``fit`` / ``predict`` / ``score`` surface (with ``get_params``/``set_params``
via ``BaseEstimator``), so it composes with sklearn tooling such as ``clone``
and parameter grids. ``fit`` consumes a labeled source batch plus an unlabeled
target batch; ``predict`` segments new images with the trained student; the
projection heads used during training play no part in prediction.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .evaluation import ConfusionMatrix
from .losses import ContrastConfig
from .model import ModelConfig
from .trainer import (TrainConfig, create_trainer, model_from_checkpoint,
                      predict_labels, predict_scores)
from .validation import (ValidationError, as_image_batch, as_label_batch,
                         check_paired, require)


class DomainAdaptiveSegmenter(BaseEstimator):
    """Self-training segmenter with pixel- and patch-level contrast.

    Parameters mirror the flat experiment configuration; all have working
    desk-scale defaults. ``alpha`` and ``beta`` weight the pixel and patch
    contrastive terms and ``enable_pixel``/``enable_patch`` switch them for
    ablations.
    """

    def __init__(self, class_count: int = 5, iterations: int = 4000,
                 batch_size: int = 4, learning_rate: float = 1e-3,
                 warmup: int = 150, weight_decay: float = 0.01,
                 alpha: float = 0.1, beta: float = 0.1,
                 temperature: float = 0.1, confidence_threshold: float = 0.968,
                 ema_momentum: float = 0.999, patch_size: int = 48,
                 resize_min: float = 1.0, resize_max: float = 2.0,
                 iou_min: float = 0.1, iou_max: float = 1.0,
                 anchors_per_class: int = 32, hard_fraction: float = 0.1,
                 cross_batch: bool = True, denominator: str = "infonce",
                 enable_pixel: bool = True, enable_patch: bool = True,
                 enable_target: bool = True, jitter: float = 0.2,
                 blur_sigma: float = 0.8, augment_mixed: bool = True,
                 mixed_cell_ignore: bool = False, pixel_on_mixed: bool = False,
                 teacher_init: str = "copy", widths: tuple = (32, 64, 128),
                 blocks: int = 1, embed_dim: int = 64, eval_every: int = 500,
                 seed: int = 0, run_dir: str | None = None):
        self.class_count = class_count
        self.iterations = iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warmup = warmup
        self.weight_decay = weight_decay
        self.alpha = alpha
        self.beta = beta
        self.temperature = temperature
        self.confidence_threshold = confidence_threshold
        self.ema_momentum = ema_momentum
        self.patch_size = patch_size
        self.resize_min = resize_min
        self.resize_max = resize_max
        self.iou_min = iou_min
        self.iou_max = iou_max
        self.anchors_per_class = anchors_per_class
        self.hard_fraction = hard_fraction
        self.cross_batch = cross_batch
        self.denominator = denominator
        self.enable_pixel = enable_pixel
        self.enable_patch = enable_patch
        self.enable_target = enable_target
        self.jitter = jitter
        self.blur_sigma = blur_sigma
        self.augment_mixed = augment_mixed
        self.mixed_cell_ignore = mixed_cell_ignore
        self.pixel_on_mixed = pixel_on_mixed
        self.teacher_init = teacher_init
        self.widths = widths
        self.blocks = blocks
        self.embed_dim = embed_dim
        self.eval_every = eval_every
        self.seed = seed
        self.run_dir = run_dir

    # -------------------------------------------------------------- config

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations, batch_size=self.batch_size,
            learning_rate=self.learning_rate, warmup=self.warmup,
            weight_decay=self.weight_decay, alpha=self.alpha, beta=self.beta,
            confidence_threshold=self.confidence_threshold,
            ema_momentum=self.ema_momentum, patch_size=self.patch_size,
            resize_min=self.resize_min, resize_max=self.resize_max,
            iou_min=self.iou_min, iou_max=self.iou_max,
            enable_pixel=self.enable_pixel, enable_patch=self.enable_patch,
            enable_target=self.enable_target, jitter=self.jitter,
            blur_sigma=self.blur_sigma, augment_mixed=self.augment_mixed,
            mixed_cell_ignore=self.mixed_cell_ignore,
            pixel_on_mixed=self.pixel_on_mixed, teacher_init=self.teacher_init,
            seed=self.seed, eval_every=self.eval_every)

    def _contrast_config(self) -> ContrastConfig:
        return ContrastConfig(
            temperature=self.temperature,
            anchors_per_class=self.anchors_per_class,
            hard_fraction=self.hard_fraction, cross_batch=self.cross_batch,
            denominator=self.denominator)

    def _model_config(self) -> ModelConfig:
        return ModelConfig(widths=tuple(self.widths), blocks=self.blocks,
                           embed_dim=self.embed_dim)

    # ----------------------------------------------------------------- api

    def fit(self, source_images, source_labels, target_images,
            eval_images=None, eval_labels=None) -> "DomainAdaptiveSegmenter":
        """Adapt from the labeled source batch to the unlabeled target batch.

        ``eval_images``/``eval_labels`` (optional) enable periodic held-out
        evaluation; they are never used for parameter updates.
        """
        source_images = as_image_batch(source_images, "source_images")
        source_labels = as_label_batch(source_labels, self.class_count,
                                       "source_labels")
        check_paired(source_images, source_labels, "source data")
        target_images = as_image_batch(target_images, "target_images")
        if (eval_images is None) != (eval_labels is None):
            raise ValidationError("eval_images and eval_labels must be given together")

        trainer = create_trainer(
            self.class_count, self._train_config(), self._contrast_config(),
            self._model_config(), source_images, source_labels, target_images,
            eval_images, eval_labels, run_dir=self.run_dir)
        trainer.fit()
        self.trainer_ = trainer
        self.model_ = trainer.model
        self.history_ = trainer.history
        self.eval_history_ = trainer.eval_history
        self.classes_ = np.arange(self.class_count)
        return self

    def _require_fitted(self):
        require(hasattr(self, "model_"),
                "this DomainAdaptiveSegmenter is not fitted yet; call fit() "
                "or load() first")

    def predict(self, images) -> np.ndarray:
        """Per-pixel class ids, shape (N, H, W)."""
        self._require_fitted()
        return predict_labels(self.model_, as_image_batch(images, "images"))

    def predict_proba(self, images) -> np.ndarray:
        """Per-pixel class probabilities, shape (N, H, W, C)."""
        self._require_fitted()
        return predict_scores(self.model_, as_image_batch(images, "images"))

    def score(self, images, labels) -> float:
        """mIoU of the predictions against ``labels`` (higher is better)."""
        self._require_fitted()
        images = as_image_batch(images, "images")
        labels = as_label_batch(labels, self.class_count, "labels")
        check_paired(images, labels, "scoring data")
        predictions = self.predict(images)
        cm = ConfusionMatrix(self.class_count)
        for pred, gt in zip(predictions, labels):
            cm.update(pred, gt)
        return cm.mean_iou()

    # ----------------------------------------------------------- persistence

    def save(self, path) -> None:
        self._require_fitted()
        self.trainer_.save_checkpoint(Path(path))

    def load(self, path) -> "DomainAdaptiveSegmenter":
        """Attach a trained model from a checkpoint for inference."""
        model, payload = model_from_checkpoint(path)
        require(payload["class_count"] == self.class_count,
                f"checkpoint has class_count {payload['class_count']}, "
                f"estimator expects {self.class_count}")
        self.model_ = model
        self.classes_ = np.arange(self.class_count)
        return self
