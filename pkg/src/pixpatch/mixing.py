"""Confidence-gated pseudo-labels and class-wise copy-paste mixing.

Pure numpy: pseudo-labels are produced from teacher scores that have already
left the autograd graph, and the mixed sample is assembled by copy-paste, so
no gradient can flow through either (the trainer relies on this).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .validation import IGNORE_LABEL, ValidationError, check_same_shape, require


@dataclass
class PseudoLabel:
    """Per-pixel teacher prediction with a confidence gate.

    ``labels`` is the per-pixel argmax of the teacher's class distribution
    (ties broken toward the lowest class id), ``confidence`` the distribution
    maximum, and ``valid_mask`` is True exactly where confidence strictly
    exceeds the threshold.
    """

    labels: np.ndarray       # (H, W) int64
    confidence: np.ndarray   # (H, W) float64 in [0, 1]
    valid_mask: np.ndarray   # (H, W) bool
    threshold: float


@dataclass
class MixResult:
    """A class-wise mixed sample: source pixels pasted onto a target image.

    Where ``source_mask`` is True the pixel (image and label) is copied from
    the source sample and is always valid for training, because its label is
    ground truth; elsewhere the pixel comes from the target image with its
    pseudo-label and the pseudo-label's validity.
    """

    image: np.ndarray          # (H, W, 3) float32
    label: np.ndarray          # (H, W) int64
    source_mask: np.ndarray    # (H, W) bool
    valid_mask: np.ndarray     # (H, W) bool
    selected_classes: tuple[int, ...]


def pseudo_label(teacher_scores: np.ndarray, threshold: float) -> PseudoLabel:
    """Derive a confidence-gated pseudo-label from per-pixel class scores.

    ``teacher_scores`` has shape (C, H, W); scores are normalized with a
    stable softmax over the class axis. A pixel is valid when its normalized
    maximum is strictly greater than ``threshold``.
    """
    scores = np.asarray(teacher_scores, dtype=np.float64)
    require(scores.ndim == 3 and scores.shape[0] >= 2,
            f"teacher scores must be (C>=2, H, W), got shape {scores.shape}")
    if not np.isfinite(scores).all():
        raise ValidationError("teacher scores contain non-finite values")
    shifted = scores - scores.max(axis=0, keepdims=True)
    np.exp(shifted, out=shifted)
    probs = shifted / shifted.sum(axis=0, keepdims=True)
    labels = probs.argmax(axis=0).astype(np.int64)   # first maximum = lowest class id
    confidence = probs.max(axis=0)
    return PseudoLabel(labels=labels, confidence=confidence,
                       valid_mask=confidence > threshold, threshold=float(threshold))


def select_half_classes(source_labels: np.ndarray,
                        rng: np.random.Generator) -> tuple[int, ...]:
    """Pick ceil(|K|/2) of the classes present in the source label map."""
    present = np.unique(source_labels)
    present = present[present != IGNORE_LABEL]
    count = math.ceil(len(present) / 2)
    picked = rng.choice(present, size=count, replace=False)
    return tuple(sorted(int(c) for c in picked))


def class_mix(source_image: np.ndarray, source_labels: np.ndarray,
              target_image: np.ndarray, pseudo: PseudoLabel,
              rng: np.random.Generator | None = None,
              selected: tuple[int, ...] | None = None) -> MixResult:
    """Copy all pixels of half the source classes onto the target sample.

    The class subset is drawn uniformly without replacement (``selected`` is a
    test hook that bypasses the draw). Copy-paste keeps the mixed label map
    one-hot-representable: every output pixel is byte-equal to the same pixel
    of exactly one input.
    """
    source_image = np.asarray(source_image)
    target_image = np.asarray(target_image)
    source_labels = np.asarray(source_labels)
    check_same_shape(source_image, target_image, "source/target images")
    check_same_shape(source_labels, pseudo.labels, "source labels/pseudo labels")
    check_same_shape(source_labels, source_image[..., 0], "labels/images")

    if selected is None:
        require(rng is not None, "class_mix needs an rng when no selection is given")
        selected = select_half_classes(source_labels, rng)

    source_mask = np.isin(source_labels, np.asarray(selected, dtype=source_labels.dtype))
    image = np.where(source_mask[..., None], source_image, target_image)
    label = np.where(source_mask, source_labels.astype(np.int64), pseudo.labels)
    valid = source_mask | pseudo.valid_mask
    return MixResult(image=image.astype(np.float32), label=label,
                     source_mask=source_mask, valid_mask=valid,
                     selected_classes=tuple(int(c) for c in selected))
