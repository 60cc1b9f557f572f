"""Brute-force scalar reference implementations.

Everything here is written as plain Python loops over numpy scalars, with no
shared code with the vectorized training path. These functions are the
independent side of every dual-route check (oracle-equivalence tests and the
``gradcheck`` verification command); they are intentionally slow and must stay
structurally independent of ``losses``/``evaluation`` internals.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import CorrespondenceMap
from .losses import ContrastConfig
from .validation import IGNORE_LABEL


def _unit(vector) -> list[float]:
    norm = math.sqrt(math.fsum(float(value) * float(value) for value in vector))
    norm = max(norm, 1e-12)
    return [float(value) / norm for value in vector]


def _cosine(u: list[float], v: list[float]) -> float:
    return math.fsum(a * b for a, b in zip(u, v))


def _keep_count(pool: int, fraction: float) -> int:
    if pool <= 0:
        return 0
    return min(pool, math.ceil(fraction * pool))


def _nce_pair_loss(pos_sim: float, kept_pos_sims: list[float],
                   kept_neg_sims: list[float], temperature: float,
                   denominator: str) -> float:
    r_pos = math.exp(pos_sim / temperature)
    r_negs = math.fsum(math.exp(s / temperature) for s in kept_neg_sims)
    if denominator == "literal":
        r_den = math.fsum(math.exp(s / temperature) for s in kept_pos_sims) + r_negs
    else:
        r_den = r_pos + r_negs
    return -math.log(r_pos / r_den)


def pixel_contrast_reference(embeddings: np.ndarray, labels: np.ndarray,
                             config: ContrastConfig) -> tuple[float, int]:
    """Scalar enumeration of the pixel contrast loss.

    ``embeddings`` is (B, D, h, w), ``labels`` is (B, h, w). Every cell of a
    class with at least two same-image cells is an anchor, so the config must
    allow full enumeration (anchors_per_class >= the largest class size).
    Returns (loss, number of pairs).
    """
    config.validate()
    batch, dim, grid_h, grid_w = embeddings.shape
    cells = []   # (image, label, unit vector)
    for b in range(batch):
        for i in range(grid_h):
            for j in range(grid_w):
                lab = int(labels[b, i, j])
                cells.append((b, lab, _unit(embeddings[b, :, i, j])))

    for b in range(batch):
        for lab in set(int(v) for v in labels[b].ravel()):
            if lab == IGNORE_LABEL:
                continue
            size = sum(1 for (bb, ll, _) in cells if bb == b and ll == lab)
            if size > config.anchors_per_class:
                raise ValueError("reference oracle requires anchors_per_class >= "
                                 "every per-image class size (no subsampling)")

    loss_sum, pair_count = 0.0, 0
    for b, lab, anchor in cells:
        if lab == IGNORE_LABEL:
            continue
        positives = [vec for (bb, ll, vec) in cells
                     if bb == b and ll == lab and vec is not anchor]
        if not positives:
            continue
        if config.cross_batch:
            negatives = [vec for (_, ll, vec) in cells
                         if ll != lab and ll != IGNORE_LABEL]
        else:
            negatives = [vec for (bb, ll, vec) in cells
                         if bb == b and ll != lab and ll != IGNORE_LABEL]

        pos_sims = sorted((_cosine(anchor, v) for v in positives))
        kept_pos = pos_sims[:_keep_count(len(pos_sims), config.hard_fraction)]
        neg_sims = sorted((_cosine(anchor, v) for v in negatives), reverse=True)
        kept_neg = neg_sims[:_keep_count(len(neg_sims), config.hard_fraction)]
        for sim in kept_pos:
            loss_sum += _nce_pair_loss(sim, kept_pos, kept_neg,
                                       config.temperature, config.denominator)
            pair_count += 1

    if pair_count == 0:
        return 0.0, 0
    return loss_sum / pair_count, pair_count


def patch_contrast_reference(crop1_embed: np.ndarray, crop2_embed: np.ndarray,
                             correspondence: CorrespondenceMap,
                             batch_pool: np.ndarray | None,
                             config: ContrastConfig) -> tuple[float, int]:
    """Scalar enumeration of the patch contrast loss (both directions)."""
    config.validate()

    def grid_cells(embed):
        _, h, w = embed.shape
        return [_unit(embed[:, i, j]) for i in range(h) for j in range(w)]

    f1 = grid_cells(crop1_embed)
    f2 = grid_cells(crop2_embed)
    w1 = crop1_embed.shape[2]
    w2 = crop2_embed.shape[2]
    pool = [] if batch_pool is None else [_unit(row) for row in batch_pool]

    loss_sum, pair_count = 0.0, 0
    for (i1, j1), (i2, j2) in correspondence.pairs:
        a1 = i1 * w1 + j1
        a2 = i2 * w2 + j2
        for anchor, positive in ((f1[a1], f2[a2]), (f2[a2], f1[a1])):
            # negatives: every cell of either crop not denoting the anchor's
            # image location, plus the whole batch pool
            negatives = [vec for idx, vec in enumerate(f1) if idx != a1]
            negatives += [vec for idx, vec in enumerate(f2) if idx != a2]
            negatives += pool
            pos_sim = _cosine(anchor, positive)
            neg_sims = sorted((_cosine(anchor, v) for v in negatives), reverse=True)
            kept_neg = neg_sims[:_keep_count(len(neg_sims), config.hard_fraction)]
            loss_sum += _nce_pair_loss(pos_sim, [pos_sim], kept_neg,
                                       config.temperature, config.denominator)
            pair_count += 1

    return loss_sum / pair_count, pair_count


def cross_entropy_reference(scores: np.ndarray, labels: np.ndarray,
                            valid_mask: np.ndarray | None = None) -> tuple[float, int]:
    """Per-pixel scalar cross-entropy over selected, non-IGNORE pixels."""
    if scores.ndim == 3:
        scores = scores[None]
        labels = np.asarray(labels)[None]
        if valid_mask is not None:
            valid_mask = np.asarray(valid_mask)[None]
    batch, n_classes, height, width = scores.shape
    total, count = 0.0, 0
    for b in range(batch):
        for i in range(height):
            for j in range(width):
                lab = int(labels[b, i, j])
                if lab == IGNORE_LABEL:
                    continue
                if valid_mask is not None and not bool(valid_mask[b, i, j]):
                    continue
                logits = [float(scores[b, c, i, j]) for c in range(n_classes)]
                peak = max(logits)
                log_norm = peak + math.log(math.fsum(math.exp(v - peak) for v in logits))
                total += log_norm - logits[lab]
                count += 1
    if count == 0:
        return 0.0, 0
    return total / count, count


def confusion_reference(predictions: np.ndarray, ground_truth: np.ndarray,
                        class_count: int) -> np.ndarray:
    """Hand-loop confusion matrix; entry (g, p) counts gt g predicted p."""
    counts = np.zeros((class_count, class_count), dtype=np.int64)
    pred = np.asarray(predictions)
    gt = np.asarray(ground_truth)
    assert pred.shape == gt.shape
    for g, p in zip(gt.ravel().tolist(), pred.ravel().tolist()):
        if g == IGNORE_LABEL:
            continue
        counts[g, p] += 1
    return counts


def miou_reference(predictions: np.ndarray, ground_truth: np.ndarray,
                   class_count: int) -> float:
    """mIoU via per-class pixel-set intersection/union (no confusion matrix)."""
    pred = np.asarray(predictions).ravel()
    gt = np.asarray(ground_truth).ravel()
    scored = gt != IGNORE_LABEL
    ious = []
    for c in range(class_count):
        pred_set = {i for i in range(pred.size) if scored[i] and pred[i] == c}
        gt_set = {i for i in range(gt.size) if scored[i] and gt[i] == c}
        union = pred_set | gt_set
        if not union:
            continue
        ious.append(len(pred_set & gt_set) / len(union))
    if not ious:
        raise ValueError("all classes absent")
    return float(np.mean(ious))
