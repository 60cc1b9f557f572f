"""Training objectives: masked cross-entropies and the two contrastive losses.

Both contrastive losses share one InfoNCE form. Embedding vectors are
unit-normalized on demand, similarity is the exponential of cosine similarity
over a temperature, and hard mining keeps, per anchor, the
``ceil(hard_fraction * pool)`` lowest-similarity positives and
highest-similarity negatives (so at least one of each survives whenever the
pool is nonempty, and ``hard_fraction = 1`` disables mining exactly).

Per retained positive j of anchor i with mined negatives N(i):

    loss(i, j) = -log( r(i,j) / (r(i,j) + sum_{k in N(i)} r(i,k)) )

computed in log space. The value with no negatives is exactly zero. The
``denominator="literal"`` variant instead sums r over all retained positives
and negatives of the anchor, which couples positives and makes the
no-negatives case nonzero; it exists for comparison only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import CorrespondenceMap
from .validation import IGNORE_LABEL, ValidationError, require

logger = logging.getLogger(__name__)

DENOMINATOR_MODES = ("infonce", "literal")


@dataclass
class ContrastConfig:
    temperature: float = 0.1
    anchors_per_class: int = 32
    hard_fraction: float = 0.10
    cross_batch: bool = True
    denominator: str = "infonce"

    def validate(self) -> None:
        require(self.temperature > 0.0, f"temperature must be > 0, got {self.temperature}")
        require(0.0 < self.hard_fraction <= 1.0,
                f"hard_fraction must lie in (0, 1], got {self.hard_fraction}")
        require(self.anchors_per_class >= 1, "anchors_per_class must be >= 1")
        require(self.denominator in DENOMINATOR_MODES,
                f"denominator must be one of {DENOMINATOR_MODES}, got {self.denominator!r}")


@dataclass
class ContrastStats:
    anchors: int = 0
    pairs: int = 0


@dataclass
class LossReport:
    """One training step's loss components and bookkeeping counts.

    ``total = ce_source + ce_target + alpha * pixel + beta * patch``.
    """

    ce_source: float
    ce_target: float
    pixel: float
    patch: float
    total: float
    alpha: float
    beta: float
    valid_pixels: int = 0
    pixel_anchors: int = 0
    pixel_pairs: int = 0
    patch_pairs: int = 0

    def as_record(self) -> dict:
        return {
            "ce_source": self.ce_source, "ce_target": self.ce_target,
            "pixel": self.pixel, "patch": self.patch, "total": self.total,
            "valid_pixels": self.valid_pixels, "pixel_anchors": self.pixel_anchors,
            "pixel_pairs": self.pixel_pairs, "patch_pairs": self.patch_pairs,
        }


def mining_keep_count(pool_size: int, hard_fraction: float) -> int:
    """Retained pool size under hard mining; >= 1 whenever the pool is nonempty."""
    if pool_size <= 0:
        return 0
    return min(pool_size, math.ceil(hard_fraction * pool_size))


def normalize_embeddings(embeddings: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return F.normalize(embeddings, p=2.0, dim=dim, eps=1e-12)


def _as_label_tensor(labels) -> torch.Tensor:
    if isinstance(labels, torch.Tensor):
        return labels.long()
    return torch.from_numpy(np.ascontiguousarray(labels)).long()


def _zero_like_loss(reference: torch.Tensor) -> torch.Tensor:
    # Keeps the autograd graph alive so callers can always backward().
    return reference.sum() * 0.0


def masked_cross_entropy(scores: torch.Tensor, labels,
                         valid_mask=None) -> tuple[torch.Tensor, int]:
    """Mean CE over the pixels selected by ``valid_mask`` and not IGNORE.

    ``scores`` is (B, C, H, W) or (C, H, W); labels match spatially. Returns
    (loss, pixel count); an empty selection yields exactly zero with count 0.
    """
    if scores.dim() == 3:
        scores = scores[None]
    labels = _as_label_tensor(labels)
    if labels.dim() == 2:
        labels = labels[None]
    require(scores.shape[0] == labels.shape[0] and scores.shape[-2:] == labels.shape[-2:],
            f"scores {tuple(scores.shape)} do not match labels {tuple(labels.shape)}")
    mask = labels != IGNORE_LABEL
    if valid_mask is not None:
        vm = torch.as_tensor(np.asarray(valid_mask), dtype=torch.bool)
        if vm.dim() == 2:
            vm = vm[None]
        require(vm.shape == labels.shape, "valid_mask shape mismatch")
        mask = mask & vm
    count = int(mask.sum())
    if count == 0:
        return _zero_like_loss(scores), 0
    log_probs = F.log_softmax(scores, dim=1)
    gathered = log_probs.gather(1, labels.clamp(min=0, max=scores.shape[1] - 1)
                                .unsqueeze(1)).squeeze(1)
    return -(gathered[mask]).sum() / count, count


def source_cross_entropy(scores: torch.Tensor, labels) -> tuple[torch.Tensor, int]:
    """Supervised CE over all non-IGNORE pixels of the labeled batch."""
    return masked_cross_entropy(scores, labels)


def mixed_cross_entropy(scores: torch.Tensor, mix_labels, valid_mask) -> tuple[torch.Tensor, int]:
    """Pseudo-label CE over the mixed sample, restricted to valid pixels."""
    return masked_cross_entropy(scores, mix_labels, valid_mask)


def downsample_labels(labels, stride: int, mixed_to_ignore: bool = False):
    """Label map at the embedding grid's resolution via cell-center picks.

    With ``mixed_to_ignore`` every cell whose stride block contains more than
    one distinct label becomes IGNORE.
    """
    arr = np.asarray(labels)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    require(arr.shape[-1] % stride == 0 and arr.shape[-2] % stride == 0,
            f"label dims {arr.shape[-2:]} must be divisible by stride {stride}")
    centers = arr[:, stride // 2::stride, stride // 2::stride]
    if mixed_to_ignore:
        b, h, w = arr.shape
        blocks = arr.reshape(b, h // stride, stride, w // stride, stride)
        uniform = (blocks == blocks[:, :, :1, :, :1]).all(axis=(2, 4))
        centers = np.where(uniform, centers, IGNORE_LABEL)
    return centers[0] if squeeze else centers


def _pair_losses(pos_logits: torch.Tensor, top_neg_logits: torch.Tensor | None,
                 denominator: str) -> torch.Tensor:
    """InfoNCE pair losses in log space. pos_logits is (A, P); negatives (A, N)."""
    if top_neg_logits is None or top_neg_logits.numel() == 0:
        if denominator == "literal":
            denom = torch.logsumexp(pos_logits, dim=1, keepdim=True)
            return denom - pos_logits
        return torch.zeros_like(pos_logits)
    lse_neg = torch.logsumexp(top_neg_logits, dim=1, keepdim=True)
    if denominator == "literal":
        denom = torch.logaddexp(torch.logsumexp(pos_logits, dim=1, keepdim=True), lse_neg)
        return denom - pos_logits
    return torch.logaddexp(pos_logits, lse_neg) - pos_logits


def pixel_contrast(embeddings: torch.Tensor, labels, config: ContrastConfig,
                   rng: np.random.Generator | None = None
                   ) -> tuple[torch.Tensor, ContrastStats]:
    """Class-supervised contrast over embedding-grid cells of a batch.

    ``embeddings`` is (B, D, h, w) raw (pre-normalization); ``labels`` is the
    (B, h, w) label map already downsampled to the grid. Anchors are up to
    ``anchors_per_class`` cells per class per image (all of them when the
    class is small enough, otherwise sampled with ``rng``). Positives are the
    anchor's same-class cells within its own image; negatives are all
    other-class cells, batch-wide when ``cross_batch``. IGNORE cells
    participate in nothing. Returns exactly zero (with zero counts) when no
    class has two cells anywhere.
    """
    config.validate()
    require(embeddings.dim() == 4, f"embeddings must be (B, D, h, w), got "
            f"{tuple(embeddings.shape)}")
    labels = _as_label_tensor(labels)
    require(labels.shape == (embeddings.shape[0], *embeddings.shape[2:]),
            f"labels {tuple(labels.shape)} do not match embedding grid "
            f"{(embeddings.shape[0], *embeddings.shape[2:])}")

    batch, dim = embeddings.shape[0], embeddings.shape[1]
    flat = normalize_embeddings(
        embeddings.permute(0, 2, 3, 1).reshape(batch, -1, dim))
    labs = labels.reshape(batch, -1)
    all_emb = flat.reshape(-1, dim)
    all_lab = labs.reshape(-1)
    inv_t = 1.0 / config.temperature

    total = _zero_like_loss(embeddings)
    stats = ContrastStats()
    for b in range(batch):
        lab_b = labs[b]
        for cls in torch.unique(lab_b).tolist():
            if cls == IGNORE_LABEL:
                continue
            cells = torch.nonzero(lab_b == cls, as_tuple=False).squeeze(1)
            m = int(cells.numel())
            if m < 2:
                continue
            if m <= config.anchors_per_class:
                anchor_cells = cells
            else:
                require(rng is not None,
                        "pixel_contrast needs an rng to subsample anchors")
                pick = rng.choice(m, size=config.anchors_per_class, replace=False)
                anchor_cells = cells[torch.from_numpy(np.sort(pick))]
            anchors = flat[b, anchor_cells]

            pos_logits = (anchors @ flat[b, cells].T) * inv_t
            self_mask = cells[None, :] == anchor_cells[:, None]
            k_pos = mining_keep_count(m - 1, config.hard_fraction)
            # farthest positives = lowest similarity; exclude self via +inf
            masked = pos_logits.masked_fill(self_mask, float("inf"))
            kept_pos = -torch.topk(-masked, k_pos, dim=1).values

            if config.cross_batch:
                neg_sel = (all_lab != cls) & (all_lab != IGNORE_LABEL)
                neg_emb = all_emb[neg_sel]
            else:
                neg_sel = (lab_b != cls) & (lab_b != IGNORE_LABEL)
                neg_emb = flat[b, neg_sel]
            n_neg = int(neg_emb.shape[0])
            if n_neg > 0:
                neg_logits = (anchors @ neg_emb.T) * inv_t
                k_neg = mining_keep_count(n_neg, config.hard_fraction)
                top_negs = torch.topk(neg_logits, k_neg, dim=1).values
            else:
                top_negs = None
            total = total + _pair_losses(kept_pos, top_negs, config.denominator).sum()
            stats.anchors += int(anchor_cells.numel())
            stats.pairs += int(anchor_cells.numel()) * k_pos

    if stats.pairs == 0:
        logger.debug("pixel_contrast: no class with >= 2 cells; returning 0")
        return _zero_like_loss(embeddings), stats
    return total / stats.pairs, stats


def _flatten_grid(embed: torch.Tensor) -> torch.Tensor:
    require(embed.dim() == 3, f"expected (D, h, w) embedding grid, got "
            f"{tuple(embed.shape)}")
    d = embed.shape[0]
    return embed.permute(1, 2, 0).reshape(-1, d)


def _patch_direction(anchors: torch.Tensor, candidates: torch.Tensor,
                     self_cols: torch.Tensor, pos_cols: torch.Tensor,
                     inv_t: float, config: ContrastConfig) -> torch.Tensor:
    logits = (anchors @ candidates.T) * inv_t
    rows = torch.arange(anchors.shape[0])
    pos = logits[rows, pos_cols].unsqueeze(1)
    n_cand = candidates.shape[0]
    n_neg = n_cand - 2
    if n_neg <= 0:
        return _pair_losses(pos, None, config.denominator).squeeze(1)
    neg_logits = logits.clone()
    neg_logits[rows, self_cols] = float("-inf")
    neg_logits[rows, pos_cols] = float("-inf")
    k_neg = mining_keep_count(n_neg, config.hard_fraction)
    top_negs = torch.topk(neg_logits, k_neg, dim=1).values
    return _pair_losses(pos, top_negs, config.denominator).squeeze(1)


def patch_contrast(crop1_embed: torch.Tensor, crop2_embed: torch.Tensor,
                   correspondence: CorrespondenceMap,
                   batch_pool: torch.Tensor | None,
                   config: ContrastConfig) -> tuple[torch.Tensor, ContrastStats]:
    """Location contrast between two overlapping crops of one image.

    ``crop1_embed``/``crop2_embed`` are (D, h, w) raw embedding grids of the
    two crops; each correspondence pair makes the two cells of one image
    location a positive pair. Negatives are every other cell of either crop
    (cells of the anchor's location are excluded on both sides) plus every
    cell of ``batch_pool``, a (M, D) matrix of cells from other images in the
    batch (may be None/empty). The loss is symmetrized over crop order and
    averaged over all 2 * len(correspondence) pairs.
    """
    config.validate()
    require(len(correspondence) > 0, "empty correspondence violates the precondition")
    f1 = normalize_embeddings(_flatten_grid(crop1_embed))
    f2 = normalize_embeddings(_flatten_grid(crop2_embed))
    require(f1.shape[1] == f2.shape[1], "crop embeddings differ in width")
    w1 = crop1_embed.shape[2]
    w2 = crop2_embed.shape[2]
    idx1 = torch.from_numpy(correspondence.crop1_cells[:, 0] * w1
                            + correspondence.crop1_cells[:, 1]).long()
    idx2 = torch.from_numpy(correspondence.crop2_cells[:, 0] * w2
                            + correspondence.crop2_cells[:, 1]).long()
    require(int(idx1.max()) < f1.shape[0] and int(idx2.max()) < f2.shape[0],
            "correspondence indices exceed the crop grids")

    pools = [f1, f2]
    if batch_pool is not None and batch_pool.numel() > 0:
        require(batch_pool.dim() == 2 and batch_pool.shape[1] == f1.shape[1],
                f"batch_pool must be (M, {f1.shape[1]}), got {tuple(batch_pool.shape)}")
        pools.append(normalize_embeddings(batch_pool))
    candidates = torch.cat(pools, dim=0)
    n1 = f1.shape[0]
    inv_t = 1.0 / config.temperature

    losses_fwd = _patch_direction(f1[idx1], candidates, idx1, n1 + idx2, inv_t, config)
    losses_bwd = _patch_direction(f2[idx2], candidates, n1 + idx2, idx1, inv_t, config)
    n_pairs = 2 * len(correspondence)
    loss = (losses_fwd.sum() + losses_bwd.sum()) / n_pairs
    return loss, ContrastStats(anchors=n_pairs, pairs=n_pairs)


def total_loss(ce_source: float, ce_target: float, pixel: float, patch: float,
               alpha: float, beta: float, *, valid_pixels: int = 0,
               pixel_anchors: int = 0, pixel_pairs: int = 0,
               patch_pairs: int = 0) -> LossReport:
    """Combine the component losses into the training objective report.

    Any non-finite component is an error: the caller must abort the step.
    """
    components = {"ce_source": float(ce_source), "ce_target": float(ce_target),
                  "pixel": float(pixel), "patch": float(patch)}
    for name, value in components.items():
        if not math.isfinite(value):
            raise ValidationError(f"non-finite loss component {name} = {value}")
    total = (components["ce_source"] + components["ce_target"]
             + alpha * components["pixel"] + beta * components["patch"])
    return LossReport(ce_source=components["ce_source"], ce_target=components["ce_target"],
                      pixel=components["pixel"], patch=components["patch"],
                      total=total, alpha=alpha, beta=beta,
                      valid_pixels=valid_pixels, pixel_anchors=pixel_anchors,
                      pixel_pairs=pixel_pairs, patch_pairs=patch_pairs)
