"""End-to-end training loop: pseudo-labeling, mixing, crops, losses, EMA.

One step, in order: (1) the EMA teacher pseudo-labels the clean target batch;
(2) half the source classes are pasted onto each target sample (class mix);
(3) the student segments the source batch and the (optionally augmented) mixed
batch for the two cross-entropies; (4) pixel contrast on the source embedding
grid; (5) per target image, two overlapping crops are sampled, embedded and
contrasted at the corresponding locations; (6) the weighted total is checked
finite, backpropagated and applied to the student only; (7) the teacher takes
an EMA update. Pseudo-labels and mixing run in numpy, outside autograd, so no
gradient can reach the teacher.

All randomness flows through named numpy generators derived from the config
seed, so runs are reproducible and checkpoints capture the full RNG state.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .evaluation import ConfusionMatrix
from .geometry import build_correspondence, sample_crop_pair
from .losses import (ContrastConfig, LossReport, downsample_labels,
                     masked_cross_entropy, mixed_cross_entropy, patch_contrast,
                     pixel_contrast, source_cross_entropy, total_loss)
from .mixing import class_mix, pseudo_label
from .model import (EmaTeacher, ModelConfig, SegmentationModel, TeacherConfig,
                    build_model)
from .synth import augment
from .validation import (IGNORE_LABEL, ValidationError, as_image_batch,
                         as_label_batch, check_paired, require)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_RNG_STREAMS = ("order", "mix", "crop", "aug", "anchor")


@dataclass
class TrainConfig:
    """Desk-scale defaults; the reference large-scale recipe uses lr 6e-5,
    batch 2, 60k iterations and 1.5k warmup, which this mirrors scaled down
    (the tiny from-scratch encoder needs the larger rate)."""

    iterations: int = 4000
    batch_size: int = 4
    learning_rate: float = 1e-3
    warmup: int = 150
    weight_decay: float = 0.01
    alpha: float = 0.1
    beta: float = 0.1
    confidence_threshold: float = 0.968
    ema_momentum: float = 0.999
    patch_size: int = 48
    resize_min: float = 1.0
    resize_max: float = 2.0
    iou_min: float = 0.1
    iou_max: float = 1.0
    enable_pixel: bool = True
    enable_patch: bool = True
    enable_target: bool = True     # self-training branch; off = source-only run
    jitter: float = 0.2
    blur_sigma: float = 0.8
    augment_mixed: bool = True
    mixed_cell_ignore: bool = False
    pixel_on_mixed: bool = False
    teacher_init: str = "copy"
    seed: int = 0
    eval_every: int = 500
    max_consecutive_skips: int = 3

    def validate(self) -> None:
        require(self.iterations >= 0, "iterations must be >= 0")
        require(self.batch_size >= 1, "batch_size must be >= 1")
        require(self.learning_rate >= 0.0, "learning_rate must be >= 0")
        require(self.warmup >= 0, "warmup must be >= 0")
        require(self.weight_decay >= 0.0, "weight_decay must be >= 0")
        require(0.0 <= self.confidence_threshold <= 1.0,
                "confidence_threshold must lie in [0, 1]")
        require(0.0 <= self.ema_momentum <= 1.0, "ema_momentum must lie in [0, 1]")
        require(self.patch_size >= 1, "patch_size must be >= 1")
        require(0.0 < self.resize_min <= self.resize_max, "bad resize range")
        require(0.0 <= self.iou_min <= self.iou_max <= 1.0, "bad IoU range")
        require(self.teacher_init in ("copy", "random"), "teacher_init must be copy|random")
        require(self.max_consecutive_skips >= 1, "max_consecutive_skips must be >= 1")


def to_image_tensor(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) float numpy -> (N, 3, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()


def predict_labels(model: SegmentationModel, images: np.ndarray,
                   batch_size: int = 16) -> np.ndarray:
    """Student inference: per-pixel argmax labels for a batch of images."""
    was_training = model.training
    model.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            scores = model.forward_segment(to_image_tensor(images[start:start + batch_size]))
            outputs.append(scores.argmax(dim=1).numpy())
    model.train(was_training)
    return np.concatenate(outputs, axis=0)


def predict_scores(model: SegmentationModel, images: np.ndarray,
                   batch_size: int = 16) -> np.ndarray:
    """Per-pixel class probabilities, shape (N, H, W, C)."""
    was_training = model.training
    model.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            scores = model.forward_segment(to_image_tensor(images[start:start + batch_size]))
            probs = torch.softmax(scores, dim=1)
            outputs.append(probs.permute(0, 2, 3, 1).numpy())
    model.train(was_training)
    return np.concatenate(outputs, axis=0)


class Trainer:
    """Owns the student, its EMA teacher, the optimizer and the RNG streams."""

    def __init__(self, model: SegmentationModel, train_config: TrainConfig,
                 contrast_config: ContrastConfig,
                 source_images: np.ndarray, source_labels: np.ndarray,
                 target_images: np.ndarray,
                 eval_images: np.ndarray | None = None,
                 eval_labels: np.ndarray | None = None,
                 run_dir: Path | str | None = None):
        train_config.validate()
        contrast_config.validate()
        self.cfg = train_config
        self.contrast_cfg = contrast_config
        self.model = model
        self.class_count = model.class_count

        self.source_images = as_image_batch(source_images, "source images")
        self.source_labels = as_label_batch(source_labels, self.class_count,
                                            "source labels")
        check_paired(self.source_images, self.source_labels, "source data")
        # The trainer takes target images only: target ground truth is the
        # evaluation oracle and must never reach this class.
        self.target_images = as_image_batch(target_images, "target images")
        require(self.source_images.shape[1:] == self.target_images.shape[1:],
                "source and target rasters must share a geometry")
        height, width = self.source_images.shape[1:3]
        k = model.stride
        require(height % k == 0 and width % k == 0,
                f"raster size {height}x{width} must be divisible by stride {k}")
        if self.cfg.enable_patch:
            require(self.cfg.patch_size % k == 0,
                    f"patch_size {self.cfg.patch_size} must be a multiple of stride {k}")

        self.eval_images = None
        self.eval_labels = None
        if eval_images is not None:
            self.eval_images = as_image_batch(eval_images, "eval images")
            self.eval_labels = as_label_batch(eval_labels, self.class_count,
                                              "eval labels")
            check_paired(self.eval_images, self.eval_labels, "eval data")

        self.teacher = EmaTeacher(model, TeacherConfig(
            momentum=self.cfg.ema_momentum, init=self.cfg.teacher_init,
            random_init_seed=self.cfg.seed + 1))
        self.optimizer = torch.optim.AdamW(model.parameters(),
                                           lr=self.cfg.learning_rate,
                                           weight_decay=self.cfg.weight_decay)
        seq = np.random.SeedSequence(self.cfg.seed)
        self._rngs = {name: np.random.default_rng(child)
                      for name, child in zip(_RNG_STREAMS, seq.spawn(len(_RNG_STREAMS)))}

        self.iteration = 0
        self.consecutive_skips = 0
        self.history: list[dict] = []
        self.eval_history: list[dict] = []
        self.run_dir = Path(run_dir) if run_dir is not None else None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            self.metrics_path = self.run_dir / "metrics.jsonl"
        else:
            self.metrics_path = None

    # ------------------------------------------------------------------ util

    def learning_rate_at(self, iteration: int) -> float:
        """Linear warmup to the base rate, then constant."""
        if self.cfg.warmup > 0 and iteration < self.cfg.warmup:
            return self.cfg.learning_rate * iteration / self.cfg.warmup
        return self.cfg.learning_rate

    def _apply_lr(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def _log_record(self, record: dict) -> None:
        if self.metrics_path is not None:
            with open(self.metrics_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _sample_batches(self):
        take = self.cfg.batch_size
        src_idx = self._rngs["order"].integers(0, self.source_images.shape[0], size=take)
        tgt_idx = self._rngs["order"].integers(0, self.target_images.shape[0], size=take)
        return (self.source_images[src_idx], self.source_labels[src_idx],
                self.target_images[tgt_idx])

    # ------------------------------------------------------------------ step

    def train_step(self, source_images: np.ndarray, source_labels: np.ndarray,
                   target_images: np.ndarray,
                   after_pseudo_hook=None) -> LossReport:
        """Run one optimization step on explicit batches; returns the report.

        Raises ValidationError if the total loss is non-finite; in that case
        the parameters are untouched (the check happens before backward).
        ``after_pseudo_hook`` is a test seam invoked once the pseudo-labels
        are fixed, used to verify that nothing downstream depends on the
        teacher within the step.
        """
        require(source_images.shape[0] >= 1 and target_images.shape[0] >= 1,
                "batches must be nonempty")
        cfg = self.cfg
        self.optimizer.zero_grad(set_to_none=True)
        lr = self.learning_rate_at(self.iteration)
        self._apply_lr(lr)

        batch = source_images.shape[0]
        target_tensor = to_image_tensor(target_images)

        # (1) teacher pseudo-labels on the clean target batch
        if cfg.enable_target:
            with torch.no_grad():
                teacher_scores = self.teacher.forward_segment(target_tensor).numpy()
            pseudo = [pseudo_label(teacher_scores[b], cfg.confidence_threshold)
                      for b in range(batch)]
        else:
            pseudo = None
        if after_pseudo_hook is not None:
            after_pseudo_hook(self)

        # (2) class mix, (3a) optional photometric augmentation of the mix
        if cfg.enable_target:
            mixes = [class_mix(source_images[b], source_labels[b],
                               target_images[b], pseudo[b], self._rngs["mix"])
                     for b in range(batch)]
            mix_images = np.stack([m.image for m in mixes])
            if cfg.augment_mixed and (cfg.jitter > 0 or cfg.blur_sigma > 0):
                mix_images = np.stack([augment(img, self._rngs["aug"],
                                               cfg.jitter, cfg.blur_sigma)
                                       for img in mix_images])
            mix_labels = np.stack([m.label for m in mixes])
            mix_valid = np.stack([m.valid_mask for m in mixes])

        # (3b) student forward passes
        source_feats = self.model.features(to_image_tensor(source_images))
        source_scores = self.model.segment_from(source_feats)
        ce_src, _ = source_cross_entropy(source_scores, source_labels)

        if cfg.enable_target:
            mix_feats = self.model.features(to_image_tensor(mix_images))
            mix_scores = self.model.segment_from(mix_feats)
            ce_tgt, n_valid = mixed_cross_entropy(mix_scores, mix_labels, mix_valid)
        else:
            ce_tgt, n_valid = source_scores.sum() * 0.0, 0

        # (4) pixel contrast on the labeled embedding grid
        pixel_t = source_scores.sum() * 0.0
        pixel_anchors = pixel_pairs = 0
        if cfg.enable_pixel:
            embeds = self.model.embed_from(source_feats, "pixel")
            grid_labels = downsample_labels(source_labels, self.model.stride,
                                            cfg.mixed_cell_ignore)
            if cfg.pixel_on_mixed and cfg.enable_target:
                mix_embeds = self.model.embed_from(mix_feats, "pixel")
                masked = np.where(mix_valid, mix_labels, IGNORE_LABEL)
                mix_grid = downsample_labels(masked, self.model.stride,
                                             cfg.mixed_cell_ignore)
                embeds = torch.cat([embeds, mix_embeds], dim=0)
                grid_labels = np.concatenate([grid_labels, mix_grid], axis=0)
            pixel_t, pstats = pixel_contrast(embeds, grid_labels,
                                             self.contrast_cfg, self._rngs["anchor"])
            pixel_anchors, pixel_pairs = pstats.anchors, pstats.pairs

        # (5) patch contrast between two crops of each target image
        patch_t = source_scores.sum() * 0.0
        patch_pairs = 0
        if cfg.enable_patch:
            patch_t, patch_pairs = self._patch_branch(target_tensor)

        # (6) combine, verify finite, (7) update student then teacher
        report = total_loss(ce_src.detach().item(), ce_tgt.detach().item(),
                            pixel_t.detach().item(), patch_t.detach().item(),
                            cfg.alpha, cfg.beta,
                            valid_pixels=n_valid, pixel_anchors=pixel_anchors,
                            pixel_pairs=pixel_pairs, patch_pairs=patch_pairs)
        total_t = ce_src + ce_tgt + cfg.alpha * pixel_t + cfg.beta * patch_t
        total_t.backward()
        self.optimizer.step()
        self.teacher.update(self.model)
        return report

    def _patch_branch(self, target_tensor: torch.Tensor):
        cfg = self.cfg
        k = self.model.stride
        batch = target_tensor.shape[0]
        height, width = target_tensor.shape[-2:]
        pairs, crops = [], []
        for b in range(batch):
            pair = sample_crop_pair(height, width, cfg.patch_size,
                                    (cfg.resize_min, cfg.resize_max),
                                    (cfg.iou_min, cfg.iou_max), k,
                                    self._rngs["crop"])
            pairs.append(pair)
            resized = torch.nn.functional.interpolate(
                target_tensor[b:b + 1], size=(pair.resized_h, pair.resized_w),
                mode="bilinear", align_corners=False)
            for rect in (pair.rect1, pair.rect2):
                crops.append(resized[0, :, rect.y0:rect.y1, rect.x0:rect.x1])
        embeds = self.model.forward_embed(torch.stack(crops), "patch")

        grid = cfg.patch_size // k
        cells = embeds.permute(0, 2, 3, 1).reshape(batch * 2, grid * grid, -1)
        loss_sum = target_tensor.sum() * 0.0
        pair_total = 0
        for b in range(batch):
            corr = build_correspondence(pairs[b])
            if self.contrast_cfg.cross_batch and batch > 1:
                others = torch.cat([cells[i] for i in range(2 * batch)
                                    if i // 2 != b], dim=0)
            else:
                others = None
            loss_b, stats = patch_contrast(embeds[2 * b], embeds[2 * b + 1],
                                           corr, others, self.contrast_cfg)
            loss_sum = loss_sum + loss_b * stats.pairs
            pair_total += stats.pairs
        return loss_sum / max(pair_total, 1), pair_total

    # ------------------------------------------------------------------- fit

    def fit(self) -> list[dict]:
        """Run the remaining iterations; returns the metrics history."""
        cfg = self.cfg
        while self.iteration < cfg.iterations:
            src_imgs, src_labs, tgt_imgs = self._sample_batches()
            lr = self.learning_rate_at(self.iteration)
            try:
                report = self.train_step(src_imgs, src_labs, tgt_imgs)
            except ValidationError as err:
                self.consecutive_skips += 1
                logger.warning("iteration %d skipped: %s", self.iteration, err)
                record = {"iteration": self.iteration, "lr": lr, "skipped": True}
                self.history.append(record)
                self._log_record(record)
                if self.consecutive_skips >= cfg.max_consecutive_skips:
                    raise RuntimeError(
                        f"aborting: {self.consecutive_skips} consecutive "
                        f"non-finite training steps") from err
                self.iteration += 1
                continue
            self.consecutive_skips = 0
            record = {"iteration": self.iteration, "lr": lr, **report.as_record()}
            self.history.append(record)
            self._log_record(record)
            self.iteration += 1
            if (cfg.eval_every > 0 and self.eval_images is not None
                    and self.iteration % cfg.eval_every == 0):
                self._run_eval()
        if self.eval_images is not None and (cfg.eval_every == 0
                                             or self.iteration % max(cfg.eval_every, 1) != 0
                                             or cfg.iterations == 0):
            self._run_eval()
        if self.run_dir is not None:
            self.save_checkpoint(self.run_dir / "checkpoint.pt")
        return self.history

    def _run_eval(self) -> float:
        predictions = predict_labels(self.model, self.eval_images)
        cm = ConfusionMatrix(self.class_count)
        for pred, gt in zip(predictions, self.eval_labels):
            cm.update(pred, gt)
        miou = cm.mean_iou()
        record = {"iteration": self.iteration, "miou": miou}
        self.eval_history.append(record)
        self._log_record(record)
        logger.info("iteration %d: eval mIoU %.4f", self.iteration, miou)
        return miou

    # ------------------------------------------------------------ checkpoint

    def save_checkpoint(self, path: Path | str) -> None:
        payload = {
            "version": CHECKPOINT_VERSION,
            "pixpatch_version": __version__,
            "iteration": self.iteration,
            "consecutive_skips": self.consecutive_skips,
            "class_count": self.class_count,
            "model_config": asdict(self.model.config),
            "model": self.model.state_dict(),
            "teacher": self.teacher.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "train_config": asdict(self.cfg),
            "contrast_config": asdict(self.contrast_cfg),
            "rng": {name: gen.bit_generator.state
                    for name, gen in self._rngs.items()},
        }
        torch.save(payload, path)

    def restore(self, payload: dict) -> None:
        self.model.load_state_dict(payload["model"])
        self.teacher.load_state_dict(payload["teacher"])
        self.optimizer.load_state_dict(payload["optimizer"])
        for name, state in payload["rng"].items():
            self._rngs[name].bit_generator.state = state
        self.iteration = payload["iteration"]
        self.consecutive_skips = payload.get("consecutive_skips", 0)


def read_checkpoint(path: Path | str) -> dict:
    path = Path(path)
    require(path.exists(), f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValidationError(
            f"incompatible checkpoint: file has version {version}, this build "
            f"reads version {CHECKPOINT_VERSION}")
    return payload


def model_from_checkpoint(path: Path | str) -> tuple[SegmentationModel, dict]:
    """Load the inference model (encoder + classifier + heads) and metadata."""
    payload = read_checkpoint(path)
    config = ModelConfig(**payload["model_config"])
    model = SegmentationModel(payload["class_count"], config)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, payload


def trainer_from_checkpoint(path: Path | str, source_images, source_labels,
                            target_images, eval_images=None, eval_labels=None,
                            run_dir=None) -> Trainer:
    """Rebuild a trainer mid-run; one step after restore is bit-identical to
    one step without the round trip."""
    payload = read_checkpoint(path)
    config = ModelConfig(**payload["model_config"])
    model = SegmentationModel(payload["class_count"], config)
    trainer = Trainer(model, TrainConfig(**payload["train_config"]),
                      ContrastConfig(**payload["contrast_config"]),
                      source_images, source_labels, target_images,
                      eval_images, eval_labels, run_dir)
    trainer.restore(payload)
    return trainer


def create_trainer(class_count: int, train_config: TrainConfig,
                   contrast_config: ContrastConfig, model_config: ModelConfig,
                   source_images, source_labels, target_images,
                   eval_images=None, eval_labels=None,
                   run_dir=None) -> Trainer:
    """Build a freshly initialized trainer whose model init, teacher and RNG
    streams all derive from ``train_config.seed``."""
    model = build_model(class_count, model_config, seed=train_config.seed)
    return Trainer(model, train_config, contrast_config, source_images,
                   source_labels, target_images, eval_images, eval_labels,
                   run_dir)
