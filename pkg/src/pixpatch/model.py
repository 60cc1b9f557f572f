"""Student network bundle and its exponential-moving-average teacher.

The bundle is a small residual convolutional encoder (stride ``k`` feature
grid) with three per-position MLP heads: a classifier (upsampled back to input
resolution) and two architecturally identical but parameter-independent
projection heads used only by the training-time contrastive losses. Inference
needs the encoder and classifier alone; both projection heads can be dropped.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .validation import ValidationError, require


@dataclass
class ModelConfig:
    widths: tuple[int, ...] = (32, 64, 128)   # stem + one width per stride-2 stage
    blocks: int = 1                           # residual blocks at the final width
    embed_dim: int = 64                       # projection head output width
    group_norm_groups: int = 8

    @property
    def stride(self) -> int:
        return 2 ** (len(self.widths) - 1)

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def validate(self) -> None:
        require(len(self.widths) >= 2, "need at least one downsampling stage")
        require(all(w % self.group_norm_groups == 0 for w in self.widths),
                f"widths {self.widths} must be divisible by {self.group_norm_groups}")
        require(self.blocks >= 0 and self.embed_dim >= 1, "invalid model config")


def _norm(channels: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(groups, channels)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = _norm(channels, groups)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _norm(channels, groups)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(x + h)


class Encoder(nn.Module):
    """Stride-``2^(stages)`` convolutional feature extractor."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        g = config.group_norm_groups
        w = config.widths
        layers: list[nn.Module] = [nn.Conv2d(3, w[0], 3, padding=1), _norm(w[0], g), nn.ReLU()]
        for cin, cout in zip(w[:-1], w[1:]):
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), _norm(cout, g), nn.ReLU()]
        layers += [ResidualBlock(w[-1], g) for _ in range(config.blocks)]
        self.layers = nn.Sequential(*layers)
        self.stride = config.stride
        self.feature_dim = config.feature_dim

    def forward(self, x):
        return self.layers(x)


class MlpHead(nn.Module):
    """Two per-position affine layers with a ReLU between them (1x1 convs)."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Conv2d(in_dim, hidden_dim, 1)
        self.fc2 = nn.Conv2d(hidden_dim, out_dim, 1)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class SegmentationModel(nn.Module):
    """Encoder + classifier head + the two contrastive projection heads."""

    def __init__(self, class_count: int, config: ModelConfig | None = None):
        super().__init__()
        require(class_count >= 2, f"class_count must be >= 2, got {class_count}")
        self.config = config or ModelConfig()
        self.class_count = class_count
        self.encoder = Encoder(self.config)
        d = self.config.feature_dim
        self.head_cls = MlpHead(d, d, class_count)
        self.head_pixel = MlpHead(d, d, self.config.embed_dim)
        self.head_patch = MlpHead(d, d, self.config.embed_dim)

    @property
    def stride(self) -> int:
        return self.encoder.stride

    def _check_dims(self, images: torch.Tensor) -> None:
        require(images.dim() == 4 and images.shape[1] == 3,
                f"expected (B, 3, H, W) input, got {tuple(images.shape)}")
        k = self.stride
        if images.shape[-2] % k or images.shape[-1] % k:
            raise ValidationError(
                f"input dims {tuple(images.shape[-2:])} must be divisible by stride {k}")

    def features(self, images: torch.Tensor) -> torch.Tensor:
        self._check_dims(images)
        return self.encoder(images)

    def segment_from(self, feats: torch.Tensor) -> torch.Tensor:
        logits = self.head_cls(feats)
        return F.interpolate(logits, scale_factor=self.stride,
                             mode="bilinear", align_corners=False)

    def embed_from(self, feats: torch.Tensor, head: str) -> torch.Tensor:
        if head not in ("pixel", "patch"):
            raise ValidationError(f"head must be 'pixel' or 'patch', got {head!r}")
        module = self.head_pixel if head == "pixel" else self.head_patch
        if module is None:
            raise ValidationError("projection heads have been dropped")
        return module(feats)

    def forward_segment(self, images: torch.Tensor) -> torch.Tensor:
        """Per-pixel class scores of shape (B, C, H, W); inference path."""
        return self.segment_from(self.features(images))

    def forward_embed(self, images: torch.Tensor, head: str) -> torch.Tensor:
        """Projection-head embedding grid of shape (B, D_emb, H/k, W/k)."""
        return self.embed_from(self.features(images), head)

    forward = forward_segment

    def drop_projection_heads(self) -> None:
        """Remove the training-only heads; segmentation is unaffected."""
        self.head_pixel = None
        self.head_patch = None

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(class_count: int, config: ModelConfig | None = None,
                seed: int | None = None) -> SegmentationModel:
    """Construct a model; with ``seed``, initialization is reproducible and
    does not disturb the ambient torch RNG state."""
    if seed is None:
        return SegmentationModel(class_count, config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SegmentationModel(class_count, config)


def ema_update(teacher_params, student_params, momentum: float) -> None:
    """In-place teacher <- momentum * teacher + (1 - momentum) * student.

    Parameter sequences must be congruent; a shape mismatch raises.
    """
    require(0.0 <= momentum <= 1.0, f"momentum must lie in [0, 1], got {momentum}")
    teacher_params = list(teacher_params)
    student_params = list(student_params)
    require(len(teacher_params) == len(student_params),
            f"parameter count mismatch: {len(teacher_params)} vs {len(student_params)}")
    with torch.no_grad():
        for t, s in zip(teacher_params, student_params):
            if t.shape != s.shape:
                raise ValidationError(f"parameter shape mismatch: {tuple(t.shape)} "
                                      f"vs {tuple(s.shape)}")
            t.mul_(momentum).add_(s.detach().to(t.dtype), alpha=1.0 - momentum)


@dataclass
class TeacherConfig:
    momentum: float = 0.999
    init: str = "copy"          # "copy" | "random"
    random_init_seed: int = field(default=0)


class EmaTeacher:
    """EMA copy of the student's segmentation path (encoder + classifier).

    Never receives gradients; the projection heads have no teacher copies
    because pseudo-labels only need the segmentation path.
    """

    def __init__(self, student: SegmentationModel,
                 config: TeacherConfig | None = None):
        self.config = config or TeacherConfig()
        require(self.config.init in ("copy", "random"),
                f"teacher init must be copy|random, got {self.config.init!r}")
        self.encoder = copy.deepcopy(student.encoder)
        self.head_cls = copy.deepcopy(student.head_cls)
        self.stride = student.stride
        if self.config.init == "random":
            fresh = build_model(student.class_count, student.config,
                                seed=self.config.random_init_seed)
            self.encoder.load_state_dict(fresh.encoder.state_dict())
            self.head_cls.load_state_dict(fresh.head_cls.state_dict())
        for module in (self.encoder, self.head_cls):
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)

    def _params(self):
        yield from self.encoder.parameters()
        yield from self.head_cls.parameters()

    def update(self, student: SegmentationModel,
               momentum: float | None = None) -> None:
        m = self.config.momentum if momentum is None else momentum
        student_params = list(student.encoder.parameters()) + \
            list(student.head_cls.parameters())
        ema_update(self._params(), student_params, m)

    @torch.no_grad()
    def forward_segment(self, images: torch.Tensor) -> torch.Tensor:
        feats = self.encoder(images)
        logits = self.head_cls(feats)
        return F.interpolate(logits, scale_factor=self.stride,
                             mode="bilinear", align_corners=False)

    def state_dict(self) -> dict:
        return {"encoder": self.encoder.state_dict(),
                "head_cls": self.head_cls.state_dict(),
                "momentum": self.config.momentum,
                "init": self.config.init}

    def load_state_dict(self, state: dict) -> None:
        self.encoder.load_state_dict(state["encoder"])
        self.head_cls.load_state_dict(state["head_cls"])
        self.config.momentum = state["momentum"]
        self.config.init = state["init"]


def parameter_vector(module: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])
