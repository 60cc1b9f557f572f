"""Overlapping-crop geometry with exact feature-grid correspondence.

Two equally sized crops are sampled from a randomly resized image under an
IoU constraint. All crop coordinates are snapped down to multiples of the
encoder stride, so a cell of one crop's feature grid and the matching cell of
the other crop's grid denote exactly the same block of resized-image pixels.
That makes the positive-pair mapping between the two grids a pure integer
translation with no interpolation ambiguity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .validation import ValidationError, require


@dataclass(frozen=True)
class Rect:
    """Half-open pixel rectangle [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        require(self.x1 > self.x0 and self.y1 > self.y0,
                f"degenerate rect ({self.x0},{self.y0},{self.x1},{self.y1})")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def intersect(self, other: "Rect") -> "Rect | None":
        x0, y0 = max(self.x0, other.x0), max(self.y0, other.y0)
        x1, y1 = min(self.x1, other.x1), min(self.y1, other.y1)
        if x1 <= x0 or y1 <= y0:
            return None
        return Rect(x0, y0, x1, y1)

    def is_stride_aligned(self, stride: int) -> bool:
        return all(v % stride == 0 for v in (self.x0, self.y0, self.x1, self.y1))


def rect_iou(a: Rect, b: Rect) -> float:
    inter = a.intersect(b)
    inter_area = inter.area if inter is not None else 0
    return inter_area / float(a.area + b.area - inter_area)


@dataclass(frozen=True)
class CropPair:
    """Two same-size, stride-aligned crops of one resized image."""

    resize_ratio: float
    resized_h: int
    resized_w: int
    rect1: Rect
    rect2: Rect
    overlap: Rect        # rect1 ∩ rect2, in the resized-image frame
    stride: int

    def validate(self) -> None:
        require(self.rect1.width == self.rect2.width
                and self.rect1.height == self.rect2.height,
                "crop rects must have identical size")
        for name, rect in (("rect1", self.rect1), ("rect2", self.rect2)):
            require(rect.is_stride_aligned(self.stride),
                    f"{name} is not aligned to stride {self.stride}")
            require(0 <= rect.x0 and rect.x1 <= self.resized_w
                    and 0 <= rect.y0 and rect.y1 <= self.resized_h,
                    f"{name} exceeds the resized image bounds")
        inter = self.rect1.intersect(self.rect2)
        require(inter is not None, "crops do not overlap")
        require(inter == self.overlap, "stored overlap is not rect1 ∩ rect2")


@dataclass(frozen=True)
class CorrespondenceMap:
    """Cell-to-cell positive pairs between the two crops' feature grids.

    ``crop1_cells[n] = (row, col)`` in crop 1's grid corresponds to
    ``crop2_cells[n]`` in crop 2's grid; both denote the same stride-sized
    block of resized-image pixels.
    """

    stride: int
    crop1_cells: np.ndarray    # (n, 2) int64 (row, col)
    crop2_cells: np.ndarray    # (n, 2) int64

    @property
    def pairs(self) -> list[tuple[tuple[int, int], tuple[int, int]]]:
        return [tuple((tuple(a), tuple(b)))
                for a, b in zip(self.crop1_cells.tolist(), self.crop2_cells.tolist())]

    def __len__(self) -> int:
        return self.crop1_cells.shape[0]


def snap_down(value: int | float, stride: int) -> int:
    return (int(value) // stride) * stride


def sample_crop_pair(image_h: int, image_w: int, patch_size: int,
                     resize_range: tuple[float, float],
                     iou_range: tuple[float, float],
                     stride: int, rng: np.random.Generator,
                     max_attempts: int = 100) -> CropPair:
    """Rejection-sample a valid CropPair.

    Draws a shared resize ratio, snaps the resized dims and both crop origins
    down to multiples of ``stride``, and accepts once the snapped rects' IoU
    falls inside ``iou_range`` (bounds inclusive). Raises ValidationError,
    naming the constraint, if the configuration is infeasible or no valid pair
    is found within ``max_attempts``.
    """
    require(stride >= 1 and patch_size % stride == 0,
            f"stride {stride} must divide patch_size {patch_size}")
    lo, hi = resize_range
    require(0 < lo <= hi, f"invalid resize_range {resize_range}")
    iou_lo, iou_hi = iou_range
    require(0.0 <= iou_lo <= iou_hi <= 1.0, f"invalid iou_range {iou_range}")

    min_dim = snap_down(min(image_h, image_w) * lo, stride)
    if min_dim < patch_size:
        raise ValidationError(
            f"infeasible constraint: patch_size {patch_size} exceeds the smallest "
            f"possible resized dimension {min_dim} (image {image_h}x{image_w}, "
            f"resize ratio >= {lo}, stride {stride})")

    for _ in range(max_attempts):
        ratio = float(rng.uniform(lo, hi))
        resized_h = snap_down(image_h * ratio, stride)
        resized_w = snap_down(image_w * ratio, stride)
        rects = []
        for _ in range(2):
            x0 = snap_down(int(rng.integers(0, resized_w - patch_size + 1)), stride)
            y0 = snap_down(int(rng.integers(0, resized_h - patch_size + 1)), stride)
            rects.append(Rect(x0, y0, x0 + patch_size, y0 + patch_size))
        iou = rect_iou(rects[0], rects[1])
        if iou_lo <= iou <= iou_hi:
            overlap = rects[0].intersect(rects[1])
            if overlap is None:
                continue    # iou_lo == 0 with disjoint rects: no usable overlap
            pair = CropPair(resize_ratio=ratio, resized_h=resized_h,
                            resized_w=resized_w, rect1=rects[0], rect2=rects[1],
                            overlap=overlap, stride=stride)
            pair.validate()
            return pair

    raise ValidationError(
        f"no crop pair with IoU in [{iou_lo}, {iou_hi}] found in {max_attempts} "
        f"attempts (patch_size {patch_size}, image {image_h}x{image_w}, "
        f"resize_range {resize_range}); the IoU constraint is likely infeasible")


def build_correspondence(pair: CropPair) -> CorrespondenceMap:
    """Enumerate the exact positive-pair mapping over the overlap region.

    For every stride cell of the overlap, the crop-local indices are
    ``(row, col) = ((y - rect.y0) / k, (x - rect.x0) / k)``; the mapping is the
    translation by ``((rect1.y0 - rect2.y0) / k, (rect1.x0 - rect2.x0) / k)``
    restricted to crop 1's overlap cells. Bijective by construction.
    """
    pair.validate()
    k = pair.stride
    ov = pair.overlap
    if not ov.is_stride_aligned(k):
        raise ValidationError(f"overlap {ov} is not aligned to stride {k}")
    ys = np.arange(ov.y0, ov.y1, k, dtype=np.int64)
    xs = np.arange(ov.x0, ov.x1, k, dtype=np.int64)
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    cells_y = grid_y.ravel()
    cells_x = grid_x.ravel()
    crop1 = np.stack([(cells_y - pair.rect1.y0) // k,
                      (cells_x - pair.rect1.x0) // k], axis=1)
    crop2 = np.stack([(cells_y - pair.rect2.y0) // k,
                      (cells_x - pair.rect2.x0) // k], axis=1)
    return CorrespondenceMap(stride=k, crop1_cells=crop1, crop2_cells=crop2)


def crop_image(image: np.ndarray, rect: Rect) -> np.ndarray:
    """Cut ``rect`` out of an (H, W, ...) array (no copy avoidance promises)."""
    require(0 <= rect.y0 and rect.y1 <= image.shape[0]
            and 0 <= rect.x0 and rect.x1 <= image.shape[1],
            f"rect {rect} exceeds image shape {image.shape[:2]}")
    return image[rect.y0:rect.y1, rect.x0:rect.x1]


def resized_dims(image_h: int, image_w: int, ratio: float, stride: int) -> tuple[int, int]:
    return snap_down(image_h * ratio, stride), snap_down(image_w * ratio, stride)


def feature_grid_size(patch_size: int, stride: int) -> int:
    require(patch_size % stride == 0, "patch_size must be a stride multiple")
    return patch_size // stride


def cell_image_coords(rect: Rect, row: int, col: int, stride: int) -> tuple[int, int]:
    """Resized-image pixel coordinates (y, x) of a crop feature cell's origin."""
    return rect.y0 + row * stride, rect.x0 + col * stride


def overlap_cell_count(pair: CropPair) -> int:
    return (pair.overlap.height // pair.stride) * (pair.overlap.width // pair.stride)


def check_exactness(pair: CropPair, corr: CorrespondenceMap) -> None:
    """Assert every pair resolves to identical resized-image coordinates.

    Integer equality, no tolerance. Raises AssertionError on any mismatch;
    used by the verification suite and the tests.
    """
    seen1, seen2 = set(), set()
    for (i1, j1), (i2, j2) in corr.pairs:
        c1 = cell_image_coords(pair.rect1, i1, j1, pair.stride)
        c2 = cell_image_coords(pair.rect2, i2, j2, pair.stride)
        assert c1 == c2, f"correspondence mismatch: {c1} != {c2}"
        seen1.add((i1, j1))
        seen2.add((i2, j2))
    expected = overlap_cell_count(pair)
    assert len(seen1) == len(seen2) == len(corr) == expected, \
        f"correspondence is not a bijection over the overlap ({len(corr)} vs {expected})"
    grid = feature_grid_size(pair.rect1.width, pair.stride)
    for cells in (seen1, seen2):
        for i, j in cells:
            assert 0 <= i < grid and 0 <= j < grid, f"cell ({i},{j}) outside the crop grid"
