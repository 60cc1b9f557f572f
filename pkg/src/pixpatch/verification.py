"""Self-verification suites: finite-difference gradient checks and
oracle-equivalence checks of the vectorized losses against the scalar
reference implementations. Exposed to users through the ``gradcheck``
command and consumed by the test suite.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import (CorrespondenceMap, build_correspondence, check_exactness,
                       rect_iou, sample_crop_pair)
from .losses import ContrastConfig, masked_cross_entropy, patch_contrast, pixel_contrast
from .reference import (cross_entropy_reference, miou_reference,
                        patch_contrast_reference, pixel_contrast_reference)
from .evaluation import ConfusionMatrix
from .validation import IGNORE_LABEL


@dataclass
class CheckResult:
    name: str
    passed: bool
    instances: int
    max_error: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = (f"[{status}] {self.name}: {self.instances} instances, "
                f"max error {self.max_error:.3g} ({self.seconds:.1f}s)")
        if self.detail:
            text += f" - {self.detail}"
        return text


def finite_difference_gradient(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences, coordinate by coordinate, in float64."""
    flat = x.astype(np.float64).ravel().copy()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(flat.reshape(x.shape))
        flat[i] = orig - eps
        lo = fn(flat.reshape(x.shape))
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(x.shape)


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-12)
    return float(np.linalg.norm(analytic - numeric)) / scale


def _random_contrast_config(rng, hard_fraction=None) -> ContrastConfig:
    return ContrastConfig(
        temperature=float(rng.uniform(0.07, 1.0)),
        anchors_per_class=10_000,   # full enumeration: keeps the loss a pure function
        hard_fraction=(float(rng.choice([0.3, 0.5, 1.0]))
                       if hard_fraction is None else hard_fraction),
        cross_batch=bool(rng.integers(0, 2)),
        denominator=str(rng.choice(["infonce", "literal"])))


def _random_pixel_instance(rng, max_cells: int, max_dim: int, max_classes: int):
    batch = int(rng.integers(1, 3))
    dim = int(rng.integers(2, max_dim + 1))
    per_image = max_cells // batch
    grid_h = int(rng.integers(1, max(int(math.sqrt(per_image)), 1) + 1))
    grid_w = max(per_image // max(grid_h, 1), 1)
    embeddings = rng.normal(size=(batch, dim, grid_h, grid_w))
    n_classes = int(rng.integers(2, max_classes + 1))
    labels = rng.integers(0, n_classes, size=(batch, grid_h, grid_w))
    if rng.uniform() < 0.3:
        drop = rng.uniform(size=labels.shape) < 0.2
        labels = np.where(drop, IGNORE_LABEL, labels)
    return embeddings, labels.astype(np.int64)


def _random_correspondence(rng, h1: int, w1: int, h2: int, w2: int,
                           n_pairs: int) -> CorrespondenceMap:
    n = min(n_pairs, h1 * w1, h2 * w2)
    pick1 = rng.choice(h1 * w1, size=n, replace=False)
    pick2 = rng.choice(h2 * w2, size=n, replace=False)
    cells1 = np.stack([pick1 // w1, pick1 % w1], axis=1).astype(np.int64)
    cells2 = np.stack([pick2 // w2, pick2 % w2], axis=1).astype(np.int64)
    return CorrespondenceMap(stride=1, crop1_cells=cells1, crop2_cells=cells2)


def _random_patch_instance(rng, max_dim: int, max_grid: int, max_pool: int):
    dim = int(rng.integers(2, max_dim + 1))
    h1, w1 = int(rng.integers(1, max_grid + 1)), int(rng.integers(1, max_grid + 1))
    h2, w2 = int(rng.integers(1, max_grid + 1)), int(rng.integers(1, max_grid + 1))
    f1 = rng.normal(size=(dim, h1, w1))
    f2 = rng.normal(size=(dim, h2, w2))
    corr = _random_correspondence(rng, h1, w1, h2, w2,
                                  int(rng.integers(1, min(h1 * w1, h2 * w2) + 1)))
    pool = rng.normal(size=(int(rng.integers(0, max_pool + 1)), dim))
    if pool.shape[0] == 0:
        pool = None
    return f1, f2, corr, pool


def check_pixel_oracle(instances: int, tolerance: float, seed: int,
                       hard_fraction=None) -> CheckResult:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst, detail = 0.0, ""
    for i in range(instances):
        emb, labels = _random_pixel_instance(rng, max_cells=64, max_dim=8,
                                             max_classes=4)
        config = _random_contrast_config(rng, hard_fraction)
        loss, _ = pixel_contrast(torch.from_numpy(emb), labels, config)
        expected, _ = pixel_contrast_reference(emb, labels, config)
        err = abs(float(loss) - expected)
        if err > worst:
            worst, detail = err, f"worst at instance {i}"
    return CheckResult("pixel contrast vs scalar enumeration", worst <= tolerance,
                       instances, worst, detail if worst > tolerance else "",
                       time.perf_counter() - start)


def check_patch_oracle(instances: int, tolerance: float, seed: int,
                       hard_fraction=None) -> CheckResult:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst, detail = 0.0, ""
    for i in range(instances):
        f1, f2, corr, pool = _random_patch_instance(rng, max_dim=8, max_grid=5,
                                                    max_pool=12)
        config = _random_contrast_config(rng, hard_fraction)
        pool_t = None if pool is None else torch.from_numpy(pool)
        loss, _ = patch_contrast(torch.from_numpy(f1), torch.from_numpy(f2),
                                 corr, pool_t, config)
        expected, _ = patch_contrast_reference(f1, f2, corr, pool, config)
        err = abs(float(loss) - expected)
        if err > worst:
            worst, detail = err, f"worst at instance {i}"
    return CheckResult("patch contrast vs scalar enumeration", worst <= tolerance,
                       instances, worst, detail if worst > tolerance else "",
                       time.perf_counter() - start)


def check_cross_entropy_oracle(instances: int, tolerance: float,
                               seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(instances):
        n_classes = int(rng.integers(2, 7))
        scores = rng.normal(size=(2, n_classes, 4, 4)) * 3
        labels = rng.integers(0, n_classes, size=(2, 4, 4))
        labels = np.where(rng.uniform(size=labels.shape) < 0.15, IGNORE_LABEL, labels)
        mask = rng.uniform(size=labels.shape) < 0.7
        loss, _ = masked_cross_entropy(torch.from_numpy(scores), labels, mask)
        expected, _ = cross_entropy_reference(scores, labels, mask)
        worst = max(worst, abs(float(loss) - expected))
    return CheckResult("cross-entropy vs scalar loop", worst <= tolerance,
                       instances, worst, "", time.perf_counter() - start)


def check_correspondence_exactness(instances: int, seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    failures = 0
    iou_lo, iou_hi = 0.1, 1.0
    for _ in range(instances):
        stride = int(rng.choice([2, 4, 8]))
        patch = stride * int(rng.integers(4, 13))
        size = patch + stride * int(rng.integers(0, 9))
        pair = sample_crop_pair(size, size, patch, (1.0, 2.0),
                                (iou_lo, iou_hi), stride, rng)
        iou = rect_iou(pair.rect1, pair.rect2)
        if not (iou_lo <= iou <= iou_hi and 1.0 <= pair.resize_ratio <= 2.0):
            failures += 1
            continue
        try:
            check_exactness(pair, build_correspondence(pair))
        except AssertionError:
            failures += 1
    return CheckResult("crop correspondence exactness + IoU constraint",
                       failures == 0, instances, float(failures),
                       f"{failures} failures" if failures else "",
                       time.perf_counter() - start)


def check_miou_fixture() -> CheckResult:
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        n_classes = int(rng.integers(2, 6))
        gt = rng.integers(0, n_classes, size=(8, 8))
        pred = rng.integers(0, n_classes, size=(8, 8))
        cm = ConfusionMatrix(n_classes).update(pred, gt)
        worst = max(worst, abs(cm.mean_iou() - miou_reference(pred, gt, n_classes)))
    perfect = ConfusionMatrix(3).update(np.arange(9).reshape(3, 3) % 3,
                                        np.arange(9).reshape(3, 3) % 3)
    worst = max(worst, abs(perfect.mean_iou() - 1.0))
    return CheckResult("mIoU vs per-pixel set computation", worst == 0.0, 21,
                       worst, "", time.perf_counter() - start)


def run_oracle_checks(instances: int = 200, tolerance: float = 1e-6,
                      seed: int = 0) -> list[CheckResult]:
    half = max(instances // 2, 1)
    return [
        check_pixel_oracle(half, tolerance, seed),
        check_patch_oracle(half, tolerance, seed + 1),
        check_cross_entropy_oracle(max(instances // 4, 1), tolerance, seed + 2),
        check_correspondence_exactness(1000, seed + 3),
        check_miou_fixture(),
    ]


def _pixel_grad_instance(rng):
    emb, labels = _random_pixel_instance(rng, max_cells=16, max_dim=8, max_classes=3)
    config = _random_contrast_config(rng)

    def loss_value(arr: np.ndarray) -> float:
        value, _ = pixel_contrast(torch.from_numpy(arr), labels, config)
        return float(value)

    tensor = torch.from_numpy(emb.copy()).requires_grad_(True)
    loss, _ = pixel_contrast(tensor, labels, config)
    loss.backward()
    analytic = tensor.grad.numpy()
    numeric = finite_difference_gradient(loss_value, emb)
    return relative_gradient_error(analytic, numeric)


def _patch_grad_instance(rng):
    f1, f2, corr, pool = _random_patch_instance(rng, max_dim=6, max_grid=3,
                                                max_pool=6)
    config = _random_contrast_config(rng)
    pool_t = None if pool is None else torch.from_numpy(pool)
    split = f1.size

    def loss_value(arr: np.ndarray) -> float:
        t1 = torch.from_numpy(arr.ravel()[:split].reshape(f1.shape))
        t2 = torch.from_numpy(arr.ravel()[split:].reshape(f2.shape))
        value, _ = patch_contrast(t1, t2, corr, pool_t, config)
        return float(value)

    t1 = torch.from_numpy(f1.copy()).requires_grad_(True)
    t2 = torch.from_numpy(f2.copy()).requires_grad_(True)
    loss, _ = patch_contrast(t1, t2, corr, pool_t, config)
    loss.backward()
    analytic = np.concatenate([t1.grad.numpy().ravel(), t2.grad.numpy().ravel()])
    packed = np.concatenate([f1.ravel(), f2.ravel()])
    numeric = finite_difference_gradient(loss_value, packed)
    return relative_gradient_error(analytic, numeric)


def run_gradient_checks(instances: int = 50, tolerance: float = 1e-4,
                        seed: int = 0) -> list[CheckResult]:
    """Autograd vs central finite differences on small random instances."""
    results = []
    for name, instance_fn in (("pixel contrast gradients", _pixel_grad_instance),
                              ("patch contrast gradients", _patch_grad_instance)):
        rng = np.random.default_rng(seed)
        seed += 1
        start = time.perf_counter()
        worst, detail = 0.0, ""
        count = max(instances // 2, 1)
        for i in range(count):
            err = instance_fn(rng)
            if err > worst:
                worst, detail = err, f"worst at instance {i}"
        results.append(CheckResult(f"{name} vs central differences",
                                   worst <= tolerance, count, worst,
                                   detail if worst > tolerance else "",
                                   time.perf_counter() - start))
    return results


def run_all_checks(grad_instances: int = 50, oracle_instances: int = 200,
                   grad_tolerance: float = 1e-4, oracle_tolerance: float = 1e-6,
                   seed: int = 0) -> list[CheckResult]:
    return (run_oracle_checks(oracle_instances, oracle_tolerance, seed)
            + run_gradient_checks(grad_instances, grad_tolerance, seed + 100))
