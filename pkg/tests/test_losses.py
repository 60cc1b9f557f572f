import math

import numpy as np
import pytest
import torch

from pixpatch import (ContrastConfig, IGNORE_LABEL, ValidationError,
                      downsample_labels, masked_cross_entropy,
                      mixed_cross_entropy, patch_contrast, pixel_contrast,
                      source_cross_entropy, total_loss)
from pixpatch.geometry import CorrespondenceMap
from pixpatch.losses import mining_keep_count
from pixpatch.reference import (cross_entropy_reference,
                                patch_contrast_reference,
                                pixel_contrast_reference)
from pixpatch.trainer import TrainConfig


def full_cfg(**kwargs):
    base = dict(temperature=0.5, anchors_per_class=10_000, hard_fraction=1.0)
    base.update(kwargs)
    return ContrastConfig(**base)


def grid(cells, dim_first=True):
    """(N, D) list of vectors -> (1, D, 1, N) embedding grid tensor."""
    arr = np.asarray(cells, dtype=np.float64).T[None, :, None, :]
    return torch.from_numpy(arr.copy())


# ------------------------------------------------------------ cross-entropy


def test_ce_uniform_scores():
    scores = torch.zeros(1, 19, 4, 4)
    labels = np.random.default_rng(0).integers(0, 19, size=(1, 4, 4))
    loss, count = source_cross_entropy(scores, labels)
    assert count == 16
    assert float(loss) == pytest.approx(math.log(19.0), abs=1e-6)


def test_ce_saturated_correct_prediction():
    labels = np.random.default_rng(1).integers(0, 5, size=(1, 6, 6))
    scores = torch.full((1, 5, 6, 6), -40.0)
    for i in range(6):
        for j in range(6):
            scores[0, labels[0, i, j], i, j] = 40.0
    loss, _ = source_cross_entropy(scores, labels)
    assert float(loss) == pytest.approx(0.0, abs=1e-6)


def test_ce_matches_scalar_reference(rng):
    scores = rng.normal(size=(2, 4, 4, 4)) * 2.5
    labels = rng.integers(0, 4, size=(2, 4, 4))
    labels[0, 0, 0] = IGNORE_LABEL
    loss, count = source_cross_entropy(torch.from_numpy(scores), labels)
    expected, ref_count = cross_entropy_reference(scores, labels)
    assert count == ref_count
    assert float(loss) == pytest.approx(expected, abs=1e-6)


def test_ce_all_ignore_is_zero():
    scores = torch.randn(1, 3, 4, 4)
    labels = np.full((1, 4, 4), IGNORE_LABEL)
    loss, count = source_cross_entropy(scores, labels)
    assert count == 0 and float(loss) == 0.0


def test_mixed_ce_fully_masked_is_zero(rng):
    scores = torch.from_numpy(rng.normal(size=(1, 4, 4, 4)))
    labels = rng.integers(0, 4, size=(1, 4, 4))
    loss, count = mixed_cross_entropy(scores, labels, np.zeros((1, 4, 4), bool))
    assert count == 0 and float(loss) == 0.0


def test_mixed_ce_unmasked_equals_source_form(rng):
    scores = torch.from_numpy(rng.normal(size=(1, 5, 4, 4)))
    labels = rng.integers(0, 5, size=(1, 4, 4))
    full, _ = mixed_cross_entropy(scores, labels, np.ones((1, 4, 4), bool))
    plain, _ = source_cross_entropy(scores, labels)
    assert float(full) == pytest.approx(float(plain), abs=1e-12)


def test_mixed_ce_half_masked_matches_reference(rng):
    scores = rng.normal(size=(2, 3, 4, 4))
    labels = rng.integers(0, 3, size=(2, 4, 4))
    mask = rng.uniform(size=(2, 4, 4)) < 0.5
    loss, count = mixed_cross_entropy(torch.from_numpy(scores), labels, mask)
    expected, ref_count = cross_entropy_reference(scores, labels, mask)
    assert count == ref_count
    assert float(loss) == pytest.approx(expected, abs=1e-6)


# ------------------------------------------------------------ pixel contrast


def test_pixel_no_negatives_is_zero():
    cells = [[1.0, 0.0], [0.8, 0.6]]
    loss, stats = pixel_contrast(grid(cells), np.array([[[0, 0]]]), full_cfg())
    assert float(loss) == 0.0
    assert stats.pairs == 2


def test_pixel_closed_form_one_pos_one_neg():
    # anchor/positive at cosine 1, negative at cosine -1, temperature 1
    cells = [[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]]
    labels = np.array([[[0, 0, 1]]])
    loss, _ = pixel_contrast(grid(cells), labels, full_cfg(temperature=1.0))
    assert float(loss) == pytest.approx(math.log(1.0 + math.exp(-2.0)), abs=1e-9)


@pytest.mark.parametrize("hard_fraction", [1.0, 0.5, 0.25])
@pytest.mark.parametrize("denominator", ["infonce", "literal"])
def test_pixel_matches_bruteforce(rng, hard_fraction, denominator):
    for _ in range(12):
        batch = int(rng.integers(1, 3))
        emb = rng.normal(size=(batch, int(rng.integers(2, 7)), 3, 5))
        labels = rng.integers(0, 4, size=(batch, 3, 5))
        if rng.uniform() < 0.4:
            labels[tuple(rng.integers(0, s) for s in labels.shape)] = IGNORE_LABEL
        cfg = full_cfg(temperature=float(rng.uniform(0.08, 1.0)),
                       hard_fraction=hard_fraction, denominator=denominator,
                       cross_batch=bool(rng.integers(0, 2)))
        loss, stats = pixel_contrast(torch.from_numpy(emb), labels, cfg)
        expected, pairs = pixel_contrast_reference(emb, labels, cfg)
        assert stats.pairs == pairs
        assert float(loss) == pytest.approx(expected, abs=1e-6)


def test_pixel_no_eligible_class_returns_zero(rng):
    emb = torch.from_numpy(rng.normal(size=(1, 4, 1, 3)))
    labels = np.array([[[0, 1, 2]]])    # every class has one cell
    loss, stats = pixel_contrast(emb, labels, full_cfg())
    assert float(loss) == 0.0 and stats.pairs == 0


def test_pixel_scale_invariance(rng):
    emb = rng.normal(size=(1, 6, 4, 4))
    labels = rng.integers(0, 3, size=(1, 4, 4))
    loss_a, _ = pixel_contrast(torch.from_numpy(emb.copy()), labels, full_cfg())
    emb_scaled = emb.copy()
    emb_scaled[0, :, 1, 2] *= 7.5
    emb_scaled[0, :, 3, 0] *= 0.01
    loss_b, _ = pixel_contrast(torch.from_numpy(emb_scaled), labels, full_cfg())
    assert float(loss_a) == pytest.approx(float(loss_b), abs=1e-9)


def test_pixel_permutation_invariance(rng):
    emb = rng.normal(size=(1, 5, 1, 12))
    labels = rng.integers(0, 3, size=(1, 1, 12))
    loss_a, _ = pixel_contrast(torch.from_numpy(emb), labels, full_cfg())
    perm = rng.permutation(12)
    loss_b, _ = pixel_contrast(torch.from_numpy(emb[:, :, :, perm]),
                               labels[:, :, perm], full_cfg())
    assert float(loss_a) == pytest.approx(float(loss_b), abs=1e-9)


def test_temperature_monotonicity():
    cells = [[1.0, 0.0], [0.9, math.sqrt(1 - 0.81)], [0.1, math.sqrt(1 - 0.01)]]
    labels = np.array([[[0, 0, 1]]])
    losses = []
    for tau in (1.0, 0.5, 0.2, 0.1):
        value, _ = pixel_contrast(grid(cells), labels, full_cfg(temperature=tau))
        losses.append(float(value))
    assert losses == sorted(losses, reverse=True)


def test_literal_denominator_couples_positives():
    # three same-class cells, no negatives: infonce is 0, literal is not
    cells = [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]
    labels = np.array([[[1, 1, 1]]])
    zero, _ = pixel_contrast(grid(cells), labels, full_cfg())
    coupled, _ = pixel_contrast(grid(cells), labels,
                                full_cfg(denominator="literal"))
    assert float(zero) == 0.0
    assert float(coupled) > 0.1


def test_anchor_subsampling_uses_rng(rng):
    emb = torch.from_numpy(rng.normal(size=(1, 4, 6, 6)))
    labels = np.zeros((1, 6, 6), dtype=np.int64)
    labels[0, :3] = 1
    cfg = full_cfg(anchors_per_class=4)
    with pytest.raises(ValidationError, match="rng"):
        pixel_contrast(emb, labels, cfg, rng=None)
    loss, stats = pixel_contrast(emb, labels, cfg, rng=np.random.default_rng(0))
    assert stats.anchors == 8    # 4 per class, 2 classes
    assert math.isfinite(float(loss))


def test_mining_keep_count_bounds():
    assert mining_keep_count(0, 0.1) == 0
    assert mining_keep_count(5, 0.1) == 1      # at least one survives
    assert mining_keep_count(20, 0.1) == 2
    assert mining_keep_count(20, 1.0) == 20    # fraction 1 keeps everything
    assert mining_keep_count(3, 0.999) == 3


# ------------------------------------------------------------ patch contrast


def _single_cell_corr():
    return CorrespondenceMap(stride=1,
                             crop1_cells=np.array([[0, 0]], dtype=np.int64),
                             crop2_cells=np.array([[0, 0]], dtype=np.int64))


def test_patch_single_cell_no_pool_is_zero(rng):
    f1 = torch.from_numpy(rng.normal(size=(4, 1, 1)))
    f2 = torch.from_numpy(rng.normal(size=(4, 1, 1)))
    loss, stats = patch_contrast(f1, f2, _single_cell_corr(), None, full_cfg())
    assert float(loss) == 0.0
    assert stats.pairs == 2


def test_patch_identical_crops_match_oracle(rng):
    values = rng.normal(size=(5, 3, 3))
    corr = CorrespondenceMap(
        stride=1,
        crop1_cells=np.array([[i, j] for i in range(3) for j in range(3)]),
        crop2_cells=np.array([[i, j] for i in range(3) for j in range(3)]))
    cfg = full_cfg(temperature=0.3)
    loss, _ = patch_contrast(torch.from_numpy(values.copy()),
                             torch.from_numpy(values.copy()), corr, None, cfg)
    expected, _ = patch_contrast_reference(values, values, corr, None, cfg)
    assert float(loss) == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize("hard_fraction", [1.0, 0.4])
@pytest.mark.parametrize("with_pool", [False, True])
def test_patch_matches_bruteforce(rng, hard_fraction, with_pool):
    for _ in range(10):
        dim = int(rng.integers(2, 7))
        f1 = rng.normal(size=(dim, 2, 2))
        f2 = rng.normal(size=(dim, 2, 3))
        n = int(rng.integers(1, 5))
        pick1 = rng.choice(4, size=n, replace=False)
        pick2 = rng.choice(6, size=n, replace=False)
        corr = CorrespondenceMap(
            stride=1,
            crop1_cells=np.stack([pick1 // 2, pick1 % 2], axis=1),
            crop2_cells=np.stack([pick2 // 3, pick2 % 3], axis=1))
        pool = rng.normal(size=(int(rng.integers(1, 7)), dim)) if with_pool else None
        cfg = full_cfg(temperature=float(rng.uniform(0.1, 1.0)),
                       hard_fraction=hard_fraction)
        pool_t = None if pool is None else torch.from_numpy(pool)
        loss, stats = patch_contrast(torch.from_numpy(f1), torch.from_numpy(f2),
                                     corr, pool_t, cfg)
        expected, pairs = patch_contrast_reference(f1, f2, corr, pool, cfg)
        assert stats.pairs == pairs == 2 * n
        assert float(loss) == pytest.approx(expected, abs=1e-6)


def test_patch_empty_correspondence_rejected(rng):
    corr = CorrespondenceMap(stride=1,
                             crop1_cells=np.zeros((0, 2), dtype=np.int64),
                             crop2_cells=np.zeros((0, 2), dtype=np.int64))
    with pytest.raises(ValidationError):
        patch_contrast(torch.rand(3, 2, 2), torch.rand(3, 2, 2), corr, None,
                       full_cfg())


def test_patch_scale_invariance(rng):
    f1 = rng.normal(size=(4, 2, 2))
    f2 = rng.normal(size=(4, 2, 2))
    corr = _single_cell_corr()
    loss_a, _ = patch_contrast(torch.from_numpy(f1.copy()),
                               torch.from_numpy(f2.copy()), corr, None, full_cfg())
    f1_scaled = f1.copy()
    f1_scaled[:, 1, 1] *= 40.0
    loss_b, _ = patch_contrast(torch.from_numpy(f1_scaled),
                               torch.from_numpy(f2.copy()), corr, None, full_cfg())
    assert float(loss_a) == pytest.approx(float(loss_b), abs=1e-9)


# ------------------------------------------------------------- downsampling


def test_downsample_picks_cell_centers():
    labels = np.arange(64).reshape(1, 8, 8)
    down = downsample_labels(labels, stride=4)
    # centers at rows/cols 2 and 6
    assert down.tolist() == [[[2 * 8 + 2, 2 * 8 + 6], [6 * 8 + 2, 6 * 8 + 6]]]


def test_downsample_mixed_cells_to_ignore():
    labels = np.zeros((1, 4, 4), dtype=np.int64)
    labels[0, 0, 0] = 1    # pollute the first 2x2 block
    down = downsample_labels(labels, stride=2, mixed_to_ignore=True)
    assert down[0, 0, 0] == IGNORE_LABEL
    assert (down[0].ravel()[1:] == 0).all()


# --------------------------------------------------------------- total loss


def test_total_with_contrast_disabled():
    report = total_loss(1.25, 0.75, 3.0, 4.0, alpha=0.0, beta=0.0)
    assert report.total == pytest.approx(2.0)


def test_total_arithmetic():
    report = total_loss(1.0, 2.0, 3.0, 4.0, alpha=0.1, beta=0.1)
    assert report.total == pytest.approx(3.7)


def test_total_rejects_non_finite():
    with pytest.raises(ValidationError, match="non-finite"):
        total_loss(float("nan"), 0.0, 0.0, 0.0, alpha=0.1, beta=0.1)
    with pytest.raises(ValidationError, match="non-finite"):
        total_loss(0.0, 0.0, float("inf"), 0.0, alpha=0.1, beta=0.1)


def test_paper_default_hyperparameters():
    train = TrainConfig()
    assert train.alpha == 0.1 and train.beta == 0.1
    assert train.confidence_threshold == 0.968
    assert train.ema_momentum == 0.999
    contrast = ContrastConfig()
    assert contrast.hard_fraction == 0.10
