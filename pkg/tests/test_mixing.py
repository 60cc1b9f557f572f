import math

import numpy as np
import pytest

from pixpatch import IGNORE_LABEL, ValidationError, class_mix, pseudo_label
from pixpatch.mixing import select_half_classes


def test_uniform_scores_are_never_confident():
    scores = np.zeros((19, 8, 8))
    pl = pseudo_label(scores, threshold=0.968)
    assert pl.confidence == pytest.approx(np.full((8, 8), 1.0 / 19.0))
    assert not pl.valid_mask.any()
    assert (pl.labels == 0).all()    # tie broken toward class 0


def test_saturated_scores_are_confident():
    scores = np.zeros((5, 4, 4))
    scores[3] = 20.0
    pl = pseudo_label(scores, threshold=0.968)
    assert (pl.labels == 3).all()
    assert pl.valid_mask.all()
    assert pl.confidence.min() > 0.999


def test_two_class_confidence_at_097():
    # logits (log 0.97, log 0.03) normalize to exactly (0.97, 0.03)
    scores = np.empty((2, 2, 2))
    scores[0] = math.log(0.97)
    scores[1] = math.log(0.03)
    pl = pseudo_label(scores, threshold=0.968)
    assert pl.confidence == pytest.approx(np.full((2, 2), 0.97), abs=1e-12)
    assert pl.valid_mask.all()    # 0.97 > 0.968


def test_non_finite_scores_rejected():
    scores = np.zeros((3, 4, 4))
    scores[1, 2, 2] = np.nan
    with pytest.raises(ValidationError, match="finite"):
        pseudo_label(scores, threshold=0.9)


def test_threshold_monotonicity(rng):
    scores = rng.normal(size=(6, 16, 16)) * 3
    low = pseudo_label(scores, threshold=0.5)
    high = pseudo_label(scores, threshold=0.9)
    assert not (high.valid_mask & ~low.valid_mask).any()


def _pl_from_labels(labels, valid):
    labels = np.asarray(labels, dtype=np.int64)
    conf = np.where(valid, 1.0, 0.0)
    return pseudo_label_stub(labels, conf, np.asarray(valid, bool))


def pseudo_label_stub(labels, confidence, valid):
    from pixpatch.mixing import PseudoLabel
    return PseudoLabel(labels=labels, confidence=confidence,
                       valid_mask=valid, threshold=0.5)


def test_single_class_source_copies_whole_image(rng):
    src_img = rng.uniform(size=(8, 8, 3)).astype(np.float32)
    tgt_img = rng.uniform(size=(8, 8, 3)).astype(np.float32)
    src_lab = np.full((8, 8), 2, dtype=np.int64)
    pl = _pl_from_labels(np.zeros((8, 8)), np.ones((8, 8), bool))
    mix = class_mix(src_img, src_lab, tgt_img, pl, np.random.default_rng(0))
    assert mix.selected_classes == (2,)
    assert np.array_equal(mix.image, src_img)
    assert (mix.label == 2).all()
    assert mix.valid_mask.all()


def test_empty_selection_returns_target(rng):
    src_img = rng.uniform(size=(8, 8, 3)).astype(np.float32)
    tgt_img = rng.uniform(size=(8, 8, 3)).astype(np.float32)
    src_lab = rng.integers(0, 4, size=(8, 8))
    valid = rng.uniform(size=(8, 8)) < 0.6
    pl = _pl_from_labels(rng.integers(0, 4, size=(8, 8)), valid)
    mix = class_mix(src_img, src_lab, tgt_img, pl, selected=())
    assert np.array_equal(mix.image, tgt_img)
    assert np.array_equal(mix.label, pl.labels)
    assert np.array_equal(mix.valid_mask, valid)


def test_forced_selection_matches_reference_loop(rng):
    src_img = rng.uniform(size=(6, 6, 3)).astype(np.float32)
    tgt_img = rng.uniform(size=(6, 6, 3)).astype(np.float32)
    src_lab = rng.integers(0, 4, size=(6, 6))
    pl = _pl_from_labels(rng.integers(0, 4, size=(6, 6)),
                         rng.uniform(size=(6, 6)) < 0.5)
    mix = class_mix(src_img, src_lab, tgt_img, pl, selected=(0, 2))
    for i in range(6):
        for j in range(6):
            if src_lab[i, j] in (0, 2):
                assert np.array_equal(mix.image[i, j], src_img[i, j])
                assert mix.label[i, j] == src_lab[i, j]
                assert mix.valid_mask[i, j]
            else:
                assert np.array_equal(mix.image[i, j], tgt_img[i, j])
                assert mix.label[i, j] == pl.labels[i, j]
                assert mix.valid_mask[i, j] == pl.valid_mask[i, j]


def test_shape_mismatch_rejected(rng):
    pl = _pl_from_labels(np.zeros((8, 8)), np.ones((8, 8), bool))
    with pytest.raises(ValidationError):
        class_mix(rng.uniform(size=(8, 8, 3)), np.zeros((8, 8), np.int64),
                  rng.uniform(size=(6, 6, 3)), pl, np.random.default_rng(0))


def test_partition_and_half_count_properties():
    rng = np.random.default_rng(99)
    for _ in range(300):
        n_classes = int(rng.integers(2, 7))
        size = int(rng.integers(3, 9))
        src_img = rng.uniform(size=(size, size, 3)).astype(np.float32)
        tgt_img = rng.uniform(size=(size, size, 3)).astype(np.float32)
        src_lab = rng.integers(0, n_classes, size=(size, size))
        pl = _pl_from_labels(rng.integers(0, n_classes, size=(size, size)),
                             rng.uniform(size=(size, size)) < 0.5)
        mix = class_mix(src_img, src_lab, tgt_img, pl, rng)
        present = np.unique(src_lab)
        assert len(mix.selected_classes) == math.ceil(len(present) / 2)
        assert set(mix.selected_classes) <= set(present.tolist())
        # every pixel comes from exactly one side, byte-equal
        from_src = (mix.image == src_img).all(axis=-1)
        from_tgt = (mix.image == tgt_img).all(axis=-1)
        assert (from_src | from_tgt).all()
        assert np.array_equal(mix.source_mask, np.isin(src_lab, mix.selected_classes))


def test_select_half_classes_excludes_ignore():
    labels = np.array([[0, 1], [IGNORE_LABEL, 2]])
    seen = set()
    rng = np.random.default_rng(5)
    for _ in range(50):
        seen |= set(select_half_classes(labels, rng))
    assert IGNORE_LABEL not in seen
    assert seen <= {0, 1, 2}
