import numpy as np
import pytest
import torch

from pixpatch import (EmaTeacher, ModelConfig, SegmentationModel,
                      ValidationError, build_model, ema_update)
from pixpatch.losses import normalize_embeddings
from pixpatch.model import TeacherConfig, parameter_vector


@pytest.fixture(scope="module")
def model():
    return build_model(5, ModelConfig(), seed=0)


def test_segment_shape_contract(model):
    x = torch.rand(2, 3, 64, 64)
    scores = model.forward_segment(x)
    assert scores.shape == (2, 5, 64, 64)
    assert torch.isfinite(scores).all()


def test_embed_shape_contract(model):
    x = torch.rand(1, 3, 64, 64)
    emb = model.forward_embed(x, "pixel")
    assert emb.shape == (1, 64, 16, 16)


def test_zero_final_layer_gives_uniform_scores():
    m = build_model(5, seed=1)
    torch.nn.init.zeros_(m.head_cls.fc2.weight)
    torch.nn.init.zeros_(m.head_cls.fc2.bias)
    scores = m.forward_segment(torch.rand(1, 3, 32, 32))
    assert torch.allclose(scores, torch.zeros_like(scores))


def test_forward_is_deterministic(model):
    x = torch.rand(1, 3, 32, 32)
    a = model.forward_segment(x)
    b = model.forward_segment(x)
    assert torch.equal(a, b)


def test_pixel_and_patch_heads_are_independent(model):
    x = torch.rand(1, 3, 32, 32)
    pixel = model.forward_embed(x, "pixel")
    patch = model.forward_embed(x, "patch")
    assert pixel.shape == patch.shape
    assert not torch.allclose(pixel, patch)


def test_normalization_contract(model):
    emb = model.forward_embed(torch.rand(1, 3, 32, 32), "patch")
    flat = normalize_embeddings(emb.permute(0, 2, 3, 1).reshape(-1, emb.shape[1]))
    norms = flat.norm(dim=-1)
    assert torch.allclose(norms, torch.ones_like(norms), atol=1e-6)


def test_indivisible_dims_rejected(model):
    with pytest.raises(ValidationError, match="divisible"):
        model.forward_segment(torch.rand(1, 3, 30, 32))


def test_stride_is_configurable():
    m2 = build_model(3, ModelConfig(widths=(16, 32)), seed=0)
    assert m2.stride == 2
    emb = m2.forward_embed(torch.rand(1, 3, 32, 32), "pixel")
    assert emb.shape[-2:] == (16, 16)
    m8 = build_model(3, ModelConfig(widths=(16, 32, 32, 64)), seed=0)
    assert m8.stride == 8


def test_seeded_build_is_reproducible():
    a = build_model(4, seed=7)
    b = build_model(4, seed=7)
    assert torch.equal(parameter_vector(a), parameter_vector(b))
    c = build_model(4, seed=8)
    assert not torch.equal(parameter_vector(a), parameter_vector(c))


# ----------------------------------------------------------------- EMA


def test_ema_momentum_zero_copies_student():
    teacher = [torch.rand(4, 3, dtype=torch.float64)]
    student = [torch.rand(4, 3, dtype=torch.float64)]
    ema_update(teacher, student, momentum=0.0)
    assert torch.equal(teacher[0], student[0])


def test_ema_momentum_one_keeps_teacher():
    teacher = [torch.rand(5, dtype=torch.float64)]
    before = teacher[0].clone()
    ema_update(teacher, [torch.rand(5, dtype=torch.float64)], momentum=1.0)
    assert torch.equal(teacher[0], before)


def test_ema_closed_form_ten_steps():
    torch.manual_seed(0)
    w = torch.randn(64, dtype=torch.float64)
    teacher = [torch.zeros(64, dtype=torch.float64)]
    m = 0.999
    for _ in range(10):
        ema_update(teacher, [w], momentum=m)
    expected = w * (1.0 - m ** 10)
    assert torch.allclose(teacher[0], expected, atol=1e-10, rtol=0.0)


def test_ema_shape_mismatch_rejected():
    with pytest.raises(ValidationError, match="mismatch"):
        ema_update([torch.zeros(3)], [torch.zeros(4)], momentum=0.5)
    with pytest.raises(ValidationError, match="mismatch"):
        ema_update([torch.zeros(3)], [torch.zeros(3), torch.zeros(3)], momentum=0.5)


def test_teacher_never_requires_grad(model):
    teacher = EmaTeacher(model, TeacherConfig(momentum=0.99))
    assert all(not p.requires_grad for p in teacher.encoder.parameters())
    x = torch.rand(1, 3, 32, 32)
    scores = teacher.forward_segment(x)
    assert scores.grad_fn is None
    loss = model.forward_segment(x).sum()
    loss.backward()
    assert all(p.grad is None for p in teacher.encoder.parameters())
    model.zero_grad(set_to_none=True)


def test_teacher_copy_init_matches_student(model):
    teacher = EmaTeacher(model, TeacherConfig(init="copy"))
    x = torch.rand(1, 3, 32, 32)
    assert torch.allclose(teacher.forward_segment(x), model.forward_segment(x))


def test_teacher_random_init_differs(model):
    teacher = EmaTeacher(model, TeacherConfig(init="random", random_init_seed=99))
    x = torch.rand(1, 3, 32, 32)
    assert not torch.allclose(teacher.forward_segment(x), model.forward_segment(x))


def test_teacher_update_moves_toward_student(model):
    teacher = EmaTeacher(model, TeacherConfig(momentum=0.5, init="random",
                                              random_init_seed=3))
    student_vec = torch.cat([p.reshape(-1) for p in model.encoder.parameters()])
    before = torch.cat([p.reshape(-1) for p in teacher.encoder.parameters()])
    teacher.update(model)
    after = torch.cat([p.reshape(-1) for p in teacher.encoder.parameters()])
    assert torch.allclose(after, 0.5 * before + 0.5 * student_vec, atol=1e-6)


def test_inference_path_survives_dropping_projection_heads():
    m = build_model(5, seed=2)
    x = torch.rand(1, 3, 32, 32)
    expected = m.forward_segment(x)
    m.drop_projection_heads()
    assert m.head_pixel is None and m.head_patch is None
    assert torch.equal(m.forward_segment(x), expected)
    with pytest.raises(Exception):
        m.forward_embed(x, "pixel")


def test_parameter_budget():
    m = build_model(5, ModelConfig(), seed=0)
    assert 3e5 < m.parameter_count() < 7e5
