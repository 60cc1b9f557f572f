import numpy as np
import torch

from pixpatch import ContrastConfig, patch_contrast, pixel_contrast
from pixpatch.geometry import CorrespondenceMap
from pixpatch.verification import (finite_difference_gradient,
                                   relative_gradient_error,
                                   run_gradient_checks)


def test_finite_difference_on_quadratic():
    def f(x):
        return float((x ** 2).sum())

    x = np.array([1.0, -2.0, 0.5])
    grad = finite_difference_gradient(f, x)
    assert np.allclose(grad, 2 * x, atol=1e-6)


def test_pixel_gradient_small_instance(rng):
    emb = rng.normal(size=(1, 4, 2, 3))
    labels = rng.integers(0, 2, size=(1, 2, 3))
    cfg = ContrastConfig(temperature=0.4, anchors_per_class=1000,
                         hard_fraction=1.0)

    def loss_of(arr):
        value, _ = pixel_contrast(torch.from_numpy(arr), labels, cfg)
        return float(value)

    tensor = torch.from_numpy(emb.copy()).requires_grad_(True)
    loss, _ = pixel_contrast(tensor, labels, cfg)
    loss.backward()
    numeric = finite_difference_gradient(loss_of, emb)
    assert relative_gradient_error(tensor.grad.numpy(), numeric) <= 1e-5


def test_patch_gradient_small_instance(rng):
    f1 = rng.normal(size=(3, 2, 2))
    f2 = rng.normal(size=(3, 2, 2))
    corr = CorrespondenceMap(stride=1,
                             crop1_cells=np.array([[0, 0], [1, 1]]),
                             crop2_cells=np.array([[0, 1], [1, 0]]))
    pool = torch.from_numpy(rng.normal(size=(3, 3)))
    cfg = ContrastConfig(temperature=0.3, anchors_per_class=1000,
                         hard_fraction=1.0)
    split = f1.size

    def loss_of(arr):
        t1 = torch.from_numpy(arr.ravel()[:split].reshape(f1.shape))
        t2 = torch.from_numpy(arr.ravel()[split:].reshape(f2.shape))
        value, _ = patch_contrast(t1, t2, corr, pool, cfg)
        return float(value)

    t1 = torch.from_numpy(f1.copy()).requires_grad_(True)
    t2 = torch.from_numpy(f2.copy()).requires_grad_(True)
    loss, _ = patch_contrast(t1, t2, corr, pool, cfg)
    loss.backward()
    analytic = np.concatenate([t1.grad.numpy().ravel(), t2.grad.numpy().ravel()])
    numeric = finite_difference_gradient(loss_of,
                                         np.concatenate([f1.ravel(), f2.ravel()]))
    assert relative_gradient_error(analytic, numeric) <= 1e-5


def test_gradient_suite_passes_quickly():
    results = run_gradient_checks(instances=8, tolerance=1e-4, seed=3)
    for result in results:
        assert result.passed, result.line()
