import numpy as np
import pytest

from rlednet import tensor as T
from rlednet.losses import LossConfig, l1_loss, loss_terms, ssim_loss, ssim_map, total_loss, tv_loss
from rlednet.tensor import DimensionError, Tensor

C1, C2 = 0.01**2, 0.03**2


def img(seed, shape=(3, 16, 16)):
    return np.random.default_rng(seed).uniform(size=shape)


def test_l1_identical():
    x = img(0)
    assert l1_loss(Tensor(x), x).item() == 0.0


def test_l1_constant_offset():
    x = np.full((3, 4, 4), 0.25)
    assert l1_loss(Tensor(x + 0.5), x).item() == 0.5


def test_l1_shape_mismatch():
    with pytest.raises(DimensionError):
        l1_loss(Tensor(np.zeros((3, 4, 4))), np.zeros((3, 4, 5)))


def test_l1_gradient():
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(0.2, 0.8, (3, 5, 5)), requires_grad=True)
    target = x.data + rng.choice([-1, 1], x.shape) * rng.uniform(0.01, 0.1, x.shape)
    assert T.grad_check(lambda x: l1_loss(x, target), [x]) < 1e-5


def test_ssim_identical():
    x = img(2)
    assert ssim_loss(Tensor(x), x).item() < 1e-6


def test_ssim_constant_images_closed_form():
    pred, target = np.zeros((3, 12, 12)), np.ones((3, 12, 12))
    expected = 1.0 - (2 * 0 * 1 + C1) * (2 * 0 + C2) / ((0 + 1 + C1) * (0 + 0 + C2))
    assert abs(ssim_loss(Tensor(pred), target).item() - expected) < 1e-12


def test_ssim_valid_region_size():
    assert ssim_map(Tensor(img(3)), Tensor(img(4))).shape == (3, 6, 6)


def test_ssim_too_small():
    with pytest.raises(DimensionError):
        ssim_loss(Tensor(np.zeros((3, 10, 20))), np.zeros((3, 10, 20)))


def test_ssim_gradient():
    rng = np.random.default_rng(5)
    x = Tensor(rng.uniform(size=(2, 12, 12)), requires_grad=True)
    target = np.clip(x.data + rng.normal(0, 0.1, x.shape), 0, 1)
    assert T.grad_check(lambda x: ssim_loss(x, target), [x], max_elements=80) < 1e-4


def test_tv_constant_is_zero():
    assert tv_loss(Tensor(np.full((3, 7, 9), 0.3))).item() == 0.0


def test_tv_vertical_step_edge():
    h, w = 6, 8
    x = np.zeros((3, h, w))
    x[:, :, w // 2 :] = 1.0
    # per channel: h unit jumps among h*(w-1) horizontal differences; no vertical ones
    expected = (3 * h) / (3 * h * (w - 1))
    assert abs(tv_loss(Tensor(x)).item() - expected) < 1e-15


def test_tv_gradient_away_from_ties():
    rng = np.random.default_rng(6)
    yy, xx = np.indices((6, 6))
    board = np.where((yy + xx) % 2, 0.7, 0.3)
    x = Tensor(board + rng.uniform(-0.05, 0.05, (3, 6, 6)), requires_grad=True)
    assert T.grad_check(lambda x: tv_loss(x), [x]) < 1e-5


def test_tv_isotropic_gradient_and_zero():
    rng = np.random.default_rng(7)
    x = Tensor(rng.uniform(size=(2, 5, 5)), requires_grad=True)
    assert T.grad_check(lambda x: tv_loss(x, "isotropic"), [x]) < 1e-5
    assert tv_loss(Tensor(np.ones((1, 4, 4))), "isotropic").item() < 1e-5


def test_total_zero_for_equal_constants():
    x = np.full((3, 16, 16), 0.4)
    assert total_loss(Tensor(x), x).item() == 0.0


def test_total_lambda_zero():
    p, t = img(8), img(9)
    terms = loss_terms(Tensor(p), t, LossConfig(lambda_tv=0.0))
    assert terms["total"].item() == terms["l1"].item() + terms["ssim"].item()


def test_total_linear_in_lambda():
    p, t = img(10), img(11)
    a = total_loss(Tensor(p), t, LossConfig(lambda_tv=0.1)).item()
    b = total_loss(Tensor(p), t, LossConfig(lambda_tv=0.0)).item()
    assert abs((a - b) - 0.1 * tv_loss(Tensor(p)).item()) < 1e-7


def test_total_non_negative_on_unit_range():
    for seed in range(5):
        assert total_loss(Tensor(img(seed)), img(seed + 50)).item() >= 0.0


@pytest.mark.parametrize("kwargs", [dict(lambda_tv=-1), dict(ssim_window=10), dict(tv_variant="bogus")])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        LossConfig(**kwargs)


def test_batched_inputs():
    p = np.stack([img(12), img(13)])
    t = np.stack([img(14), img(15)])
    assert np.isfinite(total_loss(Tensor(p), t).item())
