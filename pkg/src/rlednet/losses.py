"""Training objective: l1 + (1 - SSIM) + lambda * total variation."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class LossConfig:
    lambda_tv: float = 0.1
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2
    tv_variant: str = "anisotropic"

    def __post_init__(self):
        if self.lambda_tv < 0:
            raise ValueError("lambda_tv must be >= 0")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be odd")
        if self.tv_variant not in ("anisotropic", "isotropic"):
            raise ValueError(f"unknown tv_variant {self.tv_variant!r}")


@functools.lru_cache(maxsize=None)
def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _check_same(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch {pred.shape} vs {target.shape}")


def l1_loss(pred: Tensor, target) -> Tensor:
    target = T.as_tensor(target, pred)
    _check_same(pred, target)
    return T.tabs(pred - target).mean()


def _gaussian_filter(x: Tensor, window: int, sigma: float) -> Tensor:
    """Separable Gaussian blur without padding ('valid' region only)."""
    c = x.shape[-3]
    g = gaussian_window(window, sigma).astype(x.dtype)
    wh = T.Tensor(np.tile(g.reshape(1, 1, 1, window), (c, 1, 1, 1)))
    wv = T.Tensor(np.tile(g.reshape(1, 1, window, 1), (c, 1, 1, 1)))
    y = T.dwconv2d(x, wh, padding=0)
    return T.dwconv2d(y, wv, padding=0)


def ssim_map(pred: Tensor, target: Tensor, config: LossConfig = LossConfig()) -> Tensor:
    _check_same(pred, target)
    h, w = pred.shape[-2:]
    if min(h, w) < config.ssim_window:
        raise DimensionError(f"image {h}x{w} smaller than the {config.ssim_window}px SSIM window")
    blur = functools.partial(_gaussian_filter, window=config.ssim_window, sigma=config.ssim_sigma)
    mu_x = blur(pred)
    mu_y = blur(target)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    s_xx = blur(pred * pred) - mu_xx
    s_yy = blur(target * target) - mu_yy
    s_xy = blur(pred * target) - mu_xy
    c1, c2 = config.ssim_c1, config.ssim_c2
    num = (mu_xy * 2.0 + c1) * (s_xy * 2.0 + c2)
    den = (mu_xx + mu_yy + c1) * (s_xx + s_yy + c2)
    return num / den


def ssim_loss(pred: Tensor, target, config: LossConfig = LossConfig()) -> Tensor:
    """1 - mean SSIM (Gaussian window, averaged over channels and pixels)."""
    target = T.as_tensor(target, pred)
    return 1.0 - ssim_map(pred, target, config).mean()


def tv_loss(pred: Tensor, variant: str = "anisotropic") -> Tensor:
    """Anisotropic: mean |dy| + mean |dx| over valid forward differences.

    Isotropic: mean sqrt(dy^2 + dx^2 + 1e-12) over the common (h-1) x (w-1) grid.
    """
    dy = pred[..., 1:, :] - pred[..., :-1, :]
    dx = pred[..., :, 1:] - pred[..., :, :-1]
    if variant == "anisotropic":
        return T.tabs(dy).mean() + T.tabs(dx).mean()
    if variant == "isotropic":
        dy = dy[..., :, :-1]
        dx = dx[..., :-1, :]
        return T.sqrt(dy * dy + dx * dx + 1e-12).mean()
    raise ValueError(f"unknown tv variant {variant!r}")


def loss_terms(pred: Tensor, target, config: LossConfig = LossConfig()) -> dict[str, Tensor]:
    target = T.as_tensor(target, pred)
    l1 = l1_loss(pred, target)
    ss = ssim_loss(pred, target, config)
    tv = tv_loss(pred, config.tv_variant)
    total = l1 + ss + tv * config.lambda_tv
    return {"l1": l1, "ssim": ss, "tv": tv, "total": total}


def total_loss(pred: Tensor, target, config: LossConfig = LossConfig()) -> Tensor:
    return loss_terms(pred, target, config)["total"]
