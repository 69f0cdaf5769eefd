"""Evaluation metrics (numpy, non-differentiable).

The metric functions take float arrays in [0, 1] shaped (3, H, W) and apply
no quantisation themselves; benchmark-style evaluation first passes both
images through :func:`quantize_8bit` (see :func:`image_metrics`).

``cse_substitute`` is NOT the colour-sensitive error of the literature. It is
a stand-in: mean squared error of the Lab chroma channels (a*, b* scaled by
1/128), times 1e3.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d
from skimage.color import rgb2lab

from .losses import gaussian_window
from .tensor import DimensionError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
METRIC_NAMES = ("psnr", "ssim", "mae", "cse_substitute")


def quantize_8bit(x: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half-up onto the 8-bit grid (returned as float)."""
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5) / 255.0


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"shape mismatch {p.shape} vs {t.shape}")
    return p, t


def psnr(pred, target) -> float:
    """10 log10(1 / MSE) on unit range; ``inf`` for identical images."""
    p, t = _pair(pred, target)
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _blur_valid(x: np.ndarray) -> np.ndarray:
    g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    r = SSIM_WINDOW // 2
    y = correlate1d(x, g, axis=-1, mode="constant")[..., r:-r]
    return correlate1d(y, g, axis=-2, mode="constant")[..., r:-r, :]


def ssim_metric(pred, target) -> float:
    """Mean SSIM over channels and valid window positions."""
    p, t = _pair(pred, target)
    if min(p.shape[-2:]) < SSIM_WINDOW:
        raise DimensionError(f"image smaller than the {SSIM_WINDOW}px SSIM window")
    mu_x, mu_y = _blur_valid(p), _blur_valid(t)
    s_xx = _blur_valid(p * p) - mu_x**2
    s_yy = _blur_valid(t * t) - mu_y**2
    s_xy = _blur_valid(p * t) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * s_xy + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (s_xx + s_yy + SSIM_C2)
    return float(np.mean(num / den))


def mae(pred, target) -> float:
    """Mean absolute error in percent of the unit dynamic range."""
    p, t = _pair(pred, target)
    return float(np.mean(np.abs(p - t))) * 100.0


def lab_chroma(x: np.ndarray) -> np.ndarray:
    """(3, H, W) sRGB -> (2, H, W) D65 Lab a*, b* divided by 128."""
    lab = rgb2lab(np.moveaxis(np.clip(x, 0.0, 1.0), 0, -1), illuminant="D65")
    return np.moveaxis(lab[..., 1:], -1, 0) / 128.0


def cse_substitute(pred, target) -> float:
    """Chroma MSE x 1e3; zero iff the images agree in a*, b*. See module docstring."""
    p, t = _pair(pred, target)
    if p.shape[0] != 3:
        raise DimensionError("cse_substitute needs RGB (3, H, W) inputs")
    d = lab_chroma(p) - lab_chroma(t)
    return float(np.mean(d * d)) * 1e3


def image_metrics(pred, target, quantize: bool = True) -> dict[str, float]:
    p, t = _pair(pred, target)
    if quantize:
        p, t = quantize_8bit(p), quantize_8bit(t)
    return {
        "psnr": psnr(p, t),
        "ssim": ssim_metric(p, t),
        "mae": mae(p, t),
        "cse_substitute": cse_substitute(p, t),
    }


@dataclass
class MetricsReport:
    """Per-image rows plus their arithmetic means.

    ``degradation`` describes how the low-light inputs were produced
    (e.g. ``{"source": "synthetic", "sigma": 10, "gamma": 2.2}``).
    """

    rows: list[dict] = field(default_factory=list)
    degradation: dict = field(default_factory=dict)

    def add(self, image_id: str, values: dict[str, float]) -> None:
        self.rows.append({"id": image_id, **values})

    @property
    def means(self) -> dict[str, float]:
        if not self.rows:
            raise ValueError("empty report")
        return {k: float(np.mean([row[k] for row in self.rows])) for k in METRIC_NAMES}

    def to_table(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        writer.writerow(["id", "psnr_db", "ssim", "mae_pct", "cse_substitute_x1e3"])
        for row in self.rows:
            writer.writerow([row["id"]] + [f"{row[k]:.6f}" for k in METRIC_NAMES])
        m = self.means
        writer.writerow(["mean"] + [f"{m[k]:.6f}" for k in METRIC_NAMES])
        return buf.getvalue()

    def to_jsonl(self) -> str:
        lines = []
        for row in self.rows:
            rec = {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in row.items()}
            rec["degradation"] = self.degradation
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + "\n"
