"""Image I/O, paired datasets, synthetic degradation and patch sampling.

Images are float arrays shaped (3, H, W) with values in [0, 1]. Paired
datasets use the layout ``ROOT/low/NAME.png`` + ``ROOT/high/NAME.png``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import DimensionError

IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".ppm", ".jpg", ".jpeg")


class ImageIOError(OSError):
    """An image file could not be read or written."""


@dataclass
class ImagePair:
    low: np.ndarray
    normal: np.ndarray
    id: str = ""

    def __post_init__(self):
        if self.low.shape != self.normal.shape:
            raise DimensionError(f"pair {self.id!r}: {self.low.shape} vs {self.normal.shape}")


@dataclass(frozen=True)
class DegradeConfig:
    """``low = clamp(gain * normal**gamma + N(0, (sigma/255)^2))``."""

    sigma: float = 10.0
    gamma: float = 2.2
    gain: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.gamma <= 0 or not (0 < self.gain <= 1):
            raise ValueError("gamma must be > 0 and gain in (0, 1]")

    def describe(self) -> dict:
        return {"source": "synthetic", "sigma": self.sigma, "gamma": self.gamma, "gain": self.gain, "seed": self.seed}


def load_image(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            rgb = im.convert("RGB")
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    arr = np.asarray(rgb, dtype=np.float32) / np.float32(255.0)
    return np.ascontiguousarray(np.moveaxis(arr, -1, 0))


def to_uint8(x: np.ndarray) -> np.ndarray:
    """(3, H, W) floats -> (H, W, 3) uint8 with clamping and round-half-up."""
    q = np.floor(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5)
    return np.moveaxis(q.astype(np.uint8), 0, -1)


def save_image(path, x: np.ndarray) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(x), mode="RGB").save(path)
    except (OSError, ValueError) as exc:
        raise ImageIOError(f"cannot write image {path}: {exc}") from exc


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ImageIOError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_pairs(root) -> list[ImagePair]:
    """Match ``root/low/*`` with ``root/high/*`` by file stem."""
    root = Path(root)
    highs = {p.stem: p for p in list_images(root / "high")}
    pairs = []
    for low_path in list_images(root / "low"):
        high_path = highs.get(low_path.stem)
        if high_path is None:
            raise ImageIOError(f"no normal-light match for {low_path}")
        pairs.append(ImagePair(load_image(low_path), load_image(high_path), low_path.stem))
    if not pairs:
        raise ImageIOError(f"no image pairs under {root}")
    return pairs


def save_pairs(root, pairs: list[ImagePair]) -> None:
    root = Path(root)
    for pair in pairs:
        save_image(root / "low" / f"{pair.id}.png", pair.low)
        save_image(root / "high" / f"{pair.id}.png", pair.normal)


def _rng(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(key.encode("utf-8"))])


def degrade(normal: np.ndarray, config: DegradeConfig, key: str = "") -> np.ndarray:
    """Darken and add Gaussian noise. Randomness depends only on (seed, key)."""
    x = np.asarray(normal)
    dark = config.gain * np.power(x, config.gamma)
    if config.sigma > 0:
        noise = _rng(config.seed, key).normal(0.0, config.sigma / 255.0, size=x.shape)
        dark = dark + noise
    return np.clip(dark, 0.0, 1.0).astype(x.dtype, copy=False)


def synthetic_scene(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """A smooth, colourful test image: a few Gaussian blobs over a colour gradient."""
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    base = rng.uniform(0.2, 0.6, size=(3, 1, 1))
    slope = rng.uniform(-0.25, 0.25, size=(3, 2))
    img = base + slope[:, 0, None, None] * yy + slope[:, 1, None, None] * xx
    for _ in range(4):
        cy, cx = rng.uniform(0, 1, size=2)
        rad = rng.uniform(0.1, 0.3)
        colour = rng.uniform(-0.3, 0.3, size=(3, 1, 1))
        img = img + colour * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad**2))
    return np.clip(img, 0.02, 0.98).astype(np.float32)


def synthetic_pairs(count: int, size: int, config: DegradeConfig = DegradeConfig()) -> list[ImagePair]:
    rng = np.random.default_rng(config.seed)
    pairs = []
    for i in range(count):
        normal = synthetic_scene(size, size, rng)
        name = f"synthetic_{i:03d}"
        pairs.append(ImagePair(degrade(normal, config, name), normal, name))
    return pairs


def sample_patches(pair: ImagePair, size: int, count: int, seed: int, flip: bool = False, multiple: int = 1) -> list[ImagePair]:
    """Aligned random crops (same coordinates and flips in ``low`` and ``normal``)."""
    h, w = pair.low.shape[-2:]
    if size > min(h, w):
        raise DimensionError(f"patch {size} larger than image {h}x{w}")
    if size % multiple:
        raise DimensionError(f"patch {size} not divisible by {multiple}")
    rng = _rng(seed, pair.id)
    out = []
    for i in range(count):
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        low = pair.low[..., top : top + size, left : left + size]
        normal = pair.normal[..., top : top + size, left : left + size]
        if flip and rng.random() < 0.5:
            low, normal = low[..., ::-1], normal[..., ::-1]
        out.append(ImagePair(np.ascontiguousarray(low), np.ascontiguousarray(normal), f"{pair.id}@{top},{left}#{i}"))
    return out
