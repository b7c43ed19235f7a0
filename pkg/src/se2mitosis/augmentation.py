"""Stochastic patch augmentation.

A draw is sampled once per training sample from a counter-based key and
then applied to a 128x128 context window, producing a 77x77 8-bit patch.
Transforms run in a fixed order: transposition, color shift, gamma, hue
rotation, spatial shift+scale (one bilinear resample), additive noise,
cutout.  Intensities are rounded half away from zero and clamped to
[0, 255] after every intensity transform.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

PATCH = 77
CONTEXT = 128
ORDER = ("transposition", "color_shift", "gamma", "hue", "shift", "scale", "noise", "cutout")


@dataclass(frozen=True)
class TransformSpec:
    enabled: bool = True
    p: float = 0.5
    low: float = 0.0
    high: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"probability {self.p} outside [0, 1]")
        if self.high < self.low:
            raise ValueError(f"empty range [{self.low}, {self.high}]")

    @property
    def rate(self) -> float:
        return self.p if self.enabled else 0.0


@dataclass(frozen=True)
class AugmentationConfig:
    transposition: TransformSpec = TransformSpec(p=0.5)
    color_shift: TransformSpec = TransformSpec(p=0.5, low=-13.0, high=13.0)
    gamma: TransformSpec = TransformSpec(p=0.5, low=0.9, high=1.5)
    hue: TransformSpec = TransformSpec(p=0.5, low=0.0, high=1.0)
    shift: TransformSpec = TransformSpec(p=1.0, low=-12.0, high=12.0)
    scale: TransformSpec = TransformSpec(p=0.5, low=-0.13, high=0.13)
    noise: TransformSpec = TransformSpec(p=0.5, low=50.0, high=50.0)
    cutout: TransformSpec = TransformSpec(p=0.5, low=8.0, high=16.0)
    # how the noise parameter is read: "std" (sigma = value) or "variance" (sigma = sqrt(value))
    noise_reading: str = "std"

    def __post_init__(self):
        if self.noise_reading not in ("std", "variance"):
            raise ValueError(f"noise_reading must be 'std' or 'variance', got {self.noise_reading!r}")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        """Every transform off; the pipeline reduces to a center crop."""
        base = cls()
        return replace(base, **{name: replace(getattr(base, name), enabled=False) for name in ORDER})

    def noise_sigma(self) -> float:
        v = self.noise.high
        return float(np.sqrt(v)) if self.noise_reading == "variance" else float(v)


@dataclass
class AugmentationDraw:
    """Everything needed to replay one augmentation."""

    transpose: bool = False
    color_shift: Optional[Tuple[float, float, float]] = None
    gamma: Optional[Tuple[float, float, float]] = None
    hue: Optional[float] = None
    shift: Tuple[float, float] = (0.0, 0.0)  # (dx, dy) pixels
    scale: Optional[float] = None
    noise_sigma: Optional[float] = None
    noise_seed: Optional[int] = None
    cutout: Optional[Tuple[int, int, int, Tuple[int, int, int]]] = None  # x0, y0, size, rgb

    def applied(self) -> dict:
        return {
            "transposition": self.transpose,
            "color_shift": self.color_shift is not None,
            "gamma": self.gamma is not None,
            "hue": self.hue is not None,
            "shift": self.shift != (0.0, 0.0),
            "scale": self.scale is not None,
            "noise": self.noise_sigma is not None,
            "cutout": self.cutout is not None,
        }


def key_rng(rng_key: Sequence[int]) -> np.random.Generator:
    """Generator derived from an integer key such as ``(seed, epoch, index)``."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in rng_key]))


def sample_draw(config: AugmentationConfig, rng_key: Sequence[int]) -> AugmentationDraw:
    """Bernoulli flag plus coefficients for every transform, in pipeline order.

    Coefficients are drawn whether or not the transform fires, so each
    transform's randomness does not depend on the others' flags.
    """
    rng = key_rng(rng_key)
    c = config
    draw = AugmentationDraw()

    fire = rng.random() < c.transposition.rate
    draw.transpose = bool(fire)

    fire, coef = rng.random() < c.color_shift.rate, rng.uniform(c.color_shift.low, c.color_shift.high, 3)
    if fire:
        draw.color_shift = tuple(float(v) for v in coef)

    fire, coef = rng.random() < c.gamma.rate, rng.uniform(c.gamma.low, c.gamma.high, 3)
    if fire:
        draw.gamma = tuple(float(v) for v in coef)

    fire, coef = rng.random() < c.hue.rate, rng.uniform(c.hue.low, c.hue.high)
    if fire:
        draw.hue = float(coef)

    fire, coef = rng.random() < c.shift.rate, rng.uniform(c.shift.low, c.shift.high, 2)
    if fire:
        draw.shift = (float(coef[0]), float(coef[1]))

    fire, coef = rng.random() < c.scale.rate, rng.uniform(c.scale.low, c.scale.high)
    if fire:
        draw.scale = float(coef)

    fire, seed = rng.random() < c.noise.rate, int(rng.integers(2**63))
    if fire:
        draw.noise_sigma = c.noise_sigma()
        draw.noise_seed = seed

    fire = rng.random() < c.cutout.rate
    size = int(rng.integers(int(c.cutout.low), int(c.cutout.high) + 1))
    x0 = int(rng.integers(0, PATCH - size + 1))
    y0 = int(rng.integers(0, PATCH - size + 1))
    color = tuple(int(v) for v in rng.integers(0, 256, 3))
    if fire:
        draw.cutout = (x0, y0, size, color)
    return draw


# ---------------------------------------------------------------------------
# individual transforms; all operate on float arrays shaped 3 x H x W
# ---------------------------------------------------------------------------


def round_clip(v: np.ndarray) -> np.ndarray:
    """Round half away from zero, then clamp to the 8-bit range."""
    return np.clip(np.sign(v) * np.floor(np.abs(v) + 0.5), 0.0, 255.0)


def color_shift(v: np.ndarray, shift) -> np.ndarray:
    return round_clip(v + np.asarray(shift, dtype=np.float64)[:, None, None])


def gamma_correct(v: np.ndarray, gammas) -> np.ndarray:
    g = np.asarray(gammas, dtype=np.float64)[:, None, None]
    return round_clip(255.0 * (v / 255.0) ** g)


def hue_rotate(v: np.ndarray, h: float) -> np.ndarray:
    """Rotate hue by the fraction ``h`` of the full circle."""
    hsv = rgb_to_hsv(np.moveaxis(v / 255.0, 0, -1))
    hsv[..., 0] = (hsv[..., 0] + h) % 1.0
    return round_clip(np.moveaxis(hsv_to_rgb(hsv), -1, 0) * 255.0)


def source_grid(draw: AugmentationDraw, center: float) -> Tuple[np.ndarray, np.ndarray]:
    """Context coordinates ``(x, y)`` sampled by every output pixel."""
    factor = 1.0 + (draw.scale or 0.0)
    d = (np.arange(PATCH, dtype=np.float64) - PATCH // 2) / factor
    dx, dy = draw.shift
    xs = center + d + dx
    ys = center + d + dy
    return np.meshgrid(xs, ys)


def bilinear(v: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``v`` (C x H x W) at real coordinates; all samples must lie inside."""
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    fx, fy = xs - x0, ys - y0
    x1 = np.minimum(x0 + 1, v.shape[2] - 1)
    y1 = np.minimum(y0 + 1, v.shape[1] - 1)
    top = v[:, y0, x0] * (1 - fx) + v[:, y0, x1] * fx
    bottom = v[:, y1, x0] * (1 - fx) + v[:, y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def add_noise(v: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Per-pixel Gaussian noise, one value per location shared by all channels."""
    field_ = np.random.default_rng(seed).normal(0.0, sigma, v.shape[1:])
    return round_clip(v + field_[None])


def cutout(v: np.ndarray, x0: int, y0: int, size: int, color) -> np.ndarray:
    out = v.copy()
    out[:, y0:y0 + size, x0:x0 + size] = np.asarray(color, dtype=np.float64)[:, None, None]
    return out


def apply_augmentation(context: np.ndarray, draw: AugmentationDraw) -> np.ndarray:
    """Transform a ``3 x S x S`` 8-bit context window into a ``3 x 77 x 77`` patch.

    The nominal patch center sits at index ``S // 2`` of the context.

    Raises
    ------
    ValueError
        If the context is too small for the draw's shift and scale.
    """
    ctx = np.asarray(context)
    if ctx.ndim != 3 or ctx.shape[0] != 3 or ctx.shape[1] != ctx.shape[2]:
        raise ValueError(f"context must be 3 x S x S, got {ctx.shape}")
    size = ctx.shape[1]
    center = size // 2
    if draw.transpose:
        ctx = ctx.transpose(0, 2, 1)
    xs, ys = source_grid(draw, center)
    lo = int(np.floor(min(xs.min(), ys.min())))
    hi = int(np.floor(max(xs.max(), ys.max()))) + 1
    if lo < 0 or hi > size - 1:
        raise ValueError(f"context of {size}px too small for shift {draw.shift} and scale {draw.scale}")
    # pointwise transforms only touch the region the resample reads
    y_lo, y_hi = int(np.floor(ys.min())), int(np.floor(ys.max())) + 2
    x_lo, x_hi = int(np.floor(xs.min())), int(np.floor(xs.max())) + 2
    v = ctx[:, y_lo:y_hi, x_lo:x_hi].astype(np.float64)
    if draw.color_shift is not None:
        v = color_shift(v, draw.color_shift)
    if draw.gamma is not None:
        v = gamma_correct(v, draw.gamma)
    if draw.hue is not None:
        v = hue_rotate(v, draw.hue)
    v = round_clip(bilinear(v, xs - x_lo, ys - y_lo))
    if draw.noise_sigma is not None:
        v = add_noise(v, draw.noise_sigma, draw.noise_seed)
    if draw.cutout is not None:
        v = cutout(v, *draw.cutout)
    return v.astype(np.uint8)


def center_crop(context: np.ndarray, size: int = PATCH) -> np.ndarray:
    c = context.shape[-1] // 2
    h = size // 2
    return context[..., c - h:c - h + size, c - h:c - h + size]


def augment_preview(image_paths: Iterable, out_dir, config: AugmentationConfig = AugmentationConfig(),
                    seed: int = 0, count: int = 6) -> List[Path]:
    """Write ``count`` augmented variants of the context around each image's center."""
    from .data import extract_patch
    from .io import read_image, write_image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for idx, path in enumerate(image_paths):
        path = Path(path)
        image = read_image(path)
        h, w = image.shape[:2]
        ctx = extract_patch(image, (w // 2, h // 2))
        for k in range(count):
            patch = apply_augmentation(ctx, sample_draw(config, (seed, idx, k)))
            target = out_dir / f"{path.stem}_aug{k:02d}.png"
            write_image(target, np.moveaxis(patch, 0, -1))
            written.append(target)
    return written
