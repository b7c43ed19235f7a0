"""Deterministic synthetic stand-in for stained histology tiles.

Targets ("mitosis") are dark multi-armed star blobs, imposters are dark
smooth ellipses of the same size and color, and decoys are large pale
nuclei that are never annotated.  Each scanner profile shifts the stain
colors.  Objects are rendered on a small odd-sized stamp: the angle modulo
90 degrees is drawn analytically and whole quarter turns are applied with
``np.rot90``, so a target at ``theta + 90`` is an exact rotation of the one
at ``theta``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .augmentation import key_rng
from .data import Dataset
from .io import Annotation, ImageRecord, save_annotations, write_image

STAMP = 33  # odd, so the stamp center is a pixel center
HALF = STAMP // 2

# background (eosin-like), dark nucleus, pale nucleus
PROFILES = (
    ((236, 192, 214), (72, 38, 112), (176, 140, 196)),
    ((226, 204, 198), (96, 52, 88), (190, 150, 170)),
    ((242, 214, 232), (58, 52, 134), (168, 156, 214)),
    ((214, 184, 204), (84, 44, 100), (160, 128, 170)),
)


@dataclass(frozen=True)
class SyntheticConfig:
    n_images: int = 200
    size: int = 256
    scanners: int = 3
    targets_per_image: int = 5
    imposters_per_image: int = 3
    decoys_per_image: int = 4
    margin: int = 40
    spacing: float = 40.0
    decoy_spacing: float = 30.0

    def __post_init__(self):
        if not 1 <= self.scanners <= len(PROFILES):
            raise ValueError(f"scanners must be in [1, {len(PROFILES)}], got {self.scanners}")
        if self.size < 2 * self.margin + 1 or self.margin < HALF:
            raise ValueError(f"image size {self.size} incompatible with margin {self.margin}")
        if min(self.n_images, self.targets_per_image) < 0 or self.n_images < 1:
            raise ValueError("n_images must be >= 1 and counts non-negative")


def _stamp_grid() -> Tuple[np.ndarray, np.ndarray]:
    c = np.arange(STAMP, dtype=np.float64) - HALF
    return np.meshgrid(c, c)


def _soft(edge: np.ndarray) -> np.ndarray:
    # one-pixel anti-aliased edge: edge > 0 inside
    return np.clip(edge + 0.5, 0.0, 1.0)


def _canonical(kind: str, theta: float, params: dict) -> np.ndarray:
    x, y = _stamp_grid()
    # rotate the sampling frame by -theta (counterclockwise as displayed, y down)
    c, s = math.cos(theta), math.sin(theta)
    u = c * x - s * y
    v = s * x + c * y
    rho = np.hypot(u, v)
    phi = np.arctan2(-v, u)
    if kind == "target":
        arms, depth, radius = params["arms"], params["depth"], params["radius"]
        edge = radius * (1.0 + depth * np.cos(arms * phi)) - rho
    elif kind == "imposter":
        a, b = params["radius"] * 1.25, params["radius"] * 0.8
        edge = (1.0 - np.sqrt((u / a) ** 2 + (v / b) ** 2)) * b
    elif kind == "decoy":
        edge = params["radius"] - rho
    else:
        raise ValueError(f"unknown object kind {kind!r}")
    return _soft(edge)


def render_object(kind: str, theta_deg: float, params: dict) -> np.ndarray:
    """``STAMP x STAMP`` coverage mask in [0, 1] for an object at ``theta_deg``."""
    quarters, rest = divmod(float(theta_deg), 90.0)
    # snap away float residue so theta and theta + 90 share one residual angle
    rest = round(rest, 9) % 90.0
    mask = _canonical(kind, math.radians(rest), params)
    return np.rot90(mask, int(quarters) % 4).copy()


def _background(rng: np.random.Generator, size: int, color) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    field = np.zeros((size, size))
    for _ in range(4):
        fx, fy = rng.uniform(-0.05, 0.05, 2)
        field += rng.uniform(4, 10) * np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    grain = rng.normal(0.0, 4.0, (size, size))
    base = np.asarray(color, dtype=np.float64)[None, None, :]
    return base + (field + grain)[..., None] * np.array([1.0, 1.2, 0.8])


def _place(rng, taken: List[Tuple[float, float, float]], n: int, lo: int, hi: int, gap: float,
           attempts: int = 5000) -> List[Tuple[int, int]]:
    out = []
    for _ in range(n):
        for _ in range(attempts):
            x, y = (int(v) for v in rng.integers(lo, hi + 1, 2))
            if all((x - tx) ** 2 + (y - ty) ** 2 >= max(gap, tg) ** 2 for tx, ty, tg in taken):
                taken.append((x, y, gap))
                out.append((x, y))
                break
        else:
            raise ValueError(f"could not place {n} objects with spacing {gap}px in [{lo}, {hi}]")
    return out


def _composite(img: np.ndarray, mask: np.ndarray, x: int, y: int, color: np.ndarray,
               texture: np.ndarray) -> None:
    region = img[y - HALF:y + HALF + 1, x - HALF:x + HALF + 1]
    a = mask[..., None]
    region[...] = region * (1.0 - a) + (color[None, None, :] * texture[..., None]) * a


def render_image(config: SyntheticConfig, seed: int, index: int, scanner: int):
    """Pixels (H x W x 3 uint8) plus ``(x, y, label)`` annotations for one tile."""
    rng = key_rng((seed, index))
    bg, dark, pale = (np.asarray(c, dtype=np.float64) for c in PROFILES[scanner])
    img = _background(rng, config.size, bg)
    lo, hi = config.margin, config.size - 1 - config.margin
    taken: List[Tuple[float, float, float]] = []
    targets = _place(rng, taken, config.targets_per_image, lo, hi, config.spacing)
    imposters = _place(rng, taken, config.imposters_per_image, lo, hi, config.spacing)
    decoys = _place(rng, taken, config.decoys_per_image, HALF, config.size - 1 - HALF, config.decoy_spacing)

    def texture():
        return np.clip(rng.normal(1.0, 0.08, (STAMP, STAMP)), 0.7, 1.3)

    for x, y in decoys:
        mask = render_object("decoy", 0.0, {"radius": rng.uniform(9.0, 13.0)})
        _composite(img, mask * 0.8, x, y, pale + rng.uniform(-12, 12, 3), texture())
    for kind, pts in (("target", targets), ("imposter", imposters)):
        for x, y in pts:
            params = {"radius": rng.uniform(7.0, 9.5), "arms": int(rng.integers(4, 8)),
                      "depth": rng.uniform(0.35, 0.55)}
            mask = render_object(kind, rng.uniform(0.0, 360.0), params)
            _composite(img, mask, x, y, dark + rng.uniform(-15, 15, 3), texture())
    pixels = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    anns = [(x, y, "mitosis") for x, y in targets] + [(x, y, "imposter") for x, y in imposters]
    return pixels, anns


def generate_synthetic_dataset(out_dir, config: SyntheticConfig = SyntheticConfig(), seed: int = 0,
                               prefix: str = "case") -> Dataset:
    """Render ``config.n_images`` tiles and write ``annotations.json`` plus ``images/``.

    Scanners are assigned round-robin so each profile gets an equal share.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records, anns, pixels = [], [], {}
    width = max(3, len(str(config.n_images - 1)))
    for i in range(config.n_images):
        scanner = i % config.scanners
        cid = f"{prefix}{i:0{width}d}"
        img, pts = render_image(config, seed, i, scanner)
        rel = f"images/{cid}.png"
        write_image(out / rel, img)
        records.append(ImageRecord(cid, rel, config.size, config.size, f"scanner{scanner + 1}", "40x"))
        anns.extend(Annotation(cid, float(x), float(y), lab) for x, y, lab in pts)
        pixels[cid] = img
    save_annotations(out / "annotations.json", records, anns)
    return Dataset(records, anns, out, pixels=pixels)


def rotate_dataset_90(dataset: Dataset, out_dir: Optional[str] = None) -> Dataset:
    """Quarter-turn (counterclockwise as displayed) copy of every image and point."""
    records, anns, pixels = [], [], {}
    for rec in dataset.cases:
        img = np.ascontiguousarray(np.rot90(dataset.image(rec.id)))
        pixels[rec.id] = img
        records.append(ImageRecord(rec.id, rec.file, rec.height, rec.width, rec.scanner,
                                   rec.magnification, rec.labeled))
    for a in dataset.annotations:
        w = dataset.case(a.image_id).width
        anns.append(Annotation(a.image_id, a.y, w - 1 - a.x, a.label))
    rotated = Dataset(records, anns, dataset.root, pixels=pixels)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        for rec in records:
            write_image(out / rec.file, pixels[rec.id])
        save_annotations(out / "annotations.json", records, anns)
        rotated.root = out
    return rotated


def config_dict(config: SyntheticConfig) -> dict:
    return asdict(config)
