"""File formats: raster images, annotation/fold/prediction JSON, PR CSV."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from PIL import Image

PathLike = Union[str, Path]
LABELS = ("mitosis", "imposter")
SPLITS = ("train", "validation", "test")


class DataError(ValueError):
    """Malformed or unreadable input data."""


def read_image(path: PathLike) -> np.ndarray:
    """``H x W x 3`` uint8 array from an 8-bit RGB raster file."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def write_image(path: PathLike, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError(f"expected H x W x 3 uint8 pixels, got {arr.shape} {arr.dtype}")
    # fixed compression settings keep output bytes reproducible
    Image.fromarray(arr, "RGB").save(path, format="PNG", optimize=False, compress_level=6)


def _dump_json(path: PathLike, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load_json(path: PathLike):
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if exc.lineno - 1 < len(text.splitlines()) else ""
        raise DataError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line.strip()}") from exc


@dataclass(frozen=True)
class ImageRecord:
    id: str
    file: str
    width: int
    height: int
    scanner: str
    magnification: str = "40x"
    labeled: bool = True


@dataclass(frozen=True)
class Annotation:
    image_id: str
    x: float
    y: float
    label: str = "mitosis"


def load_annotations(path: PathLike) -> Tuple[List[ImageRecord], List[Annotation]]:
    """Parse an annotation file; image ids must be unique and points inside their image."""
    doc = _load_json(path)
    try:
        images = [ImageRecord(id=str(r["id"]), file=str(r["file"]), width=int(r["width"]),
                              height=int(r["height"]), scanner=str(r["scanner"]),
                              magnification=str(r.get("magnification", "40x")),
                              labeled=bool(r.get("labeled", True)))
                  for r in doc["images"]]
        anns = [Annotation(str(a["image_id"]), float(a["x"]), float(a["y"]), str(a["label"]))
                for a in doc["annotations"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed annotation file ({exc!r})") from exc
    by_id = {}
    for rec in images:
        if rec.id in by_id:
            raise DataError(f"{path}: duplicate image id {rec.id!r}")
        by_id[rec.id] = rec
    for a in anns:
        rec = by_id.get(a.image_id)
        if rec is None:
            raise DataError(f"{path}: annotation refers to unknown image {a.image_id!r}")
        if a.label not in LABELS:
            raise DataError(f"{path}: label {a.label!r} not in {LABELS}")
        if not (0 <= a.x < rec.width and 0 <= a.y < rec.height):
            raise DataError(f"{path}: point ({a.x}, {a.y}) outside image {a.image_id!r}")
    return images, anns


def save_annotations(path: PathLike, images: Sequence[ImageRecord], anns: Sequence[Annotation]) -> None:
    doc = {
        "images": [{"id": r.id, "file": r.file, "width": r.width, "height": r.height,
                    "scanner": r.scanner, "magnification": r.magnification}
                   | ({} if r.labeled else {"labeled": False}) for r in images],
        "annotations": [{"image_id": a.image_id, "x": a.x, "y": a.y, "label": a.label} for a in anns],
    }
    _dump_json(path, doc)


def save_folds(path: PathLike, folds: Sequence[Dict[str, List[str]]]) -> None:
    _dump_json(path, {str(i): {s: list(f[s]) for s in SPLITS} for i, f in enumerate(folds)})


def load_folds(path: PathLike) -> List[Dict[str, List[str]]]:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"fold file {path} does not exist")
    doc = _load_json(p)
    try:
        return [{s: [str(c) for c in doc[k][s]] for s in SPLITS} for k in sorted(doc, key=int)]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed fold file ({exc!r})") from exc


def save_predictions(path: PathLike, detections) -> None:
    rows = []
    for d in detections:
        row = {"image_id": d.image_id, "x": d.x, "y": d.y, "score": d.score}
        if d.votes is not None:
            row["votes"] = d.votes
        rows.append(row)
    _dump_json(path, rows)


def load_predictions(path: PathLike):
    from .detection import Detection

    doc = _load_json(path)
    try:
        return [Detection(str(r["image_id"]), float(r["x"]), float(r["y"]), float(r["score"]),
                          r.get("votes")) for r in doc]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed predictions file ({exc!r})") from exc


def write_pr_csv(path: PathLike, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall", "f1"])
        for pt in curve:
            w.writerow([repr(float(v)) for v in (pt.threshold, pt.precision, pt.recall, pt.f1)])


def read_pr_csv(path: PathLike) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array(rows, dtype=np.float64).reshape(-1, 4)
