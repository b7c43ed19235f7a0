"""Dataset model, folds, patch extraction, balanced sampling and negative mining."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .augmentation import CONTEXT, key_rng
from .io import SPLITS, Annotation, DataError, ImageRecord, load_annotations, read_image

Case = ImageRecord

MIN_NEGATIVE_DISTANCE = 38.0
DEFAULT_MIX = {"imposter": 1.0, "random": 1.0, "mined": 1.0}


class Dataset:
    """Cases plus point annotations, with images loaded lazily from ``root``.

    Images can also be supplied directly through ``pixels`` (id -> H x W x 3
    uint8), which is how tests build small in-memory fixtures.
    """

    def __init__(self, cases: Sequence[Case], annotations: Sequence[Annotation], root=".",
                 pixels: Optional[Mapping[str, np.ndarray]] = None):
        self.cases = list(cases)
        self.annotations = list(annotations)
        self.root = Path(root)
        self._by_id = {c.id: c for c in self.cases}
        if len(self._by_id) != len(self.cases):
            raise DataError("duplicate case ids")
        self._cache: Dict[str, np.ndarray] = dict(pixels or {})
        self._points: Dict[Tuple[str, str], np.ndarray] = {}
        grouped = defaultdict(list)
        for a in self.annotations:
            grouped[(a.image_id, a.label)].append((a.x, a.y))
        for key, pts in grouped.items():
            self._points[key] = np.asarray(pts, dtype=np.float64)

    @classmethod
    def load(cls, annotation_path) -> "Dataset":
        cases, anns = load_annotations(annotation_path)
        return cls(cases, anns, root=Path(annotation_path).parent)

    def case(self, case_id: str) -> Case:
        return self._by_id[case_id]

    @property
    def case_ids(self) -> List[str]:
        return [c.id for c in self.cases]

    def image(self, case_id: str) -> np.ndarray:
        img = self._cache.get(case_id)
        if img is None:
            rec = self._by_id[case_id]
            img = read_image(self.root / rec.file)
            if img.shape[:2] != (rec.height, rec.width):
                raise DataError(f"image {rec.file} is {img.shape[1]}x{img.shape[0]}, "
                                f"annotation says {rec.width}x{rec.height}")
            self._cache[case_id] = img
        return img

    def points(self, case_id: str, label: str = "mitosis") -> np.ndarray:
        """``K x 2`` array of ``(x, y)`` for one label (possibly empty)."""
        return self._points.get((case_id, label), np.zeros((0, 2)))

    def subset(self, case_ids: Iterable[str]) -> "Dataset":
        keep = set(case_ids)
        cases = [c for c in self.cases if c.id in keep]
        anns = [a for a in self.annotations if a.image_id in keep]
        sub = Dataset(cases, anns, self.root)
        sub._cache = {k: v for k, v in self._cache.items() if k in keep}
        return sub


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldSpec:
    index: int
    assignment: Mapping[str, str]  # case id -> split

    def cases(self, split: str) -> List[str]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return sorted(c for c, s in self.assignment.items() if s == split)

    def to_dict(self) -> Dict[str, List[str]]:
        return {s: self.cases(s) for s in SPLITS}

    @classmethod
    def from_dict(cls, index: int, splits: Mapping[str, Sequence[str]]) -> "FoldSpec":
        assignment = {}
        for s in SPLITS:
            for c in splits.get(s, ()):
                if c in assignment:
                    raise DataError(f"fold {index}: case {c!r} in more than one split")
                assignment[c] = s
        return cls(index, assignment)


def largest_remainder(n: int, ratios: Sequence[float]) -> List[int]:
    """Integer split of ``n`` following ``ratios``; leftover units go to the
    largest fractional parts, ties in split order."""
    quotas = [n * r for r in ratios]
    counts = [int(np.floor(q + 1e-9)) for q in quotas]
    frac = [q - c for q, c in zip(quotas, counts)]
    order = sorted(range(len(ratios)), key=lambda i: (-round(frac[i], 9), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def make_folds(cases: Sequence[Case], n_folds: int = 5, ratios=(0.8, 0.1, 0.1), seed: int = 0,
               include_unlabeled: bool = False) -> List[FoldSpec]:
    """Scanner-stratified train/validation/test assignments, one per fold.

    Raises
    ------
    DataError
        If some scanner has too few cases to give every split at least one.
    """
    if n_folds < 1:
        raise ValueError("n_folds must be >= 1")
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    by_scanner: Dict[str, List[str]] = defaultdict(list)
    for c in cases:
        if c.labeled or include_unlabeled:
            by_scanner[c.scanner].append(c.id)
    if not by_scanner:
        raise DataError("no cases to split")
    counts = {}
    for scanner, ids in by_scanner.items():
        counts[scanner] = largest_remainder(len(ids), ratios)
        if min(counts[scanner]) < 1:
            raise DataError(f"scanner {scanner!r} has {len(ids)} cases; split counts "
                            f"{dict(zip(SPLITS, counts[scanner]))} leave a split empty")
    folds = []
    for k in range(n_folds):
        rng = key_rng((seed, k))
        assignment = {}
        for scanner in sorted(by_scanner):
            ids = sorted(by_scanner[scanner])
            perm = rng.permutation(len(ids))
            start = 0
            for split, cnt in zip(SPLITS, counts[scanner]):
                for i in perm[start:start + cnt]:
                    assignment[ids[i]] = split
                start += cnt
        folds.append(FoldSpec(k, assignment))
    return folds


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Mirror indices about the edges without repeating the edge pixel."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    m = np.mod(idx, period)
    return np.where(m > n - 1, period - m, m)


def extract_patch(image: np.ndarray, center, size: int = CONTEXT) -> np.ndarray:
    """``3 x size x size`` context whose index ``size // 2`` lands on ``center``.

    ``image`` is ``H x W x 3``; ``center`` is ``(x, y)`` and is rounded to the
    nearest pixel.  Out-of-image pixels are mirror reflections.
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"expected H x W x 3 image, got {img.shape}")
    h, w = img.shape[:2]
    cx, cy = (int(np.floor(float(v) + 0.5)) for v in center)
    if not (0 <= cx < w and 0 <= cy < h):
        raise ValueError(f"center ({cx}, {cy}) outside {w}x{h} image")
    off = np.arange(size) - size // 2
    rows = reflect_index(cy + off, h)
    cols = reflect_index(cx + off, w)
    return np.ascontiguousarray(img[rows[:, None], cols[None, :]].transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# sample pools
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    case_id: str
    x: float
    y: float
    label: int  # 1 mitosis, 0 non-mitosis
    source: str = "mitosis"  # mitosis | imposter | random | mined


@dataclass
class SamplePool:
    positives: List[Sample] = field(default_factory=list)
    negatives: List[Sample] = field(default_factory=list)
    mix: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_MIX))

    def negative_weights(self) -> np.ndarray:
        """Per-entry sampling probabilities: each source gets its mix share,
        split evenly among its entries."""
        counts = Counter(s.source for s in self.negatives)
        share = {src: self.mix.get(src, 1.0) for src in counts}
        total = sum(share.values())
        if total <= 0:
            raise ValueError("negative mix weights sum to zero")
        w = np.array([share[s.source] / (total * counts[s.source]) for s in self.negatives])
        return w / w.sum()

    def with_mined(self, mined: Sequence[Sample]) -> "SamplePool":
        return SamplePool(list(self.positives), list(self.negatives) + list(mined), dict(self.mix))


def sample_batch(pool: SamplePool, batch_size: int, rng_key) -> List[Sample]:
    """``batch_size / 2`` positives then as many negatives, drawn with replacement."""
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"batch size must be even and >= 2, got {batch_size}")
    if not pool.positives or not pool.negatives:
        raise ValueError(f"cannot draw a balanced batch from {len(pool.positives)} positives "
                         f"and {len(pool.negatives)} negatives")
    rng = key_rng(rng_key)
    half = batch_size // 2
    pos = rng.integers(0, len(pool.positives), half)
    neg = rng.choice(len(pool.negatives), size=half, replace=True, p=pool.negative_weights())
    return [pool.positives[i] for i in pos] + [pool.negatives[i] for i in neg]


def accept_negative(x: float, y: float, mitoses: np.ndarray, min_distance: float = MIN_NEGATIVE_DISTANCE) -> bool:
    """A random negative is kept only if no mitosis lies closer than ``min_distance``."""
    if len(mitoses) == 0:
        return True
    d2 = (mitoses[:, 0] - x) ** 2 + (mitoses[:, 1] - y) ** 2
    return bool(d2.min() >= min_distance * min_distance)


def positive_samples(dataset: Dataset, case_ids: Iterable[str]) -> List[Sample]:
    return [Sample(cid, float(x), float(y), 1, "mitosis")
            for cid in case_ids for x, y in dataset.points(cid, "mitosis")]


def build_negative_pool(dataset: Dataset, case_ids: Iterable[str], random_per_image: int,
                        min_distance: float = MIN_NEGATIVE_DISTANCE, seed: int = 0) -> List[Sample]:
    """Annotated imposters plus rejection-filtered uniform random locations."""
    out = []
    for idx, cid in enumerate(case_ids):
        rec = dataset.case(cid)
        if not rec.labeled:
            continue
        out.extend(Sample(cid, float(x), float(y), 0, "imposter") for x, y in dataset.points(cid, "imposter"))
        rng = key_rng((seed, idx))
        mit = dataset.points(cid, "mitosis")
        xs = rng.integers(0, rec.width, random_per_image)
        ys = rng.integers(0, rec.height, random_per_image)
        out.extend(Sample(cid, float(x), float(y), 0, "random")
                   for x, y in zip(xs, ys) if accept_negative(x, y, mit, min_distance))
    return out


def build_pool(dataset: Dataset, case_ids: Sequence[str], random_per_image: int = 20,
               min_distance: float = MIN_NEGATIVE_DISTANCE, seed: int = 0,
               mix: Optional[Mapping[str, float]] = None) -> SamplePool:
    labeled = [c for c in case_ids if dataset.case(c).labeled]
    return SamplePool(positive_samples(dataset, labeled),
                      build_negative_pool(dataset, labeled, random_per_image, min_distance, seed),
                      dict(mix or DEFAULT_MIX))


def mine_hard_negatives(scorer: Callable, dataset: Dataset, case_ids: Iterable[str],
                        threshold: float = 0.5, match_radius: float = 30.0, cap_per_image: int = 10,
                        nms_radius: float = 30.0) -> List[Sample]:
    """Confident detections far from every mitosis, highest scores first.

    ``scorer(image_hwc_uint8, case_id)`` must return a
    :class:`~se2mitosis.model.ProbabilityMap`.
    """
    from .detection import extract_candidates

    mined = []
    for cid in case_ids:
        if not dataset.case(cid).labeled:
            continue
        pmap = scorer(dataset.image(cid), cid)
        mit = dataset.points(cid, "mitosis")
        kept = []
        for det in extract_candidates(pmap, nms_radius):
            if det.score < threshold:
                break
            if len(mit) and np.min(np.hypot(mit[:, 0] - det.x, mit[:, 1] - det.y)) <= match_radius:
                continue
            kept.append(Sample(cid, det.x, det.y, 0, "mined"))
            if len(kept) >= cap_per_image:
                break
        mined.extend(kept)
    return mined


def load_contexts(dataset: Dataset, samples: Sequence[Sample], size: int = CONTEXT) -> np.ndarray:
    """``N x 3 x size x size`` uint8 contexts for a list of samples."""
    return np.stack([extract_patch(dataset.image(s.case_id), (s.x, s.y), size) for s in samples])


def validation_set(dataset: Dataset, case_ids: Sequence[str], seed: int = 0,
                   random_per_image: int = 20) -> List[Sample]:
    """Fixed validation patches: every positive plus an equal-size negative draw."""
    pos = positive_samples(dataset, [c for c in case_ids if dataset.case(c).labeled])
    neg = build_negative_pool(dataset, case_ids, random_per_image, seed=seed + 7919)
    if not pos or not neg:
        raise DataError(f"validation split needs positives and negatives, got {len(pos)}/{len(neg)}")
    rng = key_rng((seed, 104729))
    take = rng.choice(len(neg), size=min(len(pos), len(neg)), replace=False)
    return pos + [neg[i] for i in sorted(take)]
