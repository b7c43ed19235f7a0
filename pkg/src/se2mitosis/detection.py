"""Candidate extraction, matching, PR sweeps, operating points and ensemble voting.

Everything here is a pure function of point lists.  Ordering rules are
explicit so each routine agrees exactly with a brute-force reference:
scores sort descending, ties keep input (row-major for maps) order.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .model import ProbabilityMap

NMS_RADIUS = 30.0
MATCH_RADIUS = 30.0


@dataclass(frozen=True)
class Detection:
    image_id: str
    x: float
    y: float
    score: float
    votes: Optional[int] = None


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: List[Tuple[int, int, float]] = field(default_factory=list)  # (det index, gt index, distance)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        return f1_score(self.tp, self.fp, self.fn)


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class OperatingPoint(PRPoint):
    pass


def f1_score(tp: int, fp: int, fn: int) -> float:
    """``2PR / (P + R)``; zero whenever there is no true positive."""
    if not tp:
        return 0.0
    p = tp / (tp + fp)
    r = tp / (tp + fn)
    return 2.0 * p * r / (p + r)


def _score_order(scores: Sequence[float]) -> np.ndarray:
    # descending score, ties by original position
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def extract_candidates(pmap: ProbabilityMap, nms_radius: float = NMS_RADIUS) -> List[Detection]:
    """Greedy non-maxima suppression over every positive-scoring map cell.

    Cells are visited by descending score (row-major on ties); each kept
    cell suppresses all cells within ``nms_radius`` pixels, boundary included.
    """
    vals = np.asarray(pmap.values, dtype=np.float64)
    xs, ys = pmap.centers()
    flat = vals.ravel()
    xs = xs.ravel().astype(np.float64)
    ys = ys.ravel().astype(np.float64)
    order = _score_order(flat)
    alive = flat > 0
    r2 = nms_radius * nms_radius
    out = []
    for idx in order:
        if not alive[idx]:
            continue
        out.append(Detection(pmap.image_id, float(xs[idx]), float(ys[idx]), float(flat[idx])))
        alive &= (xs - xs[idx]) ** 2 + (ys - ys[idx]) ** 2 > r2
    return out


def _as_points(gts) -> np.ndarray:
    pts = np.asarray(gts, dtype=np.float64)
    return pts.reshape(-1, 2)


def _greedy_match(dx: np.ndarray, dy: np.ndarray, gts: np.ndarray, radius: float) -> np.ndarray:
    # dx, dy already in processing order; returns matched gt index or -1 per detection
    matched = np.full(len(dx), -1, dtype=np.int64)
    if len(gts) == 0:
        return matched
    free = np.ones(len(gts), dtype=bool)
    r2 = radius * radius
    for k in range(len(dx)):
        d2 = (gts[:, 0] - dx[k]) ** 2 + (gts[:, 1] - dy[k]) ** 2
        d2 = np.where(free & (d2 <= r2), d2, np.inf)
        j = int(np.argmin(d2))
        if np.isfinite(d2[j]):
            matched[k] = j
            free[j] = False
    return matched


def match_detections(dets: Sequence[Detection], gts, radius: float = MATCH_RADIUS) -> MatchResult:
    """Greedy matching for one image: best-scoring detection first, each taking
    its nearest unmatched ground truth within ``radius`` (lowest index on ties)."""
    gts = _as_points(gts)
    order = _score_order([d.score for d in dets])
    dx = np.array([dets[i].x for i in order], dtype=np.float64)
    dy = np.array([dets[i].y for i in order], dtype=np.float64)
    m = _greedy_match(dx, dy, gts, radius)
    pairs = [(int(order[k]), int(j), float(np.hypot(gts[j, 0] - dx[k], gts[j, 1] - dy[k])))
             for k, j in enumerate(m) if j >= 0]
    tp = len(pairs)
    return MatchResult(tp, len(dets) - tp, len(gts) - tp, pairs)


def _group(dets: Iterable[Detection]) -> Dict[str, List[Tuple[int, Detection]]]:
    out = defaultdict(list)
    for i, d in enumerate(dets):
        out[d.image_id].append((i, d))
    return out


def pr_curve(dets: Sequence[Detection], gts: Mapping[str, np.ndarray],
             radius: float = MATCH_RADIUS) -> List[PRPoint]:
    """Pooled precision/recall/F1 at every distinct score, ascending threshold.

    A threshold ``t`` keeps detections with ``score >= t``.  Greedy matching
    in score order is prefix-stable, so one matching pass gives every point.
    """
    n_gt = sum(len(_as_points(g)) for g in gts.values())
    if not dets:
        return [PRPoint(1.0, 0.0, 0.0, 0.0)]
    scores = np.array([d.score for d in dets], dtype=np.float64)
    hit = np.zeros(len(dets), dtype=np.int64)
    for image_id, items in _group(dets).items():
        idx = np.array([i for i, _ in items])
        sub = idx[_score_order(scores[idx])]
        m = _greedy_match(np.array([dets[i].x for i in sub], dtype=np.float64),
                          np.array([dets[i].y for i in sub], dtype=np.float64),
                          _as_points(gts.get(image_id, np.zeros((0, 2)))), radius)
        hit[sub] = m >= 0
    order = _score_order(scores)
    tps = np.cumsum(hit[order])
    s_sorted = scores[order]
    # last position of each distinct-score run
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    points = []
    for e in ends[::-1]:
        tp = int(tps[e])
        kept = int(e) + 1
        fp, fn = kept - tp, n_gt - tp
        points.append(PRPoint(float(s_sorted[e]), tp / kept, tp / n_gt if n_gt else 0.0, f1_score(tp, fp, fn)))
    return points


def select_operating_point(dets: Sequence[Detection], gts: Mapping[str, np.ndarray],
                           radius: float = MATCH_RADIUS) -> OperatingPoint:
    """Threshold with the highest pooled F1; ties go to the higher threshold."""
    if not gts:
        raise ValueError("operating point needs at least one validation image")
    best = None
    for pt in pr_curve(dets, gts, radius):
        if best is None or pt.f1 > best.f1 or (pt.f1 == best.f1 and pt.threshold > best.threshold):
            best = pt
    return OperatingPoint(best.threshold, best.precision, best.recall, best.f1)


def apply_threshold(dets: Iterable[Detection], threshold: float) -> List[Detection]:
    return [d for d in dets if d.score >= threshold]


def ensemble_vote(det_lists: Sequence[Sequence[Detection]], vote_radius: float = MATCH_RADIUS,
                  min_votes: int = 2) -> List[Detection]:
    """Cluster detections from several models and keep well-supported clusters.

    Each cluster is seeded by the best unconsumed detection and takes at
    most one detection per other model: that model's nearest unconsumed
    detection within ``vote_radius`` on the same image.  The seed is
    emitted with ``votes`` equal to the cluster size.
    """
    if min_votes < 1:
        raise ValueError("min_votes must be >= 1")
    if len(det_lists) < max(2, min_votes):
        raise ValueError(f"need at least {max(2, min_votes)} models' detections, got {len(det_lists)}")
    pooled = [(m, d) for m, lst in enumerate(det_lists) for d in lst]
    order = _score_order([d.score for _, d in pooled])
    used = np.zeros(len(pooled), dtype=bool)
    r2 = vote_radius * vote_radius
    by_image = defaultdict(list)
    for rank, i in enumerate(order):
        by_image[pooled[i][1].image_id].append(i)
    out = []
    for i in order:
        if used[i]:
            continue
        used[i] = True
        seed_model, seed = pooled[i]
        votes = 1
        for m in range(len(det_lists)):
            if m == seed_model:
                continue
            best, best_d2 = -1, np.inf
            for j in by_image[seed.image_id]:
                mj, dj = pooled[j]
                if used[j] or mj != m:
                    continue
                d2 = (dj.x - seed.x) ** 2 + (dj.y - seed.y) ** 2
                if d2 <= r2 and d2 < best_d2:
                    best, best_d2 = j, d2
            if best >= 0:
                used[best] = True
                votes += 1
        if votes >= min_votes:
            out.append(Detection(seed.image_id, seed.x, seed.y, seed.score, votes))
    return out


@dataclass
class FoldEvaluation:
    fold: int
    curve: List[PRPoint]
    operating_point: PRPoint  # the marker: metrics at the fold's own threshold
    errors: List[str] = field(default_factory=list)


def metrics_at(dets: Sequence[Detection], gts: Mapping[str, np.ndarray], threshold: float,
               radius: float = MATCH_RADIUS, macro: bool = False) -> PRPoint:
    """Pooled (or per-image averaged when ``macro``) metrics at one threshold."""
    kept = _group(apply_threshold(dets, threshold))
    per_image = []
    for image_id in sorted(set(gts) | set(kept)):
        per_image.append(match_detections([d for _, d in kept.get(image_id, [])],
                                          gts.get(image_id, np.zeros((0, 2))), radius))
    if macro:
        if not per_image:
            return PRPoint(threshold, 0.0, 0.0, 0.0)
        return PRPoint(threshold, float(np.mean([m.precision for m in per_image])),
                       float(np.mean([m.recall for m in per_image])),
                       float(np.mean([m.f1 for m in per_image])))
    tp = sum(m.tp for m in per_image)
    fp = sum(m.fp for m in per_image)
    fn = sum(m.fn for m in per_image)
    return PRPoint(threshold, tp / (tp + fp) if tp + fp else 0.0, tp / (tp + fn) if tp + fn else 0.0,
                   f1_score(tp, fp, fn))


def detect_images(scorer: Callable, images: Mapping[str, np.ndarray],
                  nms_radius: float = NMS_RADIUS) -> Tuple[List[Detection], List[str]]:
    """Dense scoring plus NMS over several images; failures are collected, not raised."""
    dets, errors = [], []
    for image_id, img in images.items():
        try:
            dets.extend(extract_candidates(scorer(img, image_id), nms_radius))
        except Exception as exc:  # noqa: BLE001 - reported per image
            errors.append(f"{image_id}: {exc}")
    return dets, errors


def evaluate_folds(fold_detections: Sequence[Sequence[Detection]], fold_gts: Sequence[Mapping[str, np.ndarray]],
                   thresholds: Sequence[float], radius: float = MATCH_RADIUS,
                   fold_errors: Optional[Sequence[List[str]]] = None) -> Tuple[List[FoldEvaluation], dict]:
    """Per-fold PR curves with operating-point markers, plus F1 mean and std."""
    if not (len(fold_detections) == len(fold_gts) == len(thresholds)):
        raise ValueError("need one detection list, ground-truth map and threshold per fold")
    results = []
    for k, (dets, gts, thr) in enumerate(zip(fold_detections, fold_gts, thresholds)):
        errs = list(fold_errors[k]) if fold_errors else []
        results.append(FoldEvaluation(k, pr_curve(dets, gts, radius), metrics_at(dets, gts, thr, radius), errs))
    f1s = np.array([r.operating_point.f1 for r in results], dtype=np.float64)
    summary = {"f1": f1s.tolist(), "f1_mean": float(f1s.mean()), "f1_std": float(f1s.std())}
    return results, summary
