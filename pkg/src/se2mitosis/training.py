"""Training loop, convergence test, mining round and the five-fold experiment."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .augmentation import AugmentationConfig, apply_augmentation, center_crop, sample_draw
from .data import (DEFAULT_MIX, Dataset, FoldSpec, Sample, SamplePool, build_pool, extract_patch,
                   make_folds, mine_hard_negatives, sample_batch, validation_set)
from .detection import (MATCH_RADIUS, NMS_RADIUS, Detection, apply_threshold, detect_images,
                        ensemble_vote, evaluate_folds, metrics_at, select_operating_point)
from .io import save_folds, save_predictions, write_pr_csv
from .model import ModelConfig, forward, forward_dense, init_model, is_buffer, normalize_input, save_checkpoint
from .optim import AdamState, LrSchedule, adam_step
from .tensor import Tensor, bce_with_logits, reshape

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"training loss became {value} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    base_lr: float = 3e-4
    decay_factor: float = 0.8
    decay_every: int = 5000
    weight_decay: float = 2e-4
    decoupled_weight_decay: bool = False
    max_iters: int = 20000
    val_every: int = 1000
    convergence_window: int = 5000
    convergence_threshold: float = 1e-3
    seed: int = 0
    fold: int = 0
    augmentation: AugmentationConfig = AugmentationConfig()
    mining_rounds: int = 1
    # length of the first-version model's run when mining follows (None = max_iters)
    first_round_iters: Optional[int] = None
    mining_threshold: float = 0.5
    mining_cap_per_image: int = 10
    match_radius: float = MATCH_RADIUS
    nms_radius: float = NMS_RADIUS
    random_negatives_per_image: int = 20
    min_negative_distance: float = 38.0
    negative_mix: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_MIX))

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if self.base_lr <= 0 or self.decay_factor <= 0 or self.weight_decay < 0:
            raise ValueError("learning rate and decay factor must be positive, weight decay non-negative")
        if self.max_iters < 1 or not 1 <= self.val_every <= self.max_iters:
            raise ValueError(f"need 1 <= val_every ({self.val_every}) <= max_iters ({self.max_iters})")
        if self.first_round_iters is not None and self.first_round_iters < 1:
            raise ValueError("first_round_iters must be >= 1")
        if self.convergence_window < 1 or self.mining_rounds < 0:
            raise ValueError("convergence_window must be >= 1 and mining_rounds >= 0")

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.base_lr, self.decay_factor, self.decay_every)


@dataclass
class TrainReport:
    records: List[dict] = field(default_factory=list)
    best_iteration: Optional[int] = None
    best_val_loss: float = math.inf
    stop_reason: str = ""
    batch_counts: List[tuple] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [r["loss"] for r in self.records]

    @property
    def lrs(self) -> List[float]:
        return [r["lr"] for r in self.records]

    @property
    def val_points(self) -> List[tuple]:
        return [(r["iteration"], r["val_loss"]) for r in self.records if "val_loss" in r]

    def to_jsonl(self) -> str:
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        lines.append(json.dumps({"best_iteration": self.best_iteration, "best_val_loss": self.best_val_loss,
                                 "stop_reason": self.stop_reason}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())


def ema(values: Sequence[float], alpha: float) -> np.ndarray:
    out = np.empty(len(values))
    acc = float(values[0]) if len(values) else 0.0
    for i, v in enumerate(values):
        acc = alpha * float(v) + (1.0 - alpha) * acc
        out[i] = acc
    return out


def check_convergence(loss_history: Sequence[float], window: int = 5000, rel_threshold: float = 1e-3) -> bool:
    """EMA plateau test on the training loss.

    The EMA uses smoothing ``min(1, 10 / window)``.  Returns True when it
    improved by less than ``rel_threshold`` (relative) over the last
    ``window`` iterations; never before ``2 * window`` values are available.
    """
    if len(loss_history) < 2 * window:
        return False
    return _plateau(ema(loss_history, min(1.0, 10.0 / window)), window, rel_threshold)


def _plateau(smooth: Sequence[float], window: int, rel_threshold: float) -> bool:
    if len(smooth) < 2 * window:
        return False
    before, now = smooth[-window - 1], smooth[-1]
    if before <= 0:
        return True
    return (before - now) / abs(before) < rel_threshold


def _trainable(params: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {k: v for k, v in params.items() if not is_buffer(k)}


def _patches(dataset: Dataset, samples: Sequence[Sample], draws=None) -> np.ndarray:
    out = []
    for b, s in enumerate(samples):
        ctx = extract_patch(dataset.image(s.case_id), (s.x, s.y))
        out.append(center_crop(ctx) if draws is None else apply_augmentation(ctx, draws[b]))
    return normalize_input(np.stack(out))


def evaluate_loss(params, x: np.ndarray, labels: np.ndarray, config: ModelConfig, chunk: int = 64) -> float:
    """Mean BCE over a patch set in inference mode (float64 accumulation)."""
    logits = np.concatenate([forward(params, x[i:i + chunk], config).data.reshape(-1)
                             for i in range(0, len(x), chunk)]).astype(np.float64)
    y = labels.astype(np.float64)
    return float(np.mean(np.maximum(logits, 0) - logits * y + np.log1p(np.exp(-np.abs(logits)))))


def train_step(params, weights, state: AdamState, x: np.ndarray, y: np.ndarray, lr: float,
               model_config: ModelConfig, weight_decay: float, decoupled: bool = False, it: int = 0) -> float:
    """One forward/backward/Adam update in train mode; returns the batch loss."""
    p = {k: Tensor(v, requires_grad=not is_buffer(k), name=k) for k, v in params.items()}
    logits = forward(p, x, model_config, training=True)
    loss = bce_with_logits(reshape(logits, (len(y),)), y)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NonFiniteLossError(it, value)
    loss.backward()
    adam_step(weights, {k: p[k].grad for k in weights}, state, lr, weight_decay, decoupled=decoupled)
    return value


def fit_classifier(dataset: Dataset, train_ids: Sequence[str], val_ids: Sequence[str],
                   config: TrainConfig = TrainConfig(), model_config: ModelConfig = ModelConfig(),
                   pool: Optional[SamplePool] = None, round_index: int = 0,
                   on_step: Optional[Callable[[int, List[Sample]], None]] = None):
    """Train one classifier from scratch and return its best snapshot.

    Returns ``(params, report, pool)``.  ``params`` is the snapshot at the
    validation point with the smallest validation loss.
    """
    if not val_ids:
        raise ValueError("validation split is empty")
    if pool is None:
        pool = build_pool(dataset, train_ids, config.random_negatives_per_image,
                          config.min_negative_distance, seed=config.seed, mix=config.negative_mix)
    val = validation_set(dataset, val_ids, seed=config.seed, random_per_image=config.random_negatives_per_image)
    x_val = _patches(dataset, val)
    y_val = np.array([s.label for s in val])

    params = init_model(model_config, config.seed)
    weights = _trainable(params)
    state = AdamState()
    sched = config.schedule
    report = TrainReport()
    best = None
    half = config.batch_size // 2
    alpha = min(1.0, 10.0 / config.convergence_window)
    smooth: List[float] = []
    for it in range(config.max_iters):
        key = (config.seed, config.fold, round_index, it)
        batch = sample_batch(pool, config.batch_size, key)
        n_pos = sum(s.label for s in batch)
        report.batch_counts.append((n_pos, len(batch) - n_pos))
        if n_pos != half or len(batch) != config.batch_size:
            raise AssertionError(f"unbalanced batch {n_pos}/{len(batch) - n_pos}")
        if on_step is not None:
            on_step(it, batch)
        draws = [sample_draw(config.augmentation, (*key, b)) for b in range(len(batch))]
        x = _patches(dataset, batch, draws)
        y = np.array([s.label for s in batch], dtype=np.float32)

        lr = sched(it)
        value = train_step(params, weights, state, x, y, lr, model_config, config.weight_decay,
                           config.decoupled_weight_decay, it)
        rec = {"iteration": it, "loss": value, "lr": lr}

        last = it + 1 == config.max_iters
        smooth.append(value if not smooth else alpha * value + (1.0 - alpha) * smooth[-1])
        converged = _plateau(smooth, config.convergence_window, config.convergence_threshold)
        if (it + 1) % config.val_every == 0 or last or converged:
            vl = evaluate_loss(params, x_val, y_val, model_config)
            rec["val_loss"] = vl
            if vl < report.best_val_loss:
                report.best_val_loss, report.best_iteration = vl, it
                best = {k: v.copy() for k, v in params.items()}
            log.info("fold %d round %d iter %d loss %.4f val %.4f", config.fold, round_index, it, value, vl)
        report.records.append(rec)
        if converged:
            report.stop_reason = "converged"
            break
    else:
        report.stop_reason = "max_iters"
    if best is None:  # every validation loss was non-finite
        raise NonFiniteLossError(report.records[-1]["iteration"], math.nan)
    return best, report, pool


def make_scorer(params: Mapping[str, np.ndarray], model_config: ModelConfig) -> Callable:
    """``(H x W x 3 uint8 image, image_id) -> ProbabilityMap``."""

    def score(image: np.ndarray, image_id=None):
        return forward_dense(params, normalize_input(np.asarray(image).transpose(2, 0, 1)), model_config, image_id)

    return score


@dataclass
class FoldResult:
    fold: int
    params: Dict[str, np.ndarray]
    reports: List[TrainReport]
    threshold: float
    mined: int = 0
    error: Optional[str] = None


def train_fold(dataset: Dataset, fold: FoldSpec, config: TrainConfig = TrainConfig(),
               model_config: ModelConfig = ModelConfig()) -> FoldResult:
    """First-version model, ``mining_rounds`` retrainings on mined pools, then the
    validation operating point."""
    train_ids, val_ids = fold.cases("train"), fold.cases("validation")
    if not train_ids or not val_ids:
        raise ValueError(f"fold {fold.index} has an empty train or validation split")
    cfg = _with_fold(config, fold.index)
    first = cfg
    if cfg.mining_rounds and cfg.first_round_iters is not None:
        first = _with_fold(cfg, fold.index, max_iters=cfg.first_round_iters,
                           val_every=min(cfg.val_every, cfg.first_round_iters))
    params, report, pool = fit_classifier(dataset, train_ids, val_ids, first, model_config)
    reports = [report]
    mined_total = 0
    for r in range(1, cfg.mining_rounds + 1):
        mined = mine_hard_negatives(make_scorer(params, model_config), dataset, train_ids,
                                    cfg.mining_threshold, cfg.match_radius, cfg.mining_cap_per_image,
                                    cfg.nms_radius)
        mined_total += len(mined)
        pool = pool.with_mined(mined)
        params, report, pool = fit_classifier(dataset, train_ids, val_ids, cfg, model_config, pool, round_index=r)
        reports.append(report)
    val_images = {c: dataset.image(c) for c in val_ids}
    dets, _ = detect_images(make_scorer(params, model_config), val_images, cfg.nms_radius)
    op = select_operating_point(dets, {c: dataset.points(c) for c in val_ids}, cfg.match_radius)
    return FoldResult(fold.index, params, reports, op.threshold, mined_total)


def _with_fold(config: TrainConfig, fold: int, **overrides) -> TrainConfig:
    return replace(config, fold=fold, **overrides)


def ensemble_detect(fold_results: Sequence[FoldResult], model_config: ModelConfig,
                    images: Mapping[str, np.ndarray], vote_radius: float = MATCH_RADIUS,
                    min_votes: int = 2, nms_radius: float = NMS_RADIUS) -> List[Detection]:
    lists = []
    for fr in fold_results:
        dets, _ = detect_images(make_scorer(fr.params, model_config), images, nms_radius)
        lists.append(apply_threshold(dets, fr.threshold))
    return ensemble_vote(lists, vote_radius, min_votes)


def run_experiment(dataset: Dataset, config: TrainConfig = TrainConfig(),
                   model_config: ModelConfig = ModelConfig(), n_folds: int = 5,
                   out_dir=None, test_sets: Optional[Mapping[str, Dataset]] = None,
                   min_votes: int = 2, folds: Optional[Sequence[FoldSpec]] = None) -> dict:
    """Train every fold, evaluate each on its own test split and the ensemble
    on any extra held-out ``test_sets``.

    A failing fold is reported in the summary and skipped; the others
    are still emitted.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    folds = list(folds) if folds is not None else make_folds(dataset.cases, n_folds, seed=config.seed)
    if out is not None:
        save_folds(out / "folds.json", [f.to_dict() for f in folds])
    results: List[FoldResult] = []
    failures = {}
    fold_dets, fold_gts, thresholds, fold_errors = [], [], [], []
    for fold in folds:
        try:
            fr = train_fold(dataset, fold, config, model_config)
        except Exception as exc:  # noqa: BLE001 - surviving folds are still emitted
            log.error("fold %d failed: %s", fold.index, exc)
            failures[fold.index] = f"{type(exc).__name__}: {exc}"
            continue
        results.append(fr)
        test_ids = fold.cases("test")
        dets, errs = detect_images(make_scorer(fr.params, model_config),
                                   {c: dataset.image(c) for c in test_ids}, config.nms_radius)
        fold_dets.append(dets)
        fold_gts.append({c: dataset.points(c) for c in test_ids})
        thresholds.append(fr.threshold)
        fold_errors.append(errs)
        if out is not None:
            save_checkpoint(out / f"fold{fold.index}.se2w", fr.params, model_config,
                            {"fold": fold.index, "threshold": fr.threshold, "seed": config.seed,
                             "best_iteration": fr.reports[-1].best_iteration})
            for r, rep in enumerate(fr.reports):
                rep.write(out / f"fold{fold.index}_round{r}.jsonl")
    summary: dict = {"folds": [], "failures": failures}
    if results:
        evals, fsum = evaluate_folds(fold_dets, fold_gts, thresholds, config.match_radius, fold_errors)
        summary.update(fsum)
        for fr, ev in zip(results, evals):
            summary["folds"].append({"fold": fr.fold, "threshold": fr.threshold, "mined": fr.mined,
                                     "test": asdict(ev.operating_point), "errors": ev.errors,
                                     "best_iteration": [r.best_iteration for r in fr.reports],
                                     "stop_reason": [r.stop_reason for r in fr.reports]})
            if out is not None:
                write_pr_csv(out / f"pr_fold{fr.fold}.csv", ev.curve)
    summary["ensemble"] = {}
    if test_sets and len(results) >= max(2, min_votes):
        for name, ds in test_sets.items():
            images = {c: ds.image(c) for c in ds.case_ids}
            dets = ensemble_detect(results, model_config, images, config.match_radius, min_votes, config.nms_radius)
            m = metrics_at(dets, {c: ds.points(c) for c in ds.case_ids}, 0.0, config.match_radius)
            summary["ensemble"][name] = asdict(m)
            if out is not None:
                save_predictions(out / f"ensemble_{name}.json", dets)
    summary["fold_results"] = results
    if out is not None:
        Path(out / "summary.json").write_text(
            json.dumps({k: v for k, v in summary.items() if k != "fold_results"}, indent=1, sort_keys=True) + "\n")
    return summary
