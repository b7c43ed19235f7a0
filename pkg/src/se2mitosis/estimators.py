"""scikit-learn style wrappers around the classifier and the detector."""

from __future__ import annotations

import math
from typing import Mapping, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .augmentation import CONTEXT, AugmentationConfig, apply_augmentation, center_crop, key_rng, sample_draw
from .detection import (MATCH_RADIUS, NMS_RADIUS, apply_threshold, ensemble_vote, extract_candidates,
                        metrics_at, select_operating_point)
from .model import ModelConfig, forward, init_model, is_buffer, load_checkpoint, normalize_input, save_checkpoint
from .optim import AdamState, LrSchedule
from .tensor import sigmoid
from .training import evaluate_loss, make_scorer, train_step
from .validation import check_binary_labels, check_images, check_patches, check_points


class SE2PatchClassifier(ClassifierMixin, BaseEstimator):
    """Rotation-invariant patch classifier (mitosis = 1).

    ``X`` holds uint8 patches ``N x 3 x S x S``.  With ``S >= 128`` and
    ``augment=True`` every training sample is augmented from its context;
    otherwise the central 77x77 crop is used as is.

    Parameters
    ----------
    widths, hidden, orientations : network size (reference recipe: 16,16,16,16,32 / 64 / 8)
    batch_size : balanced batch size
    learning_rate, decay_factor, decay_every, weight_decay : optimizer settings
    max_iter : number of optimizer steps
    val_every : steps between validation-loss checks when ``eval_set`` is given
    random_state : seed for initialization, sampling and augmentation
    """

    def __init__(self, widths=(16, 16, 16, 16, 32), hidden=64, orientations=8, batch_size=64,
                 learning_rate=3e-4, decay_factor=0.8, decay_every=5000, weight_decay=2e-4,
                 max_iter=1000, val_every=100, augment=True, random_state=0):
        self.widths = widths
        self.hidden = hidden
        self.orientations = orientations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.decay_factor = decay_factor
        self.decay_every = decay_every
        self.weight_decay = weight_decay
        self.max_iter = max_iter
        self.val_every = val_every
        self.augment = augment
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(orientations=self.orientations, widths=tuple(self.widths), hidden=self.hidden)

    def _crops(self, X: np.ndarray) -> np.ndarray:
        return normalize_input(center_crop(X, self.config_.patch_size))

    def fit(self, X, y, eval_set=None):
        X = check_patches(X)
        y = check_binary_labels(y, len(X))
        if y.min() == y.max():
            raise ValueError("training data needs both classes")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch_size must be even and >= 2, got {self.batch_size}")
        self.config_ = self._model_config()
        self.classes_ = np.array([0, 1])
        sched = LrSchedule(self.learning_rate, self.decay_factor, self.decay_every)
        aug = AugmentationConfig() if self.augment and X.shape[2] >= CONTEXT else None
        if aug is not None and X.shape[2] > CONTEXT:
            X = center_crop(X, CONTEXT)
        val = None
        if eval_set is not None:
            xv = check_patches(eval_set[0])
            val = (self._crops(xv), check_binary_labels(eval_set[1], len(xv)))

        params = init_model(self.config_, self.random_state)
        weights = {k: v for k, v in params.items() if not is_buffer(k)}
        state = AdamState()
        pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
        half = self.batch_size // 2
        self.loss_curve_, self.validation_scores_ = [], []
        best, best_loss = None, math.inf
        for it in range(self.max_iter):
            rng = key_rng((self.random_state, it))
            idx = np.concatenate([pos[rng.integers(0, len(pos), half)], neg[rng.integers(0, len(neg), half)]])
            if aug is not None:
                batch = np.stack([apply_augmentation(X[i], sample_draw(aug, (self.random_state, it, b)))
                                  for b, i in enumerate(idx)])
                xb = normalize_input(batch)
            else:
                xb = self._crops(X[idx])
            loss = train_step(params, weights, state, xb, y[idx].astype(np.float32), sched(it),
                              self.config_, self.weight_decay, it=it)
            self.loss_curve_.append(loss)
            if val is not None and ((it + 1) % self.val_every == 0 or it + 1 == self.max_iter):
                vl = evaluate_loss(params, val[0], val[1], self.config_)
                self.validation_scores_.append((it, vl))
                if vl < best_loss:
                    best, best_loss = {k: v.copy() for k, v in params.items()}, vl
        self.params_ = best if best is not None else params
        self.n_iter_ = self.max_iter
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        x = self._crops(check_patches(X, self.config_.patch_size))
        return np.concatenate([forward(self.params_, x[i:i + 64], self.config_).data.reshape(-1)
                               for i in range(0, len(x), 64)])

    def predict_proba(self, X) -> np.ndarray:
        p = sigmoid(self.decision_function(X).astype(np.float64))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, self.config_, {"estimator": self.get_params()})

    @classmethod
    def from_checkpoint(cls, path) -> "SE2PatchClassifier":
        params, config, header = load_checkpoint(path)
        est_params = dict(header.get("train", {}).get("estimator", {}))
        est_params.update(widths=tuple(config.widths), hidden=config.hidden, orientations=config.orientations)
        est = cls(**{k: v for k, v in est_params.items() if k in cls().get_params()})
        est.params_, est.config_, est.classes_ = params, config, np.array([0, 1])
        return est


class MitosisDetector(BaseEstimator):
    """Dense detector built from one or more checkpoints.

    ``fit`` picks each model's F1-maximizing threshold on the given images;
    ``predict`` returns NMS detections (one model) or the vote ensemble.
    """

    def __init__(self, checkpoints: Sequence[str] = (), nms_radius=NMS_RADIUS, match_radius=MATCH_RADIUS,
                 vote_radius=MATCH_RADIUS, min_votes=2, thresholds: Optional[Sequence[float]] = None):
        self.checkpoints = checkpoints
        self.nms_radius = nms_radius
        self.match_radius = match_radius
        self.vote_radius = vote_radius
        self.min_votes = min_votes
        self.thresholds = thresholds

    def _load(self):
        if not hasattr(self, "models_"):
            if not self.checkpoints:
                raise ValueError("no checkpoints given")
            self.models_ = []
            for path in self.checkpoints:
                params, config, header = load_checkpoint(path)
                self.models_.append((params, config, header.get("train", {}).get("threshold")))

    def _candidates(self, images: Mapping[str, np.ndarray]):
        out = []
        for params, config, _ in self.models_:
            score = make_scorer(params, config)
            out.append([d for k, img in images.items() for d in extract_candidates(score(img, k), self.nms_radius)])
        return out

    def fit(self, images, points):
        """Select per-model operating points on validation ``images`` with ground-truth ``points``."""
        self._load()
        images = check_images(images)
        gts = check_points(points, images)
        self.thresholds_ = [select_operating_point(c, gts, self.match_radius).threshold
                            for c in self._candidates(images)]
        return self

    def _thresholds(self):
        if hasattr(self, "thresholds_"):
            return self.thresholds_
        if self.thresholds is not None:
            if len(self.thresholds) != len(self.models_):
                raise ValueError("need one threshold per checkpoint")
            return list(self.thresholds)
        stored = [t for _, _, t in self.models_]
        if any(t is None for t in stored):
            raise ValueError("no threshold: call fit, pass thresholds, or use checkpoints that store one")
        return stored

    def transform(self, images) -> dict:
        """``id -> n_models x H_m x W_m`` probability maps."""
        self._load()
        images = check_images(images)
        return {k: np.stack([make_scorer(p, c)(img, k).values for p, c, _ in self.models_])
                for k, img in images.items()}

    def predict(self, images):
        self._load()
        images = check_images(images)
        lists = [apply_threshold(c, t) for c, t in zip(self._candidates(images), self._thresholds())]
        if len(lists) == 1:
            return lists[0]
        return ensemble_vote(lists, self.vote_radius, self.min_votes)

    def score(self, images, points) -> float:
        """Pooled F1 of :meth:`predict` against ``points``."""
        images = check_images(images)
        return metrics_at(self.predict(images), check_points(points, images), 0.0, self.match_radius).f1
