"""INI run configuration: one named key per hyperparameter, defaults = reference recipe."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Optional

from .augmentation import ORDER, AugmentationConfig, TransformSpec
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Bad or inconsistent configuration."""


@dataclass(frozen=True)
class DetectionConfig:
    nms_radius: float = 30.0
    match_radius: float = 30.0
    vote_radius: float = 30.0
    min_votes: int = 2
    macro_f1: bool = False


@dataclass(frozen=True)
class DataConfig:
    annotations: Optional[str] = None
    folds: Optional[str] = None
    n_folds: int = 5
    test_annotations: Optional[str] = None


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    detection: DetectionConfig = DetectionConfig()
    data: DataConfig = DataConfig()


# help strings shown by ``--help`` and written into the default config
TRAIN_NOTES = {
    "batch_size": "balanced: half mitosis, half non-mitosis",
    "base_lr": "Adam learning rate",
    "decay_factor": "step-wise learning-rate decay factor",
    "decay_every": "iterations between decays",
    "weight_decay": "L2 coefficient added to the gradient",
    "val_every": "iterations between validation-loss evaluations",
    "convergence_window": "EMA plateau window",
    "convergence_threshold": "relative EMA improvement below which training stops",
    "mining_rounds": "hard-negative mining rounds (retrain from scratch after each)",
    "mining_threshold": "score a false positive needs to be mined",
}


def _parse_value(raw: str, default, key: str, annotation: str = ""):
    raw = raw.strip()
    if default is None and "int" in str(annotation):
        default = 0
        if not raw or raw.lower() == "none":
            return None
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if default is None or isinstance(default, str):
            return raw or None
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from exc
    raise ConfigError(f"key {key!r} is not configurable from a file")


def _apply(obj, section: configparser.SectionProxy, skip=()):
    updates = {}
    known = {f.name: f for f in fields(obj)}
    for key, raw in section.items():
        if key not in known or key in skip:
            raise ConfigError(f"unknown key {key!r} in section [{section.name}]")
        updates[key] = _parse_value(raw, getattr(obj, key), f"{section.name}.{key}", known[key].type)
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section.name}]: {exc}") from exc


def _augmentation(section: configparser.SectionProxy) -> AugmentationConfig:
    base = AugmentationConfig()
    specs: Dict[str, TransformSpec] = {name: getattr(base, name) for name in ORDER}
    noise_reading = base.noise_reading
    for key, raw in section.items():
        if key == "noise_reading":
            noise_reading = raw.strip()
            continue
        name, _, attr = key.rpartition("_")
        if name not in specs or attr not in ("enabled", "p", "low", "high"):
            raise ConfigError(f"unknown key {key!r} in section [augmentation]")
        val = _parse_value(raw, getattr(specs[name], attr), f"augmentation.{key}")
        try:
            specs[name] = replace(specs[name], **{attr: val})
        except ValueError as exc:
            raise ConfigError(f"augmentation.{key}: {exc}") from exc
    try:
        return AugmentationConfig(**specs, noise_reading=noise_reading)
    except ValueError as exc:
        raise ConfigError(f"[augmentation]: {exc}") from exc


def parse_config(text: str, base_dir: Optional[Path] = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    allowed = {"model", "train", "augmentation", "detection", "data"}
    extra = set(cp.sections()) - allowed
    if extra:
        raise ConfigError(f"unknown section(s) {sorted(extra)}; expected {sorted(allowed)}")
    cfg = RunConfig()
    model, train, det, data = cfg.model, cfg.train, cfg.detection, cfg.data
    if cp.has_section("model"):
        model = _apply(model, cp["model"])
    if cp.has_section("train"):
        train = _apply(train, cp["train"], skip=("augmentation", "negative_mix", "fold"))
    if cp.has_section("augmentation"):
        train = replace(train, augmentation=_augmentation(cp["augmentation"]))
    if cp.has_section("detection"):
        det = _apply(det, cp["detection"])
    if cp.has_section("data"):
        data = _apply(data, cp["data"])
        if base_dir is not None:
            data = replace(data, **{k: str((base_dir / getattr(data, k)).resolve())
                                    for k in ("annotations", "folds", "test_annotations")
                                    if getattr(data, k)})
        for k in ("annotations", "folds", "test_annotations"):
            path = getattr(data, k)
            if path and not Path(path).exists():
                raise ConfigError(f"[data] {k} = {path} does not exist")
    return RunConfig(model, train, det, data)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(p.read_text(), p.parent)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return "" if v is None else str(v).lower() if isinstance(v, bool) else str(v)


def default_config_text() -> str:
    """A complete config file listing every key at its default."""
    cfg = RunConfig()
    lines = ["# se2mitosis run configuration; every value below is the default", ""]
    lines.append("[model]")
    lines += [f"{f.name} = {_fmt(getattr(cfg.model, f.name))}" for f in fields(cfg.model)]
    lines += ["", "[train]"]
    for f in fields(cfg.train):
        if f.name in ("augmentation", "negative_mix", "fold"):
            continue
        note = TRAIN_NOTES.get(f.name)
        if note:
            lines.append(f"# {note}")
        lines.append(f"{f.name} = {_fmt(getattr(cfg.train, f.name))}")
    lines += ["", "[augmentation]"]
    aug = cfg.train.augmentation
    for name in ORDER:
        spec = getattr(aug, name)
        for attr in ("enabled", "p", "low", "high"):
            lines.append(f"{name}_{attr} = {_fmt(getattr(spec, attr))}")
    lines.append(f"noise_reading = {aug.noise_reading}")
    lines += ["", "[detection]"]
    lines += [f"{f.name} = {_fmt(getattr(cfg.detection, f.name))}" for f in fields(cfg.detection)]
    lines += ["", "[data]"]
    lines += [f"{f.name} = {_fmt(getattr(cfg.data, f.name))}" for f in fields(cfg.data)]
    return "\n".join(lines) + "\n"
