"""YAML experiment configuration.

Top-level keys and their sections::

    output_dir: runs/default     # where metrics.csv and checkpoints go
    record_seconds: false        # write wall-clock seconds into metrics.csv
    workers: 1                   # trials run in parallel processes when > 1
    dataset:
      source: synthetic          # synthetic | idx
      synthetic: {...}           # SyntheticSpec fields
      idx: {manifest: path} or {train_images, train_labels, test_images, test_labels, num_classes}
    active_learning: {...}       # ALConfig fields except train/model
    train: {...}                 # TrainConfig fields except seed/augment
    model: {...}                 # widths, proj_dim, use_predictor, use_projector, dtype
    augment: {...}               # AugmentConfig fields

Any key outside this set is rejected. Omitted keys take the dataclass
defaults, so an empty file describes the default desk-scale protocol.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from ..alloop import ALConfig
from ..augment import AugmentConfig
from ..model import ModelConfig
from ..trainer import TrainConfig
from .data import Dataset, SyntheticSpec, generate_synthetic, load_idx_dataset, load_manifest


class ConfigError(ValueError):
    pass


TOP_KEYS = {"output_dir", "record_seconds", "workers", "dataset", "active_learning", "train", "model", "augment"}
DATASET_KEYS = {"source", "synthetic", "idx"}
IDX_KEYS = {"manifest", "train_images", "train_labels", "test_images", "test_labels", "num_classes"}
# fields owned by another section, or filled in from the dataset
AL_EXCLUDED = {"train", "model"}
TRAIN_EXCLUDED = {"seed", "augment"}
MODEL_EXCLUDED = {"in_channels", "num_classes"}


def _names(cls, excluded=frozenset()) -> set[str]:
    return {f.name for f in fields(cls)} - set(excluded)


@dataclass(frozen=True)
class ExperimentConfig:
    al: ALConfig = field(default_factory=ALConfig)
    source: str = "synthetic"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    idx: Optional[dict] = None
    output_dir: str = "runs/default"
    record_seconds: bool = False
    workers: int = 1

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Single-trial copy; the dataset is unchanged."""
        return replace(self, al=replace(self.al, trials=(seed,)))

    def load_dataset(self, base: Path = Path(".")) -> Dataset:
        if self.source == "synthetic":
            return generate_synthetic(self.synthetic)
        idx = self.idx or {}
        if "manifest" in idx:
            return load_manifest(base / idx["manifest"])
        return load_idx_dataset(*(base / idx[k] for k in ("train_images", "train_labels", "test_images", "test_labels")),
                                num_classes=idx.get("num_classes"))


def _section(raw: Any, name: str, allowed: set) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"'{name}' must be a mapping")
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(unknown)}")
    return dict(raw)


def _tuples(d: dict, keys) -> dict:
    for k in keys:
        if k in d and isinstance(d[k], list):
            d[k] = tuple(d[k])
    return d


def from_dict(raw: Any) -> ExperimentConfig:
    top = _section(raw, "<root>", TOP_KEYS)
    ds = _section(top.get("dataset"), "dataset", DATASET_KEYS)
    try:
        source = ds.get("source", "synthetic")
        if source not in ("synthetic", "idx"):
            raise ConfigError("dataset.source must be 'synthetic' or 'idx'")
        synthetic = SyntheticSpec(**_tuples(_section(ds.get("synthetic"), "dataset.synthetic", _names(SyntheticSpec)),
                                            ("orientations", "frequencies", "hues", "imbalance")))
        idx = _section(ds.get("idx"), "dataset.idx", IDX_KEYS) or None
        if source == "idx" and not idx:
            raise ConfigError("dataset.source 'idx' needs a dataset.idx section")
        augment = AugmentConfig(**_tuples(_section(top.get("augment"), "augment", _names(AugmentConfig)), ("blur_sigma",)))
        # train/model defaults are the desk protocol's, not the bare dataclasses'
        base = ALConfig()
        train = replace(base.train, augment=augment, **_tuples(
            _section(top.get("train"), "train", _names(TrainConfig, TRAIN_EXCLUDED)), ("lr_milestones",)))
        model = replace(base.model, **_tuples(
            _section(top.get("model"), "model", _names(ModelConfig, MODEL_EXCLUDED)), ("widths",)))
        al_raw = _tuples(_section(top.get("active_learning"), "active_learning", _names(ALConfig, AL_EXCLUDED)), ("trials",))
        al = ALConfig(train=train, model=model, **al_raw)
        workers = int(top.get("workers", 1))
        if workers < 1:
            raise ConfigError("workers must be at least 1")
        return ExperimentConfig(
            al=al,
            source=source,
            synthetic=synthetic,
            idx=idx,
            output_dir=str(top.get("output_dir", "runs/default")),
            record_seconds=bool(top.get("record_seconds", False)),
            workers=workers,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _plain(obj, excluded=frozenset()) -> dict:
    out = {}
    for f in fields(obj):
        if f.name in excluded:
            continue
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def to_dict(cfg: ExperimentConfig) -> dict:
    dataset = {"source": cfg.source, "synthetic": _plain(cfg.synthetic)}
    if cfg.idx:
        dataset["idx"] = dict(cfg.idx)
    return {
        "output_dir": cfg.output_dir,
        "record_seconds": cfg.record_seconds,
        "workers": cfg.workers,
        "dataset": dataset,
        "active_learning": _plain(cfg.al, AL_EXCLUDED),
        "train": _plain(cfg.al.train, TRAIN_EXCLUDED),
        "model": _plain(cfg.al.model, MODEL_EXCLUDED),
        "augment": _plain(cfg.al.train.augment),
    }


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    return from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
