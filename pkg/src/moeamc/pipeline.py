"""Config-driven generate / train / eval / report steps.

A run is described by one JSON file. Every seed is derived from the master
seed with a fixed role constant, so the config plus master seed pin down all
output bytes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import MODEL_KINDS, build_model, load_model, save_model
from .report import SnrMetrics, accuracy_by_snr, emit_report, metrics_from_dict, metrics_to_dict
from .seeding import MASK64, ROLE_DATASET, ROLE_INIT, ROLE_SPLIT, ROLE_TRAIN, mix
from .sigsynth import Dataset, DatasetSpec, generate_dataset, load_dataset, save_dataset, split_dataset
from .trainer import TrainConfig, TrainHistory, predict, train

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec
    train: TrainConfig
    models: tuple
    out_dir: Path
    seed: int
    split: tuple = (0.7, 0.1, 0.2)
    model_configs: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "RunConfig":
        known = {"dataset", "train", "models", "out_dir", "seed", "split", "model_configs"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            seed = int(d["seed"])
            if not 0 <= seed <= MASK64:
                raise ConfigError("seed must be a 64-bit unsigned integer")
            ds_fields = dict(d.get("dataset", {}))
            tr_fields = dict(d.get("train", {}))
            for section, fields in (("dataset", ds_fields), ("train", tr_fields)):
                if "seed" in fields:
                    raise ConfigError(f"{section}.seed is derived from the master seed; remove it")
            if "model_kind" in tr_fields:
                raise ConfigError("train.model_kind is chosen per model; use the models list")
            models = tuple(d.get("models", MODEL_KINDS))
            if not models or any(m not in MODEL_KINDS for m in models):
                raise ConfigError(f"models must be a non-empty subset of {MODEL_KINDS}")
            out_dir = Path(d["out_dir"])
            if base_dir is not None and not out_dir.is_absolute():
                out_dir = base_dir / out_dir
            return cls(
                dataset=DatasetSpec(**ds_fields, seed=mix(seed, ROLE_DATASET)),
                train=TrainConfig(**tr_fields, seed=mix(seed, ROLE_TRAIN)),
                models=models,
                out_dir=out_dir,
                seed=seed,
                split=tuple(d.get("split", (0.7, 0.1, 0.2))),
                model_configs=dict(d.get("model_configs", {})),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid run config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
        return cls.from_dict(d, base_dir=path.parent)

    def train_config(self, kind: str) -> TrainConfig:
        return TrainConfig(**{**self.train.to_dict(), "model_kind": kind})

    def init_seed(self, kind: str) -> int:
        return mix(mix(self.seed, ROLE_INIT), MODEL_KINDS.index(kind))

    @property
    def split_seed(self) -> int:
        return mix(self.seed, ROLE_SPLIT)


def dataset_path(cfg: RunConfig, tag: str) -> Path:
    return cfg.out_dir / f"dataset_{tag}.bin"


def checkpoint_path(cfg: RunConfig, kind: str) -> Path:
    return cfg.out_dir / f"model_{kind}.ckpt"


def history_path(cfg: RunConfig, kind: str) -> Path:
    return cfg.out_dir / f"history_{kind}.csv"


def metrics_path(cfg: RunConfig, kind: str) -> Path:
    return cfg.out_dir / f"metrics_{kind}.json"


def report_dir(cfg: RunConfig) -> Path:
    return cfg.out_dir / "report"


def generate_step(cfg: RunConfig) -> dict[str, Dataset]:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    full = generate_dataset(cfg.dataset)
    parts = dict(zip(("train", "val", "test"), split_dataset(full, cfg.split, cfg.split_seed)))
    parts["full"] = full
    for tag, ds in parts.items():
        save_dataset(ds, dataset_path(cfg, tag))
    log.info("generated %d examples into %s", len(full), cfg.out_dir)
    return parts


def train_step(cfg: RunConfig, kind: str, checkpoint: Path | None = None) -> tuple[object, TrainHistory]:
    tr = load_dataset(dataset_path(cfg, "train"))
    va = load_dataset(dataset_path(cfg, "val"))
    model = build_model(kind, cfg.dataset.n_classes, cfg.dataset.frame_len, cfg.init_seed(kind), configs=cfg.model_configs)
    _, history = train(model, tr, va, cfg.train_config(kind))
    save_model(model, checkpoint or checkpoint_path(cfg, kind))
    history.write_csv(history_path(cfg, kind))
    return model, history


def eval_step(cfg: RunConfig, kind: str, checkpoint: Path | None = None) -> SnrMetrics:
    ckpt = Path(checkpoint or checkpoint_path(cfg, kind))
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model = load_model(ckpt)
    test = load_dataset(dataset_path(cfg, "test"))
    probs, gate = predict(model, test)
    m = accuracy_by_snr(np.argmax(probs, axis=1), test, gate)
    metrics_path(cfg, kind).write_text(json.dumps(metrics_to_dict(m), sort_keys=True) + "\n", encoding="utf-8")
    return m


def collect_metrics(cfg: RunConfig) -> dict[str, SnrMetrics]:
    out = {}
    for kind in cfg.models:
        p = metrics_path(cfg, kind)
        if p.exists():
            out[kind] = metrics_from_dict(json.loads(p.read_text(encoding="utf-8")))
    return out


def report_step(cfg: RunConfig) -> list[Path]:
    metrics = collect_metrics(cfg)
    if not metrics:
        raise FileNotFoundError(f"no metrics_*.json found in {cfg.out_dir}; run eval first")
    return emit_report(metrics, report_dir(cfg))


def run_pipeline(cfg: RunConfig) -> dict[str, SnrMetrics]:
    """generate -> train each model -> eval each model -> report."""
    generate_step(cfg)
    for kind in cfg.models:
        train_step(cfg, kind)
        eval_step(cfg, kind)
    report_step(cfg)
    return collect_metrics(cfg)
