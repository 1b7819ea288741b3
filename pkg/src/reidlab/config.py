"""Run configuration: one strict JSON document per run.

A run config has seven sections: ``seed``, ``dataset``, ``backbone``,
``gate``, ``train``, ``eval`` and ``paths``. Unknown keys are rejected by
name. The top-level seed fills in any section seed that is not given
explicitly. Every completed run writes its fully resolved config next to
its outputs, and that file alone reproduces the run.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .backbone import BackboneConfig
from .evaluation import EvalProtocol
from .gates import GateConfig
from .synthetic import DatasetSpec
from .training import AugmentParams, TrainConfig


class ConfigError(ValueError):
    """A config document failed validation; the message names the key."""


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data/person"
    generic_data_dir: str = "data/generic"
    runs_dir: str = "runs"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalProtocol = field(default_factory=EvalProtocol)
    paths: PathsConfig = field(default_factory=PathsConfig)


_SECTIONS = ("seed", "dataset", "backbone", "gate", "train", "eval", "paths")


def _from_dict(cls, data, where):
    """Construct a (frozen) config dataclass, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a JSON object, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section {where!r}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"section {where!r}: {err}") from err


def _train_from_dict(data, where, seed, backbone, gate):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a JSON object, got {type(data).__name__}")
    data = dict(data)
    for misplaced in ("backbone", "gate"):
        if misplaced in data:
            raise ConfigError(
                f"unknown key {misplaced!r} in section {where!r}; "
                f"configure it in the top-level {misplaced!r} section"
            )
    augment = data.pop("augment", None)
    data.setdefault("seed", seed)
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section {where!r}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    kwargs["backbone"] = backbone
    kwargs["gate"] = gate
    if augment is not None:
        kwargs["augment"] = _from_dict(AugmentParams, augment, f"{where}.augment")
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"section {where!r}: {err}") from err


def config_from_dict(doc, where="config"):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object, got {type(doc).__name__}")
    for key in doc:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown key {key!r} at the top level of {where}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"key 'seed' must be an integer, got {seed!r}")

    def section(name):
        return dict(doc.get(name, {}))

    ds = section("dataset")
    ds.setdefault("seed", seed)
    ev = section("eval")
    ev.setdefault("seed", seed)

    dataset = _from_dict(DatasetSpec, ds, "dataset")
    backbone = _from_dict(BackboneConfig, section("backbone"), "backbone")
    gate = _from_dict(GateConfig, section("gate"), "gate")
    train = _train_from_dict(section("train"), "train", seed, backbone, gate)
    protocol = _from_dict(EvalProtocol, ev, "eval")
    paths = _from_dict(PathsConfig, section("paths"), "paths")
    return RunConfig(seed=seed, dataset=dataset, backbone=backbone, gate=gate,
                     train=train, eval=protocol, paths=paths)


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path} is not valid JSON: {err}") from err
    return config_from_dict(doc, where=str(path))


def load_dataset_spec(path):
    """A standalone dataset spec file: just the dataset section."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"spec file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path} is not valid JSON: {err}") from err
    return _from_dict(DatasetSpec, doc, "dataset spec")


def config_to_dict(cfg):
    """Fully resolved, JSON-ready dict; inverse of config_from_dict."""
    train = dataclasses.asdict(cfg.train)
    train.pop("backbone")
    train.pop("gate")
    return {
        "seed": cfg.seed,
        "dataset": dataclasses.asdict(cfg.dataset),
        "backbone": dataclasses.asdict(cfg.backbone),
        "gate": dataclasses.asdict(cfg.gate),
        "train": train,
        "eval": dataclasses.asdict(cfg.eval),
        "paths": dataclasses.asdict(cfg.paths),
    }


def write_resolved(cfg, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")
    return path


def apply_overrides(cfg, task=None, source_weights=None, keep_stages=None, mask=None):
    """Fold CLI flag overrides into the config so the resolved echo is exact."""
    train = cfg.train
    gate = cfg.gate
    if mask is not None:
        gate = replace(gate, strategy=mask)
        train = replace(train, gate=gate)
    if task is not None:
        train = replace(train, task=task)
    if source_weights is not None:
        train = replace(train, source_weights=str(source_weights))
    if keep_stages is not None:
        train = replace(train, keep_stages=keep_stages)
    return replace(cfg, gate=gate, train=train)
