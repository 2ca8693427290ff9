"""Run configuration: one YAML/JSON document with strictly validated sections.

Example::

    dataset_root: data/shapes
    output_dir: runs/shapes
    network: {domain_count: 2, image_size: 64, base_channels: 16}
    train: {n_epochs_flat: 5, n_epochs_decay: 5, steps_per_epoch: 200, seed: 0}
    synthetic: {image_size: 64, train_per_domain: 200, test_per_domain: 50, seed: 7}
    protocol: {inputs_per_domain: 20, is_samples: 20}
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import SyntheticSpec
from .errors import ConfigurationError
from .evaluate import EvalProtocol
from .networks import NetworkConfig
from .train import TrainConfig

_SECTIONS = {"network": NetworkConfig, "train": TrainConfig, "synthetic": SyntheticSpec, "protocol": EvalProtocol}


def build_section(cls, values, where):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigurationError(f"{where}: expected a mapping, got {type(values).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}; allowed: {sorted(known)}")
    try:
        return cls(**values)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{where}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: {exc}") from None


@dataclass
class RunConfig:
    dataset_root: str | None = None
    output_dir: str = "runs/default"
    domains: list | None = None
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSpec | None = None
    protocol: EvalProtocol = field(default_factory=EvalProtocol)

    @classmethod
    def from_dict(cls, raw: dict):
        if not isinstance(raw, dict):
            raise ConfigurationError("configuration document must be a mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(f"unknown top-level keys {unknown}; allowed: {sorted(known)}")
        kwargs = {}
        for key, value in raw.items():
            if key in _SECTIONS:
                if key == "synthetic" and value is None:
                    kwargs[key] = None
                else:
                    kwargs[key] = build_section(_SECTIONS[key], value, key)
            else:
                kwargs[key] = value
        cfg = cls(**kwargs)
        if cfg.domains is not None and len(cfg.domains) != cfg.network.domain_count:
            raise ConfigurationError(
                f"domains lists {len(cfg.domains)} names but network.domain_count is {cfg.network.domain_count}"
            )
        return cfg

    def to_dict(self):
        out = dataclasses.asdict(self)
        return out


def load_document(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
    return raw if raw is not None else {}


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    raw = load_document(path) if path is not None else {}
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            if node.get(p) is None:
                node[p] = {}
            node = node[p]
        node[leaf] = value
    return RunConfig.from_dict(raw)


def dump_config(cfg: RunConfig, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
