"""Experiment configuration files (YAML).

Schema, every block optional::

    system:        SystemConfig fields (n_antennas, n_users, snr_db, ...)
    architecture:  ArchConfig fields (gal_layers, fl_layers, heads, ...)
    training:      TrainConfig fields, plus
                   profile: desk | paper   (desk = lr 1e-4, 200 epochs)
                   split: [train, val, test] fractions
                   dataset_size, dataset_seed: used when no dataset is given
    paths:         dataset, checkpoint, output_dir

Unknown keys anywhere raise :class:`ConfigError`.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import __version__
from .channel import SystemConfig
from .model import ArchConfig
from .training import TrainConfig

BLOCKS = ("system", "architecture", "training", "paths")
PATH_KEYS = ("dataset", "checkpoint", "output_dir")
EXTRA_TRAINING_KEYS = ("profile", "split", "dataset_size", "dataset_seed")


class ConfigError(ValueError):
    pass


def _check_keys(block: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in '{block}': {', '.join(unknown)}")


@dataclass
class ExperimentConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    profile: str = "desk"
    split: tuple = (0.9, 0.05, 0.05)
    dataset_size: int = 20_000
    dataset_seed: int = 0
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict | None) -> "ExperimentConfig":
        raw = raw or {}
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        _check_keys("root", raw, BLOCKS)
        blocks = {}
        for b in BLOCKS:
            val = raw.get(b) or {}
            if not isinstance(val, dict):
                raise ConfigError(f"block '{b}' must be a mapping")
            blocks[b] = dict(val)
        try:
            sys_fields = [f.name for f in dataclasses.fields(SystemConfig)]
            _check_keys("system", blocks["system"], sys_fields)
            system = SystemConfig.from_dict(blocks["system"])

            arch_fields = [f.name for f in dataclasses.fields(ArchConfig)]
            _check_keys("architecture", blocks["architecture"], arch_fields)
            arch = ArchConfig(**blocks["architecture"])

            tr = blocks["training"]
            train_fields = [f.name for f in dataclasses.fields(TrainConfig)]
            _check_keys("training", tr, [*train_fields, *EXTRA_TRAINING_KEYS])
            profile = tr.pop("profile", "desk")
            split = tuple(float(s) for s in tr.pop("split", (0.9, 0.05, 0.05)))
            size = int(tr.pop("dataset_size", 20_000))
            seed = int(tr.pop("dataset_seed", 0))
            if profile == "desk":
                train = TrainConfig.desk(**tr)
            elif profile == "paper":
                train = TrainConfig(**tr)
            else:
                raise ConfigError(f"training.profile must be 'desk' or 'paper', got {profile!r}")
            if len(split) != 3 or min(split) < 0 or abs(sum(split) - 1.0) > 1e-9:
                raise ConfigError("training.split must be three non-negative fractions summing to 1")

            _check_keys("paths", blocks["paths"], PATH_KEYS)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(system, arch, train, profile, split, size, seed, blocks["paths"])

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.update(profile=self.profile, split=list(self.split),
                     dataset_size=self.dataset_size, dataset_seed=self.dataset_seed)
        return {
            "system": self.system.to_dict(),
            "architecture": self.arch.to_dict(),
            "training": train,
            "paths": dict(self.paths),
        }

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("paths")  # where files live does not change results
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_system(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, system=dataclasses.replace(self.system, **kw))

    def write_resolved(self, out_dir, extra: dict | None = None) -> Path:
        """Dump the fully resolved config, its hash and the package version."""
        out = Path(out_dir) / "resolved_config.yaml"
        doc = self.to_dict()
        doc["stamp"] = {"config_hash": self.config_hash(), "version": __version__, **(extra or {})}
        out.write_text(yaml.safe_dump(doc, sort_keys=True))
        return out
