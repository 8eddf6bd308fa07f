"""Experiment configuration: one TOML/JSON file covering training, losses,
network shape and data paths. parse -> serialize -> parse is the identity."""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import tomli

from .field import FieldConfig
from .train import LossWeights, TrainConfig


class ConfigError(Exception):
    pass


def train_config_to_dict(cfg: TrainConfig):
    d = {k: getattr(cfg, k) for k in
         ("epochs", "rays_per_batch", "samples_per_ray", "batches_per_epoch",
          "lr0", "lr_decay", "seed", "ablation", "refine_poses",
          "eik_points", "beta_lr_scale", "dep_lr_scale",
          "checkpoint_every", "val_every",
          "temperature")}
    d["lr_milestones"] = list(cfg.lr_milestones)
    d["weights"] = {"lambda_eik": cfg.weights.lambda_eik,
                    "lambda_com": cfg.weights.lambda_com,
                    "lambda_lpips": cfg.weights.lambda_lpips}
    return d


def train_config_from_dict(d):
    d = dict(d)
    weights = LossWeights(**d.pop("weights", {}))
    d["lr_milestones"] = tuple(d.get("lr_milestones", (200, 400)))
    return TrainConfig(weights=weights, **d)


@dataclass
class ExperimentConfig:
    dataset: str
    out_dir: str
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    field: FieldConfig = dc_field(default_factory=FieldConfig)

    def to_dict(self):
        return {"dataset": self.dataset, "out_dir": self.out_dir,
                "train": train_config_to_dict(self.train),
                "field": self.field.to_dict()}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(dataset=d["dataset"], out_dir=d["out_dir"],
                       train=train_config_from_dict(d.get("train", {})),
                       field=FieldConfig.from_dict(
                           d["field"]) if "field" in d else FieldConfig())
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid experiment config: {e}") from e

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        if path.suffix == ".toml":
            with open(path, "rb") as f:
                data = tomli.load(f)
        else:
            with open(path) as f:
                data = json.load(f)
        return cls.from_dict(data)
