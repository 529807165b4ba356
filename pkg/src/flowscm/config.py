"""Experiment configuration: JSON file in, validated dataclass out.

The seed can be overridden by the FLOWSCM_SEED environment variable so
batch sweeps can reuse one config file.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .objectives import LossWeights
from .scm import CausalGraph

ENV_SEED = "FLOWSCM_SEED"


class ConfigError(Exception):
    pass


@dataclass
class ExperimentConfig:
    data_path: str
    out_dir: str
    seed: int = 0
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup_frac: float = 0.1
    block_dim: int = 2
    encoder_hidden: int = 128
    encoder_depth: int = 3
    decoder_hidden: int = 64
    struct_hidden: int = 32
    flow_layers: int = 4
    flow_hidden: int = 32
    flow_bumps: int = 3
    use_flow_prior: bool = True
    retention: float = 0.9
    top_fraction: float = 0.1
    tau_max: float = 1.0
    beta: float = 0.1
    lambda_cons: float = 1.0
    gamma: float = 3000.0
    nu: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 10.0
    lambda3: float = 1.0

    def __post_init__(self):
        if not str(self.data_path):
            raise ConfigError("data_path must be set")
        if not str(self.out_dir):
            raise ConfigError("out_dir must be set")
        for name in ("epochs", "batch_size", "block_dim", "encoder_hidden", "encoder_depth",
                     "decoder_hidden", "struct_hidden", "flow_layers", "flow_hidden", "flow_bumps"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        # hsic needs 4 points and the tracker needs two disjoint extremes
        if self.batch_size < 4:
            raise ConfigError(f"batch_size must be at least 4, got {self.batch_size}")
        for name in ("lr", "tau_max"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value <= 0:
                raise ConfigError(f"{name} must be finite and > 0, got {value}")
            setattr(self, name, value)
        for name in ("weight_decay",):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {value}")
            setattr(self, name, value)
        self.warmup_frac = float(self.warmup_frac)
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")
        self.retention = float(self.retention)
        if not 0.0 <= self.retention < 1.0:
            raise ConfigError(f"retention must be in [0, 1), got {self.retention}")
        self.top_fraction = float(self.top_fraction)
        if not 0.0 < self.top_fraction <= 0.5:
            raise ConfigError(f"top_fraction must be in (0, 0.5], got {self.top_fraction}")
        if not isinstance(self.use_flow_prior, bool):
            raise ConfigError(f"use_flow_prior must be a boolean, got {self.use_flow_prior!r}")
        try:
            self.weights()
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def weights(self) -> LossWeights:
        return LossWeights(
            beta=self.beta,
            lambda_cons=self.lambda_cons,
            gamma=self.gamma,
            nu=self.nu,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            lambda3=self.lambda3,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError(f"config must be a JSON object, got {type(raw).__name__}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        missing = sorted(name for name in ("data_path", "out_dir") if name not in raw)
        if missing:
            raise ConfigError(f"missing required config keys: {', '.join(missing)}")
        try:
            return cls(**raw)
        except TypeError as err:
            raise ConfigError(str(err)) from None


def load_config(path) -> ExperimentConfig:
    """Read a JSON config, applying the FLOWSCM_SEED override if set."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err.msg}, line {err.lineno})") from None
    env = os.environ.get(ENV_SEED)
    if env:
        try:
            raw["seed"] = int(env)
        except ValueError:
            raise ConfigError(f"{ENV_SEED} must be an integer, got {env!r}") from None
    return ExperimentConfig.from_dict(raw)


def graph_from_manifest(manifest: dict, block_dim: int) -> CausalGraph:
    """Concept graph matching a dataset manifest, block_dim dims per concept."""
    names = list(manifest["factors"])
    k = len(names)
    adjacency = np.zeros((k, k), dtype=np.int64)
    for parent, child in manifest["edges"]:
        if parent not in names or child not in names:
            raise ConfigError(f"manifest edge ({parent!r}, {child!r}) references unknown factor")
        adjacency[names.index(parent), names.index(child)] = 1
    return CausalGraph(names=names, dims=[block_dim] * k, adjacency=adjacency)
