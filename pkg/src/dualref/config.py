"""Layered key-value configuration.

Config files are YAML with nested sections (model.*, train.*, loss.*,
flow.*, data.*). Every key can be overridden on the command line by its
dotted name, e.g. `--model.channels 32` or `--train.steps=500`.
"""

from __future__ import annotations

import copy

import yaml

from .errors import ConfigError, UsageError
from .flow import FlowProvider
from .losses import LossWeights
from .network import ModelConfig
from .training import TrainConfig

DEFAULTS = {
    "model": {
        "channels": 64,
        "encoder_blocks": 2,
        "ref_fusion_blocks": 3,
        "sr_fusion_blocks": 5,
        "upsampler_blocks": 3,
        "embed_channels": 16,
        "scale": 4,
        "use_ref": True,
        "use_ref_stream": True,
        "use_sr_dcn": True,
        "use_residual_prop": True,
        "use_conf_prop": False,
        "seed": 0,
    },
    "train": {
        "stage": 1,
        "steps": 200,
        "batch": 1,
        "patch_crop": 32,
        "clip_len": 3,
        "lr": 1e-4,
        "lr_min_factor": 0.1,
        "seed": 0,
        "grad_clip": 10.0,
        "val_every": 0,
        "checkpoint_every": 0,
        "tele_magnification": 4,
    },
    "loss": {
        "mode": "full",
        "alpha": 0.01,
        "beta": 0.05,
        "gamma": 0.1,
        "charbonnier_eps": 1e-3,
    },
    "flow": {
        "provider": "pyramid",
        "levels": 3,
        "iters": 10,
    },
    "data": {
        "scale": 4,
        "magnification": 2,
        "split_ratios": [0.85, 0.05, 0.10],
    },
}


def load_config(path=None):
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path) as f:
                user = yaml.safe_load(f) or {}
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        if not isinstance(user, dict):
            raise ConfigError(f"config root must be a mapping: {path}")
        _merge(cfg, user)
    return cfg


def _merge(base, override):
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v


def apply_overrides(cfg, overrides):
    """Apply ['model.channels=32', ...] style dotted overrides in place."""
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override must be key=value, got {item!r}")
        key, raw = item.split("=", 1)
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config section {p!r} in {key!r}")
            node = node[p]
        leaf = parts[-1]
        if leaf not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[leaf] = _coerce(raw, node[leaf])
    return cfg


def _coerce(raw, current):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, list):
        return yaml.safe_load(raw)
    return raw


def model_config(cfg, **extra):
    d = {**cfg["model"], **extra}
    return ModelConfig(**d).validate()


def train_config(cfg, **extra):
    loss = cfg["loss"]
    weights = LossWeights(
        alpha=loss["alpha"], beta=loss["beta"], gamma=loss["gamma"],
        charbonnier_eps=loss["charbonnier_eps"],
    )
    d = {**cfg["train"], "loss_mode": loss["mode"], "weights": weights, **extra}
    return TrainConfig(**d).validate()


def flow_provider(cfg):
    f = cfg["flow"]
    return FlowProvider(kind=f["provider"], levels=f["levels"], iters=f["iters"])
