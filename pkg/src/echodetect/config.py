"""Experiment configuration: one YAML file shared by all subcommands.

Each subcommand reads its own section (``phantom:``, ``train:``,
``infer:``, ``evaluate:``, ``ablate:``, ``report:``) plus the shared
top-level keys.  Unknown keys anywhere are errors, so typos fail fast
instead of silently falling back to defaults.
"""

from __future__ import annotations

from dataclasses import fields as dataclass_fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig

__all__ = [
    "load_config",
    "get_section",
    "strict_kwargs",
    "build_model_config",
    "build_loss_weights",
]

TOP_LEVEL_KEYS = {"seed", "workers", "phantom", "train", "infer", "evaluate", "ablate", "report"}

SECTION_KEYS = {
    "phantom": {"n_cases", "positive_fraction", "split_counts", "format", "spec", "save_confounders"},
    "train": {
        "manifest", "stage", "preset", "use_cls", "use_ent", "use_pretrained",
        "initial_checkpoint", "epochs", "patches_per_case", "batch_size",
        "learning_rate", "positive_bias", "patch_class_min_voxels", "val_every",
        "allow_provenance_mismatch", "model", "loss", "min_lesion_voxels",
    },
    "infer": {
        "manifest", "checkpoint", "split", "threshold", "min_lesion_voxels",
        "blend", "montage", "format",
    },
    "evaluate": {
        "manifest", "predictions", "split", "threshold", "min_lesion_voxels",
        "min_overlap_fraction", "name",
    },
    "ablate": {
        "manifest", "presets", "pretrain_epochs", "finetune_epochs",
        "patches_per_case", "batch_size", "lr_pretrain", "lr_finetune",
        "positive_bias", "patch_class_min_voxels", "min_lesion_voxels",
        "val_every", "blend", "model", "loss", "include_reference",
    },
    "report": {"runs", "include_reference"},
}


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping at the top level")
    unknown = set(data) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"config {path}: unknown top-level keys {sorted(unknown)}")
    for name in SECTION_KEYS:
        if name in data:
            section = data[name]
            if not isinstance(section, dict):
                raise ConfigError(f"config section '{name}' must be a mapping")
            bad = set(section) - SECTION_KEYS[name]
            if bad:
                raise ConfigError(f"config section '{name}': unknown keys {sorted(bad)}")
    return data


def get_section(config: dict, name: str, required: bool = True) -> dict:
    if name not in config:
        if required:
            raise ConfigError(f"config is missing the '{name}' section")
        return {}
    return config[name]


def strict_kwargs(cls, mapping: dict, context: str) -> dict:
    """Validate ``mapping`` keys against a dataclass's fields."""
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"{context} must be a mapping")
    allowed = {f.name for f in dataclass_fields(cls)}
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)} (allowed: {sorted(allowed)})")
    return dict(mapping)


def _tupled(mapping: dict, *keys) -> dict:
    out = dict(mapping)
    for k in keys:
        if k in out and out[k] is not None:
            out[k] = tuple(out[k]) if isinstance(out[k], (list, tuple)) else out[k]
    return out


def build_model_config(mapping: dict | None) -> ModelConfig:
    kwargs = strict_kwargs(ModelConfig, mapping or {}, "model config")
    kwargs = _tupled(kwargs, "patch_size", "cls_pool_kernel")
    try:
        return ModelConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"model config: {exc}") from exc


def build_loss_weights(mapping: dict | None) -> LossWeights:
    kwargs = strict_kwargs(LossWeights, mapping or {}, "loss config")
    kwargs = _tupled(kwargs, "deep_supervision_weights")
    try:
        return LossWeights(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"loss config: {exc}") from exc
