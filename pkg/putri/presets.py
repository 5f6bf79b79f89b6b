# Copyright 2024 Tarkan Al-Kazily

import os

import yaml

from putri.data import VOCAB_SIZE
from putri.errors import ConfigError
from putri.model import ModelConfig

PRESETS = {
    "tiny": ModelConfig(
        d_model=64,
        n_layers=4,
        n_q_heads=8,
        n_kv_heads=2,
        head_dim=8,
        d_ff=256,
        vocab_size=VOCAB_SIZE,
    ),
    "micro": ModelConfig(
        d_model=32,
        n_layers=2,
        n_q_heads=4,
        n_kv_heads=2,
        head_dim=8,
        d_ff=64,
        vocab_size=VOCAB_SIZE,
        max_context=128,
    ),
}


def get_preset_names() -> list[str]:
    """
    Returns:
      - List of bundled preset names
    """
    return list(PRESETS)


def load_config_file(path: str | os.PathLike) -> ModelConfig:
    """
    Read a YAML model config. An optional "preset" key names the base config, the remaining
    keys override its fields.

    Example:
        preset: tiny
        n_layers: 2
        ffn_kind: plain

    Raises:
        ConfigError: Unknown preset or key, or invalid values.
        OSError: File unreadable.
    """
    with open(path, "r") as f:
        try:
            values = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse {path}: {e}") from e
    if not isinstance(values, dict):
        raise ConfigError(f"{path} must hold a mapping of config fields")

    base = {}
    preset = values.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset {preset!r}, choose from {get_preset_names()}")
        base = PRESETS[preset].to_dict()
    base.update(values)
    return ModelConfig.from_dict(base)


def resolve_config(name_or_path: str) -> ModelConfig:
    """
    Args:
        name_or_path: Preset name, or a path to a YAML config file

    Raises:
        ConfigError: Neither a preset nor a readable config file.
    """
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]
    if os.path.isfile(name_or_path):
        return load_config_file(name_or_path)
    raise ConfigError(
        f"{name_or_path!r} is neither a preset {get_preset_names()} nor a config file"
    )
