"""Declarative run configuration.

A run config is a YAML tree with sections data/backbone/adapter/fusion/
decoder/train plus run_name and output_dir. Per-dataset defaults are
applied first (keyed on data.name), then file values, then any
``--set section.field=value`` overrides. Unknown keys or ill-typed values
abort before any work starts.
"""

import copy
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import yaml

from .adapter import AdapterConfig
from .backbone import BackboneConfig
from .data import DatasetConfig
from .decoder import DecoderConfig
from .errors import ConfigError
from .fusion import FusionConfig
from .trainer import TrainConfig

SECTION_TYPES = {
    "data": DatasetConfig,
    "backbone": BackboneConfig,
    "adapter": AdapterConfig,
    "fusion": FusionConfig,
    "decoder": DecoderConfig,
    "train": TrainConfig,
}

# Dataset-bound defaults. iu_xray / mimic_cxr follow the published
# hyperparameters (report lengths 60/78, frequency thresholds 3/10,
# 3/6-layer fusion transformer and decoder, lr 1e-5, weight decays
# 5e-5/4e-5, dropout 0.09/0.1, batch 16); synthetic is the desk-scale
# preset used by the bundled corpus and the test suite.
PRESETS = {
    "synthetic": {
        "data": {"max_length": 24, "min_frequency": 3},
        "backbone": {"in_channels": 1, "image_size": 64, "channels": (8, 16, 32),
                     "dim": 32, "global_dim": 32, "num_tokens": 23},
        "adapter": {"adapter_dim": 32, "num_heads": 4},
        "fusion": {"channels": 32, "vit_depth": 2, "token_dim": 64},
        "decoder": {"num_layers": 2, "model_dim": 64, "num_heads": 4, "max_length": 24},
        "train": {"learning_rate": 1e-3, "weight_decay": 0.0, "dropout": 0.1,
                  "batch_size": 16, "epochs": 20},
    },
    "iu_xray": {
        "data": {"max_length": 60, "min_frequency": 3},
        "backbone": {"in_channels": 3, "image_size": 224, "channels": (256, 512, 1024),
                     "dim": 512, "global_dim": 512, "num_tokens": 59, "text_heads": 8},
        "adapter": {"adapter_dim": 64, "num_heads": 4},
        "fusion": {"channels": 256, "vit_depth": 3, "token_dim": 512, "num_heads": 8},
        "decoder": {"num_layers": 3, "model_dim": 512, "num_heads": 8, "max_length": 60},
        "train": {"learning_rate": 1e-5, "weight_decay": 5e-5, "dropout": 0.09,
                  "batch_size": 16, "epochs": 50},
    },
    "mimic_cxr": {
        "data": {"max_length": 78, "min_frequency": 10},
        "backbone": {"in_channels": 3, "image_size": 224, "channels": (256, 512, 1024),
                     "dim": 512, "global_dim": 512, "num_tokens": 77, "text_heads": 8},
        "adapter": {"adapter_dim": 64, "num_heads": 4},
        "fusion": {"channels": 256, "vit_depth": 6, "token_dim": 512, "num_heads": 8},
        "decoder": {"num_layers": 6, "model_dim": 512, "num_heads": 8, "max_length": 78},
        "train": {"learning_rate": 1e-5, "weight_decay": 4e-5, "dropout": 0.1,
                  "batch_size": 16, "epochs": 30},
    },
}


@dataclass
class RunConfig:
    run_name: str = "run"
    output_dir: str = "runs"
    data: DatasetConfig = field(default_factory=DatasetConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def run_dir(self):
        return Path(self.output_dir) / self.run_name

    def validate(self):
        self.data.validate()
        self.backbone.validate()
        self.adapter.validate()
        self.fusion.validate()
        self.decoder.validate()
        self.train.validate()
        if self.decoder.max_length != self.data.max_length:
            raise ConfigError(
                f"decoder.max_length {self.decoder.max_length} must equal "
                f"data.max_length {self.data.max_length}"
            )
        if self.backbone.num_tokens != self.data.max_length - 1:
            raise ConfigError(
                f"backbone.num_tokens {self.backbone.num_tokens} must equal "
                f"data.max_length - 1 = {self.data.max_length - 1}"
            )
        return self

    def to_dict(self):
        tree = {"run_name": self.run_name, "output_dir": self.output_dir}
        for name in SECTION_TYPES:
            section = asdict(getattr(self, name))
            if "channels" in section and isinstance(section["channels"], tuple):
                section["channels"] = list(section["channels"])
            tree[name] = section
        return tree


_SCALAR_ANNOTATIONS = {
    int: int, float: float, bool: bool, str: str, tuple: tuple, list: list,
    "int": int, "float": float, "bool": bool, "str": str, "tuple": tuple, "list": list,
}


def _coerce(value, annotation, path):
    if annotation in (int,):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {value!r}")
        return value
    if annotation in (float,):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}")
        return float(value)
    if annotation in (bool,):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {value!r}")
        return value
    if annotation in (str,):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {value!r}")
        return value
    if annotation is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected list, got {value!r}")
        return tuple(value)
    if annotation is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected list, got {value!r}")
        return value
    return value  # optional / union fields are validated downstream


def _build_section(cls, values, section_name):
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section_name}: {sorted(unknown)}")
    coerced = {}
    for key, value in values.items():
        anno = _SCALAR_ANNOTATIONS.get(known[key].type)
        coerced[key] = _coerce(value, anno, f"{section_name}.{key}") if anno else value
    return cls(**coerced)


def merge_config_tree(tree, overrides=None):
    """Presets <- file values <- overrides, then strict construction."""
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a mapping")
    tree = copy.deepcopy(tree)
    for key, value in (overrides or {}).items():
        parts = key.split(".")
        node = tree
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} does not address a config section")
        node[parts[-1]] = value

    top_unknown = set(tree) - set(SECTION_TYPES) - {"run_name", "output_dir"}
    if top_unknown:
        raise ConfigError(f"unknown top-level config key(s): {sorted(top_unknown)}")

    dataset_name = (tree.get("data") or {}).get("name", "synthetic")
    preset = PRESETS.get(dataset_name)
    if preset is None:
        raise ConfigError(f"data.name must be one of {sorted(PRESETS)}, got {dataset_name!r}")

    merged = {}
    for section, cls in SECTION_TYPES.items():
        section_values = dict(preset.get(section, {}))
        file_values = tree.get(section) or {}
        if not isinstance(file_values, dict):
            raise ConfigError(f"config section {section!r} must be a mapping")
        section_values.update(file_values)
        merged[section] = _build_section(cls, section_values, section)

    run_name = tree.get("run_name", "run")
    output_dir = tree.get("output_dir", "runs")
    if not isinstance(run_name, str) or not isinstance(output_dir, str):
        raise ConfigError("run_name and output_dir must be strings")
    return RunConfig(run_name=run_name, output_dir=output_dir, **merged).validate()


def parse_override(text):
    """'section.field=value' -> (key, parsed value); values parse as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.field=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        value = raw
    return key.strip(), value


def load_run_config(path, overrides=None):
    try:
        with open(path, encoding="utf-8") as fh:
            tree = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    parsed = {}
    for item in overrides or []:
        key, value = parse_override(item) if isinstance(item, str) else item
        parsed[key] = value
    return merge_config_tree(tree, parsed)
