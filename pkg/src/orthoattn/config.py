"""JSON experiment configs: schema, validation, and object construction.

One integer, ``train.seed``, drives every random choice: the synthetic data
(``derive_seed(seed, STREAM_DATA)``), the train/val split, weight and bank
initialization, batch order and augmentation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema

from .backbone import PRESETS, AttentionConfig, NetworkSpec, preset
from .data import Dataset, load_idx, make_synthetic
from .filterbank import KINDS
from .tensor import STREAM_DATA, derive_seed
from .train import FILTER_ALIASES, FILTER_MODES, SCHEDULES, TrainConfig

SCHEMA_VERSION = 1

_train_props = {
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "weight_decay": {"type": "number", "minimum": 0},
    "batch_size": {"type": "integer", "minimum": 1},
    "epochs": {"type": "integer", "minimum": 1},
    "label_smoothing": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "schedule": {"enum": list(SCHEDULES)},
    "restart_period": {"type": "integer", "minimum": 1},
    "restart_decay": {"type": "number", "exclusiveMinimum": 0},
    "filter_learning": {"enum": list(FILTER_MODES) + list(FILTER_ALIASES)},
    "filter_epochs": {"type": "integer", "minimum": 0},
    "filter_lr_mult": {"type": "number", "minimum": 0},
    "reorthonormalize": {"type": "boolean"},
    "augment": {"type": "boolean"},
    "eval_batch_size": {"type": "integer", "minimum": 1},
    "seed": {"type": "integer", "minimum": 0},
}

_attention_props = {
    "kind": {"enum": list(KINDS)},
    "reduction": {"type": "integer", "minimum": 1},
    "group_size": {"type": "integer", "minimum": 1},
    "seed": {"type": ["integer", "null"], "minimum": 0},
    "filters_learnable": {"type": "boolean"},
    "mod_before_activation": {"type": "boolean"},
    "dct_normalize": {"type": "boolean"},
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "orthoattn experiment config",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "network", "data"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "network": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"enum": list(PRESETS)},
                "placement": {"enum": ["none", "standard", "mod"]},
                "spec": {"type": "object"},
            },
            "oneOf": [{"required": ["preset"]}, {"required": ["spec"]}],
        },
        "attention": {"type": "object", "additionalProperties": False, "properties": _attention_props},
        "train": {"type": "object", "additionalProperties": False, "properties": _train_props},
        "data": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"const": "synthetic"},
                        "classes": {"type": "integer", "minimum": 2},
                        "n_per_class": {"type": "integer", "minimum": 1},
                        "h": {"type": "integer", "minimum": 1},
                        "w": {"type": "integer", "minimum": 1},
                        "noise": {"type": "number", "minimum": 0},
                        "val_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                    },
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind", "images", "labels"],
                    "properties": {
                        "kind": {"const": "idx"},
                        "images": {"type": "string"},
                        "labels": {"type": "string"},
                        "val_images": {"type": "string"},
                        "val_labels": {"type": "string"},
                        "classes": {"type": "integer", "minimum": 1},
                        "val_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                    },
                },
            ]
        },
        "compare": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kinds": {"type": "array", "items": {"enum": list(KINDS)}, "minItems": 1},
                "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}},
        },
    },
}

SYNTHETIC_DEFAULTS = {"classes": 3, "n_per_class": 300, "h": 32, "w": 32, "noise": 0.1, "val_fraction": 0.25}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    network: NetworkSpec
    train: TrainConfig
    data: dict
    compare: dict = field(default_factory=dict)
    output_dir: str = "runs/default"
    base_dir: Path = Path(".")
    raw: dict = field(default_factory=dict, repr=False)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = json.loads(json.dumps(self.raw))
        raw.setdefault("train", {})["seed"] = seed
        return parse_config(raw, self.base_dir)


def validate_config(raw: dict) -> None:
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None


def parse_config(raw: dict, base_dir: str | Path = ".") -> ExperimentConfig:
    validate_config(raw)
    base_dir = Path(base_dir)
    data = dict(raw["data"])
    if data["kind"] == "synthetic":
        data = {**SYNTHETIC_DEFAULTS, **data}
    try:
        tcfg = TrainConfig.from_dict(raw.get("train", {}))
        att = AttentionConfig(**raw.get("attention", {}))
        net = raw["network"]
        classes = data.get("classes", 10)
        if "preset" in net:
            spec = preset(net["preset"], attention=net.get("placement", "standard"), classes=classes)
            spec = replace(spec, attention=att)
        else:
            spec = NetworkSpec.from_dict({**net["spec"], "attention": {**net["spec"].get("attention", {}),
                                                                       **raw.get("attention", {})}})
        if data["kind"] == "synthetic":
            spec = replace(spec, input_hw=(data["h"], data["w"]))
        spec.validate()
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"config invalid: {exc}") from None
    return ExperimentConfig(spec, tcfg, data, raw.get("compare", {}),
                            raw.get("output", {}).get("dir", "runs/default"), base_dir, raw)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return parse_config(raw, path.parent)


def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    seed = cfg.train.seed
    if d["kind"] == "synthetic":
        full = make_synthetic(derive_seed(seed, STREAM_DATA), d["classes"], d["n_per_class"], d["h"], d["w"], d["noise"])
        return full.split(d["val_fraction"], seed)
    resolve = lambda p: p if Path(p).is_absolute() else cfg.base_dir / p  # noqa: E731
    train = load_idx(resolve(d["images"]), resolve(d["labels"]), d.get("classes"))
    if "val_images" in d:
        val = load_idx(resolve(d["val_images"]), resolve(d["val_labels"]), train.class_count)
        return train, val
    return train.split(d.get("val_fraction", 0.2), seed)


def dump_schema() -> str:
    return json.dumps(CONFIG_SCHEMA, indent=2)


def example_config(preset_name: str = "tiny34", kind: str = "ortho", epochs: int = 30) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "network": {"preset": preset_name, "placement": "standard"},
        "attention": {"kind": kind, "reduction": 16},
        "train": {"lr": 0.05, "epochs": epochs, "batch_size": 32, "seed": 0},
        "data": {"kind": "synthetic", "classes": 3, "n_per_class": 300},
        "compare": {"kinds": ["gap", "random", "ortho"], "seeds": [0, 1, 2]},
        "output": {"dir": f"runs/{preset_name}-{kind}"},
    }


