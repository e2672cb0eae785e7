"""Run configuration: a single JSON document, strictly validated.

Unknown keys are rejected everywhere (typo protection) and every error
names the offending field. This module stays importable without numpy so
the CLI can pin thread counts before any numerical code loads.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ConfigError

LAYER_FIELDS = {
    "conv": {"required": ("out_channels", "kernel"), "optional": ("stride", "pad")},
    "rpc_conv": {"required": ("out_channels", "kernel"),
                 "optional": ("stride", "pad", "rotate_fraction")},
    "frpc_conv": {"required": ("out_channels", "kernel"),
                  "optional": ("stride", "pad", "rotate_fraction", "flip_fraction")},
    "maxpool": {"required": ("window",), "optional": ("stride",)},
    "relu": {"required": (), "optional": ()},
    "prelu": {"required": (), "optional": ()},
    "flatten": {"required": (), "optional": ()},
    "fc": {"required": ("out_features",), "optional": ()},
    "dropout": {"required": (), "optional": ("p", "mode")},
}


def _require(cond, message):
    if not cond:
        raise ConfigError(message)


def _check_keys(d: dict, allowed, where: str):
    unknown = sorted(set(d) - set(allowed))
    _require(not unknown, f"unknown key(s) {unknown} in {where}; "
                          f"allowed: {sorted(allowed)}")


def _pos_int(d, key, where, default=None, minimum=1):
    v = d.get(key, default)
    _require(v is not None, f"{where}.{key} is required")
    _require(isinstance(v, int) and not isinstance(v, bool) and v >= minimum,
             f"{where}.{key} must be an integer >= {minimum}, got {v!r}")
    return v


def _fraction(d, key, where, default):
    v = d.get(key, default)
    _require(isinstance(v, (int, float)) and not isinstance(v, bool)
             and 0.0 <= v <= 1.0,
             f"{where}.{key} must be within [0, 1], got {v!r}")
    return float(v)


def validate_layer(desc: dict, where: str) -> dict:
    _require(isinstance(desc, dict), f"{where} must be an object, got {desc!r}")
    kind = desc.get("kind")
    _require(kind in LAYER_FIELDS,
             f"{where}.kind must be one of {sorted(LAYER_FIELDS)}, got {kind!r}")
    fields = LAYER_FIELDS[kind]
    _check_keys(desc, ("kind",) + fields["required"] + fields["optional"], where)
    for key in fields["required"]:
        _require(key in desc, f"{where}.{key} is required for kind {kind!r}")

    if kind in ("conv", "rpc_conv", "frpc_conv"):
        _pos_int(desc, "out_channels", where)
        k = _pos_int(desc, "kernel", where)
        _require(k % 2 == 1, f"{where}.kernel must be odd, got {k}")
        _pos_int(desc, "stride", where, default=1)
        _pos_int(desc, "pad", where, default=0, minimum=0)
        rot = _fraction(desc, "rotate_fraction", where,
                        {"conv": 0.0, "rpc_conv": 0.5, "frpc_conv": 0.25}[kind])
        flip = _fraction(desc, "flip_fraction", where,
                         0.25 if kind == "frpc_conv" else 0.0)
        _require(rot + flip <= 1.0,
                 f"{where}: rotate_fraction + flip_fraction must not exceed 1, "
                 f"got {rot} + {flip}")
    elif kind == "maxpool":
        win = _pos_int(desc, "window", where)
        _pos_int(desc, "stride", where, default=win)
    elif kind == "fc":
        _pos_int(desc, "out_features", where)
    elif kind == "dropout":
        p = desc.get("p", 0.5)
        _require(isinstance(p, (int, float)) and 0.0 < p < 1.0,
                 f"{where}.p must be within (0, 1), got {p!r}")
        mode = desc.get("mode", "standard")
        _require(mode in ("standard", "split"),
                 f"{where}.mode must be 'standard' or 'split', got {mode!r}")
        _require(mode != "split" or float(p) == 0.5,
                 f"{where}: split mode requires p = 0.5, got {p}")
    return desc


def validate_dataset(d: dict, where: str) -> dict:
    _require(isinstance(d, dict), f"{where} must be an object")
    kind = d.get("kind")
    if kind == "idx":
        _check_keys(d, ("kind", "images", "labels"), where)
        for key in ("images", "labels"):
            _require(isinstance(d.get(key), str) and d[key],
                     f"{where}.{key} must be a file path")
    elif kind == "synthetic_shapes":
        _check_keys(d, ("kind", "n_per_class", "seed"), where)
        _pos_int(d, "n_per_class", where)
        _pos_int(d, "seed", where, minimum=0)
    else:
        raise ConfigError(f"{where}.kind must be 'idx' or 'synthetic_shapes', "
                          f"got {kind!r}")
    return d


@dataclass
class RunConfig:
    seed: int
    input_shape: tuple
    layers: list
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 0.2
    momentum: float = 0.9
    schedule: dict = field(default_factory=lambda: {"kind": "plateau",
                                                    "factor": 0.1, "patience": 2})
    dataset: dict = None
    val_dataset: dict = None
    output_dir: str = None


def parse_config(doc: dict) -> RunConfig:
    _require(isinstance(doc, dict), "config root must be a JSON object")
    _check_keys(doc, ("seed", "epochs", "batch_size", "learning_rate", "momentum",
                      "schedule", "network", "dataset", "val_dataset",
                      "output_dir"), "config")
    seed = _pos_int(doc, "seed", "config", minimum=0)

    net = doc.get("network")
    _require(isinstance(net, dict), "config.network is required")
    _check_keys(net, ("input_shape", "layers"), "config.network")
    shape = net.get("input_shape")
    _require(isinstance(shape, list) and len(shape) == 3
             and all(isinstance(v, int) and v >= 1 for v in shape),
             f"config.network.input_shape must be [channels, height, width], "
             f"got {shape!r}")
    layer_list = net.get("layers")
    _require(isinstance(layer_list, list) and layer_list,
             "config.network.layers must be a non-empty list")
    layers = [validate_layer(desc, f"config.network.layers[{i}]")
              for i, desc in enumerate(layer_list)]

    lr = doc.get("learning_rate", 0.2)
    _require(isinstance(lr, (int, float)) and lr > 0,
             f"config.learning_rate must be positive, got {lr!r}")
    momentum = doc.get("momentum", 0.9)
    _require(isinstance(momentum, (int, float)) and 0.0 <= momentum < 1.0,
             f"config.momentum must be within [0, 1), got {momentum!r}")

    schedule = doc.get("schedule", {"kind": "plateau", "factor": 0.1, "patience": 2})
    _require(isinstance(schedule, dict), "config.schedule must be an object")
    _check_keys(schedule, ("kind", "factor", "patience"), "config.schedule")
    _require(schedule.get("kind", "plateau") in ("fixed", "plateau"),
             f"config.schedule.kind must be 'fixed' or 'plateau', "
             f"got {schedule.get('kind')!r}")

    dataset = doc.get("dataset")
    if dataset is not None:
        dataset = validate_dataset(dataset, "config.dataset")
    val_dataset = doc.get("val_dataset")
    if val_dataset is not None:
        val_dataset = validate_dataset(val_dataset, "config.val_dataset")

    output_dir = doc.get("output_dir")
    _require(output_dir is None or (isinstance(output_dir, str) and output_dir),
             f"config.output_dir must be a non-empty path, got {output_dir!r}")

    return RunConfig(seed=seed, input_shape=tuple(shape), layers=layers,
                     epochs=_pos_int(doc, "epochs", "config", default=10),
                     batch_size=_pos_int(doc, "batch_size", "config", default=128),
                     learning_rate=float(lr), momentum=float(momentum),
                     schedule=schedule, dataset=dataset, val_dataset=val_dataset,
                     output_dir=output_dir)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    return parse_config(doc)
