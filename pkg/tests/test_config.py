"""Strict config validation: every error names the offending field."""

import json

import pytest

from spinconv import config as cfg
from spinconv.errors import ConfigError


def _doc(**overrides):
    doc = {
        "seed": 7,
        "network": {
            "input_shape": [1, 8, 8],
            "layers": [
                {"kind": "conv", "out_channels": 4, "kernel": 3, "pad": 1},
                {"kind": "relu"},
                {"kind": "flatten"},
                {"kind": "fc", "out_features": 4},
            ],
        },
    }
    doc.update(overrides)
    return doc


def test_minimal_config_gets_pinned_defaults():
    rc = cfg.parse_config(_doc())
    assert rc.seed == 7
    assert rc.input_shape == (1, 8, 8)
    assert rc.epochs == 10
    assert rc.batch_size == 128
    assert rc.learning_rate == 0.2
    assert rc.momentum == 0.9
    assert rc.schedule["kind"] == "plateau"
    assert rc.dataset is None and rc.output_dir is None


def test_seed_is_mandatory():
    doc = _doc()
    del doc["seed"]
    with pytest.raises(ConfigError, match="seed"):
        cfg.parse_config(doc)


def test_boolean_is_not_an_integer():
    with pytest.raises(ConfigError, match="seed"):
        cfg.parse_config(_doc(seed=True))


def test_unknown_root_key_is_named():
    with pytest.raises(ConfigError, match="learning_rato"):
        cfg.parse_config(_doc(learning_rato=0.1))


def test_rotate_fraction_out_of_range_names_field():
    doc = _doc()
    doc["network"]["layers"][0] = {"kind": "rpc_conv", "out_channels": 4,
                                   "kernel": 3, "rotate_fraction": 1.2}
    with pytest.raises(ConfigError, match="rotate_fraction"):
        cfg.parse_config(doc)


def test_fraction_sum_capped_at_one():
    doc = _doc()
    doc["network"]["layers"][0] = {"kind": "frpc_conv", "out_channels": 4,
                                   "kernel": 3, "rotate_fraction": 0.6,
                                   "flip_fraction": 0.6}
    with pytest.raises(ConfigError, match="rotate_fraction \\+ flip_fraction"):
        cfg.parse_config(doc)


def test_layer_typo_is_caught():
    doc = _doc()
    doc["network"]["layers"][0] = {"kind": "conv", "out_channels": 4,
                                   "kernel_size": 3}
    with pytest.raises(ConfigError, match="kernel_size"):
        cfg.parse_config(doc)


def test_even_kernel_is_rejected():
    doc = _doc()
    doc["network"]["layers"][0]["kernel"] = 4
    with pytest.raises(ConfigError, match="odd"):
        cfg.parse_config(doc)


def test_unknown_layer_kind():
    doc = _doc()
    doc["network"]["layers"][1] = {"kind": "sigmoid"}
    with pytest.raises(ConfigError, match="sigmoid"):
        cfg.parse_config(doc)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.2])
def test_dropout_probability_bounds(p):
    with pytest.raises(ConfigError, match="\\.p "):
        cfg.validate_layer({"kind": "dropout", "p": p}, "layers[0]")


def test_split_mode_forces_half():
    with pytest.raises(ConfigError, match="split"):
        cfg.validate_layer({"kind": "dropout", "p": 0.3, "mode": "split"},
                           "layers[0]")
    ok = cfg.validate_layer({"kind": "dropout", "p": 0.5, "mode": "split"},
                            "layers[0]")
    assert ok["mode"] == "split"


def test_bad_dropout_mode():
    with pytest.raises(ConfigError, match="mode"):
        cfg.validate_layer({"kind": "dropout", "mode": "both"}, "layers[0]")


def test_input_shape_must_be_three_dims():
    doc = _doc()
    doc["network"]["input_shape"] = [28, 28]
    with pytest.raises(ConfigError, match="input_shape"):
        cfg.parse_config(doc)


def test_layers_must_be_non_empty():
    doc = _doc()
    doc["network"]["layers"] = []
    with pytest.raises(ConfigError, match="layers"):
        cfg.parse_config(doc)


def test_momentum_range():
    with pytest.raises(ConfigError, match="momentum"):
        cfg.parse_config(_doc(momentum=1.0))


def test_schedule_kind_checked():
    with pytest.raises(ConfigError, match="schedule"):
        cfg.parse_config(_doc(schedule={"kind": "warmup"}))


def test_dataset_idx_requires_paths():
    with pytest.raises(ConfigError, match="images"):
        cfg.parse_config(_doc(dataset={"kind": "idx", "labels": "l.idx"}))
    rc = cfg.parse_config(_doc(dataset={"kind": "idx", "images": "i.idx",
                                        "labels": "l.idx"}))
    assert rc.dataset["kind"] == "idx"


def test_dataset_synthetic_fields():
    rc = cfg.parse_config(_doc(dataset={"kind": "synthetic_shapes",
                                        "n_per_class": 10, "seed": 0}))
    assert rc.dataset["n_per_class"] == 10
    with pytest.raises(ConfigError, match="n_per_class"):
        cfg.parse_config(_doc(dataset={"kind": "synthetic_shapes", "seed": 0}))


def test_dataset_unknown_kind():
    with pytest.raises(ConfigError, match="kind"):
        cfg.parse_config(_doc(dataset={"kind": "imagenet"}))


def test_load_config_rejects_broken_json(tmp_path):
    path = tmp_path / "run.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        cfg.load_config(str(path))


def test_load_config_round_trip(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(_doc(epochs=2, output_dir="out")))
    rc = cfg.load_config(str(path))
    assert rc.epochs == 2
    assert rc.output_dir == "out"
