import json

import pytest

from last.config import RunConfig
from last.errors import ConfigurationError
from last.side_tuning.backbone import BackboneConfig


def test_empty_document_is_valid():
    config = RunConfig.from_dict({})
    assert config.backbone.preset == "toy"
    assert config.train.lr == 1e-3
    assert config.memory.taps == 6


def test_round_trip():
    config = RunConfig.from_dict({"side": {"rank": 8, "n_head": 2}, "sweep": {"gaps": [1, 4]}})
    assert RunConfig.from_dict(config.to_dict()) == config


def test_unknown_section_and_key():
    with pytest.raises(ConfigurationError, match="Unknown config section optimizer"):
        RunConfig.from_dict({"optimizer": {}})
    with pytest.raises(ConfigurationError, match="Unknown key momentum in config section train"):
        RunConfig.from_dict({"train": {"momentum": 0.9}})


@pytest.mark.parametrize(
    "document",
    [
        {"backbone": {"preset": "resnet"}},
        {"train": {"batch_size": 0}},
        {"cache": {"gap": 0}},
        {"sweep": {"gaps": []}},
        {"memory": {"taps": 0}},
        {"side": []},
    ],
)
def test_invalid_values(document):
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict(document)


def test_from_json(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"backbone": {"preset": "vit_b", "depth": 24}}))
    config = RunConfig.from_json(str(path))
    built = config.backbone.build()
    assert (built.depth, built.width) == (24, 768)
    path.write_text("{not json")
    with pytest.raises(ConfigurationError, match="not valid JSON"):
        RunConfig.from_json(str(path))


def test_side_config_takes_classes_from_data():
    config = RunConfig.from_dict({"side": {"rank": 8, "n_head": 2}})
    side = config.side_config(BackboneConfig.preset("toy"), num_classes=7)
    assert side.num_classes == 7
    assert side.width == 32
    with pytest.raises(ConfigurationError, match="num_classes"):
        config.side_config(BackboneConfig.preset("toy"))


def test_side_validation_happens_on_build():
    config = RunConfig.from_dict({"side": {"rank": 32}})
    with pytest.raises(ConfigurationError, match="smaller than width"):
        config.side_config(BackboneConfig.preset("toy"), num_classes=4)


def test_sweep_grid():
    config = RunConfig.from_dict(
        {"side": {"rank": 8, "n_head": 2}, "sweep": {"gaps": [1, 2, 4], "stacks": [1, 2], "ranks": [4, 8]}}
    )
    configs = config.sweep_configs(BackboneConfig.preset("toy"), num_classes=4)
    assert len(configs) == 12
    assert {(c.gap, c.stack, c.rank) for c in configs} == {
        (g, t, r) for g in (1, 2, 4) for t in (1, 2) for r in (4, 8)
    }


@pytest.mark.parametrize(
    "document, key",
    [
        ({"backbone": {"seed": "x"}}, "backbone.seed"),
        ({"train": {"seed": 1.5}}, "train.seed"),
        ({"train": {"epochs": True}}, "train.epochs"),
        ({"side": {"bias_correction": 1}}, "side.bias_correction"),
        ({"cache": {"path": 3}}, "cache.path"),
        ({"sweep": {"gaps": None}}, "sweep.gaps"),
    ],
)
def test_value_types_are_checked_on_load(document, key):
    with pytest.raises(ConfigurationError, match=key):
        RunConfig.from_dict(document)


def test_numbers_and_unset_fields_are_accepted():
    config = RunConfig.from_dict({"train": {"lr": 1}, "side": {"ffn_hidden": None}, "backbone": {"depth": 8}})
    assert config.train.lr == 1
    assert config.side.ffn_hidden is None
