"""
Tests for the analytic memory model, checked against the autodiff tape where
the strategy is implemented.
"""
import numpy as np
import pytest

import last.tensor.functional as F
from last.errors import ConfigurationError
from last.memory import STRATEGIES, StrategyModel, compare, estimate, estimate_all
from last.memory.strategies.bias_only import bias_count
from last.memory.strategies.common import head_params
from last.side_tuning.backbone import BackboneConfig, init_synthetic
from last.side_tuning.baselines import FinetuneModel, full_finetune, linear_probe
from last.side_tuning.side_network import SideConfig, classify, init_head, init_side, side_forward
from last.side_tuning.training import TrainRun, train
from last.tensor import Tensor, backward


@pytest.fixture
def vit_b():
    return BackboneConfig.preset("vit_b")


def _activations(arch, strategy, batch_size=1, **values):
    return estimate(arch, StrategyModel(strategy=strategy, **values), batch_size=batch_size).activation_elements_cached


@pytest.mark.parametrize(
    "values",
    [
        dict(gap=2, stack=2, rank=8, n_head=2),
        dict(gap=1, stack=1, rank=4, n_head=4, skip_block_zero=True),
        dict(gap=2, stack=1, rank=8, n_head=2, mode="both", ffn_hidden=16),
        dict(gap=4, stack=2, rank=8, n_head=1, mode="ffn", ffn_hidden=64, bias_correction=False),
    ],
)
def test_side_network_tape_matches_model(cache, toy_config, values):
    config = SideConfig.for_backbone(toy_config, num_classes=4, **values)
    run = train(TrainRun(config, epochs=1, batch_size=8), cache=cache)
    predicted = _activations(toy_config, "last", batch_size=8, num_classes=4, side=config)
    assert run.run_info["retained_elements"] == predicted


def test_full_finetune_tape_matches_model(dataset, backbone, toy_config):
    run = full_finetune(dataset, backbone, epochs=1, batch_size=4)
    assert run.run_info["retained_elements"] == _activations(toy_config, "full", batch_size=4, num_classes=4)
    assert run.trainable_params == estimate(toy_config, StrategyModel("full", num_classes=4)).trainable_param_count


def test_bias_only_tape_matches_model(dataset, backbone, toy_config):
    weights = backbone.weights.trainable_copy()
    for param in weights:
        param.frozen = not (param.name.endswith(".bias") or param.name.endswith(".beta"))
    model = FinetuneModel(weights, init_head(toy_config.width, 4, seed=0))
    tape = backward(F.cross_entropy(model.logits(Tensor(dataset.images[:2])), dataset.labels[:2]))
    assert tape.retained_elements == _activations(toy_config, "bias_only", batch_size=2, num_classes=4)
    trainable = sum(p.size for p in model.parameters() if p.requires_grad)
    assert trainable == estimate(toy_config, StrategyModel("bias_only", num_classes=4)).trainable_param_count


def test_linear_probe_tape_matches_model(cache, toy_config):
    run = linear_probe(4, cache=cache, epochs=1, batch_size=8)
    assert run.run_info["retained_elements"] == _activations(toy_config, "linear_probe", batch_size=8, num_classes=4)
    assert run.trainable_params == head_params(toy_config.width, 4)


def test_vit_b_trainable_counts(vit_b):
    head = head_params(768, 100)
    assert bias_count(vit_b) == 102144
    assert estimate(vit_b, "entangled_lowrank").trainable_param_count - head == 294912
    assert estimate(vit_b, "ladder_side").trainable_param_count - head == 2376288
    skip = SideConfig.recommended(vit_b, skip_block_zero=True)
    assert estimate(vit_b, StrategyModel(side=skip)).trainable_param_count - head == 618048
    assert estimate(vit_b, "full").trainable_param_count == 85797120 + head


def test_activation_ordering_on_vit_b(vit_b):
    per_sample = {name: _activations(vit_b, name) for name in STRATEGIES}
    assert per_sample["full"] > per_sample["entangled_lowrank"] > per_sample["ladder_side"] > per_sample["last"]
    assert per_sample["last"] < per_sample["bias_only"]
    assert per_sample["last"] < per_sample["prompt"]
    assert per_sample["linear_probe"] == min(per_sample.values())


def test_total_ordering_on_vit_b(vit_b):
    reports = {report.strategy: report for report in estimate_all(vit_b, batch_size=32)}
    assert reports["full"].total_bytes > reports["entangled_lowrank"].total_bytes
    assert reports["entangled_lowrank"].total_bytes > reports["ladder_side"].total_bytes
    assert reports["ladder_side"].total_bytes > reports["last"].total_bytes


def test_batch_linearity(vit_b):
    for name in STRATEGIES:
        one = estimate(vit_b, name, batch_size=1)
        many = estimate(vit_b, name, batch_size=16)
        assert many.activation_elements_cached == 16 * one.activation_elements_cached
        assert many.input_elements == 16 * one.input_elements
        assert many.trainable_param_count == one.trainable_param_count


def test_side_activations_do_not_grow_with_depth():
    counts = list()
    for depth in (12, 24, 48):
        arch = BackboneConfig.preset("vit_b", depth=depth)
        side = SideConfig.for_backbone(arch, gap=depth // 6, stack=2, rank=16, n_head=4, num_classes=100)
        counts.append(_activations(arch, "last", side=side))
    assert counts[0] == counts[1] == counts[2]
    full = [_activations(BackboneConfig.preset("vit_b", depth=depth), "full") for depth in (12, 24)]
    assert full[1] > full[0]


def _side_step_tape(depth, gap, batch=2):
    config = SideConfig(width=32, depth=depth, gap=gap, stack=2, rank=8, n_head=2, num_classes=4)
    state = init_side(config, seed=0)
    rng = np.random.default_rng(depth)
    taps = [Tensor(rng.standard_normal((batch, 17, 32))) for _ in range(config.tap_count)]
    labels = np.arange(batch) % 4
    return backward(F.cross_entropy(classify(side_forward(taps, state), state.head), labels))


def _full_step_tape(arch, images, labels):
    model = FinetuneModel(init_synthetic(arch, seed=0).trainable_copy(), init_head(arch.width, 4, seed=0))
    return backward(F.cross_entropy(model.logits(Tensor(images)), labels))


def test_side_step_tape_does_not_grow_with_depth(dataset, toy_config):
    shallow = _side_step_tape(depth=4, gap=2)
    deep = _side_step_tape(depth=8, gap=4)
    assert shallow.retained_elements == deep.retained_elements
    assert shallow.retained_count == deep.retained_count
    images, labels = dataset.images[:2], dataset.labels[:2]
    full_shallow = _full_step_tape(toy_config, images, labels)
    full_deep = _full_step_tape(BackboneConfig.preset("toy", depth=8), images, labels)
    assert shallow.retained_elements < full_shallow.retained_elements < full_deep.retained_elements


def test_footprint_totals(vit_b):
    report = estimate(vit_b, "last", batch_size=8)
    assert report.gradient_elements == report.trainable_param_count
    assert report.optimizer_state_elements == 2 * report.trainable_param_count
    assert report.frozen_param_count == 0
    assert report.total_elements == (
        report.trainable_param_count * 4 + report.activation_elements_cached + report.input_elements
    )
    assert report.total_bytes == 4 * report.total_elements
    assert report.to_dict()["total_bytes"] == report.total_bytes


def test_live_side_network_holds_the_backbone(vit_b):
    cached = estimate(vit_b, StrategyModel("last"))
    live = estimate(vit_b, StrategyModel("last", live=True))
    assert live.frozen_param_count == vit_b.param_count
    assert live.input_elements == cached.input_elements + 3 * 224 * 224
    assert live.activation_elements_cached == cached.activation_elements_cached


def test_compare_ranks_by_total_bytes(vit_b):
    table = compare(estimate_all(vit_b, batch_size=8))
    assert list(table["total_bytes"]) == sorted(table["total_bytes"], reverse=True)
    full = table[table["strategy"] == "full"].iloc[0]
    assert full["total_ratio"] == 1.0
    assert np.all(table["activation_ratio"] <= 1.0)
    alone = compare([estimate(vit_b, "last")])
    assert alone["total_ratio"].iloc[0] == 1.0


def test_dtype_bytes_scale_bytes_only(vit_b):
    fp32 = estimate(vit_b, "last", dtype_bytes=4)
    fp16 = estimate(vit_b, "last", dtype_bytes=2)
    assert fp32.total_elements == fp16.total_elements
    assert fp32.total_bytes == 2 * fp16.total_bytes


def test_invalid_requests(vit_b):
    with pytest.raises(ConfigurationError, match="Unrecognised strategy"):
        StrategyModel("adapters")
    with pytest.raises(ConfigurationError):
        estimate(vit_b, "full", batch_size=0)
    with pytest.raises(ConfigurationError):
        estimate(vit_b, StrategyModel("entangled_lowrank", lora_rank=0))
    with pytest.raises(ConfigurationError):
        estimate(vit_b, StrategyModel("ladder_side", reduction=5))
    toy_side = SideConfig.for_backbone(BackboneConfig.preset("toy"))
    with pytest.raises(ConfigurationError):
        estimate(vit_b, StrategyModel("last", side=toy_side))
    with pytest.raises(ConfigurationError):
        compare([])
