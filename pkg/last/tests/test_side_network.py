"""
Tests for the low-rank attention side-network.
"""
import numpy as np
import pytest

import last.tensor.functional as F
from last.errors import ConfigurationError, ShapeError
from last.side_tuning.backbone import BackboneConfig
from last.side_tuning.side_network import (
    SideConfig,
    classify,
    correct_bias,
    count_trainable_params,
    init_side,
    load_side,
    lsa_module,
    save_side,
    side_forward,
    side_param_count,
    value_path_rank,
)
from last.tensor import Tensor, backward
from last.tensor.functional import LAYER_NORM_EPS
from last.tensor.gradcheck import numerical_gradient


def _zero_up(state):
    for name, param in state.params.items():
        if ".attn.up." in name:
            param.data = np.zeros_like(param.data)
    return state


def test_vit_b_trainable_counts():
    # m blocks (u_0 = z_0): 618,048 side parameters; m+1 blocks (the default): 721,056
    vit_b = BackboneConfig.preset("vit_b")
    m_blocks = SideConfig.recommended(vit_b, skip_block_zero=True)
    m_plus_one = SideConfig.recommended(vit_b)
    assert side_param_count(m_blocks, include_head=False) == 618048
    assert side_param_count(m_plus_one, include_head=False) == 721056
    assert side_param_count(m_blocks) - side_param_count(m_blocks, include_head=False) == 78436


def test_closed_form_matches_initialised_state(side_config):
    for config in (side_config, SideConfig.for_backbone(BackboneConfig.preset("toy"), gap=1, stack=1, rank=4,
                                                         n_head=2, mode="both", ffn_hidden=16, skip_block_zero=True)):
        state = init_side(config, seed=0)
        assert count_trainable_params(state) == side_param_count(config)
        assert count_trainable_params(state, include_head=False) == side_param_count(config, include_head=False)


def test_giant_default_uses_wider_side():
    config = SideConfig.recommended(BackboneConfig.preset("vit_g"))
    assert (config.gap, config.stack, config.rank, config.n_head) == (4, 2, 32, 8)


def test_count_grows_with_rank_stack_and_taps():
    toy = BackboneConfig.preset("toy")
    base = SideConfig.for_backbone(toy, gap=2, stack=1, rank=8, n_head=2)
    assert side_param_count(SideConfig.for_backbone(toy, gap=2, stack=1, rank=16, n_head=2)) > side_param_count(base)
    assert side_param_count(SideConfig.for_backbone(toy, gap=2, stack=2, rank=8, n_head=2)) > side_param_count(base)
    assert side_param_count(SideConfig.for_backbone(toy, gap=1, stack=1, rank=8, n_head=2)) > side_param_count(base)


@pytest.mark.parametrize(
    "values",
    [
        dict(gap=3),
        dict(rank=6, n_head=4),
        dict(rank=32, n_head=4),
        dict(mode="both"),
        dict(mode="mlp"),
        dict(stack=0),
    ],
)
def test_invalid_configs(toy_config, values):
    with pytest.raises(ConfigurationError):
        SideConfig.for_backbone(toy_config, **values)


def test_zero_up_projection_recovers_last_tap(toy_config, random_taps):
    config = SideConfig.for_backbone(toy_config, gap=1, stack=2, rank=8, n_head=2)
    state = _zero_up(init_side(config, seed=0))
    corrected = side_forward([Tensor(t) for t in random_taps], state)
    np.testing.assert_array_equal(corrected.data, random_taps[-1])


def test_zero_up_without_correction_sums_taps(toy_config, random_taps):
    config = SideConfig.for_backbone(toy_config, gap=1, stack=1, rank=8, n_head=2, bias_correction=False)
    state = _zero_up(init_side(config, seed=0))
    out = side_forward([Tensor(t) for t in random_taps], state)
    np.testing.assert_array_equal(out.data, np.sum(random_taps, axis=0))


def test_correction_subtracts_earlier_taps(toy_config, random_taps):
    config = SideConfig.for_backbone(toy_config, gap=1, stack=1, rank=8, n_head=2)
    state = init_side(config, seed=5)
    taps = [Tensor(t) for t in random_taps]
    raw = side_forward(taps, state, bias_correction=False)
    corrected = side_forward(taps, state, bias_correction=True)
    np.testing.assert_array_equal(corrected.data, raw.data - np.sum(random_taps[:-1], axis=0))


def test_skip_block_zero_with_zero_up(toy_config, random_taps):
    config = SideConfig.for_backbone(toy_config, gap=1, stack=1, rank=8, n_head=2, skip_block_zero=True)
    state = _zero_up(init_side(config, seed=0))
    assert config.block_count == 4
    corrected = side_forward([Tensor(t) for t in random_taps], state)
    np.testing.assert_array_equal(corrected.data, random_taps[-1])


def test_value_path_rank_is_bounded_by_rank(toy_config):
    config = SideConfig.for_backbone(toy_config, gap=2, stack=1, rank=8, n_head=2)
    state = init_side(config, seed=1)
    for block in range(config.block_count):
        assert value_path_rank(state, block, 0) <= 8
    assert value_path_rank(state, 0, 0) == 8


def test_tap_count_mismatch(side_config, random_taps):
    state = init_side(side_config, seed=0)
    with pytest.raises(ConfigurationError, match="expects 3 taps, got 5"):
        side_forward([Tensor(t) for t in random_taps], state)


def test_tap_shape_mismatch(side_config, random_taps):
    state = init_side(side_config, seed=0)
    taps = [Tensor(random_taps[0]), Tensor(random_taps[1]), Tensor(random_taps[2][:, :16])]
    with pytest.raises(ShapeError):
        side_forward(taps, state)
    with pytest.raises(ShapeError):
        correct_bias(Tensor(random_taps[0]), [Tensor(np.zeros((3, 32)))])


def test_batched_forward_matches_per_sample(side_config, random_taps):
    state = init_side(side_config, seed=2)
    singles = [random_taps[0:3], random_taps[2:5]]
    batched = [Tensor(np.stack([singles[0][i], singles[1][i]])) for i in range(3)]
    out = side_forward(batched, state)
    for b in range(2):
        np.testing.assert_allclose(out.data[b], side_forward([Tensor(t) for t in singles[b]], state).data,
                                   rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("bias_correction", [True, False])
def test_side_gradients_match_finite_differences(bias_correction):
    config = SideConfig(width=8, depth=4, gap=2, stack=2, rank=4, n_head=2, num_classes=3,
                        bias_correction=bias_correction, init_std=0.3)
    state = init_side(config, seed=4)
    rng = np.random.default_rng(0)
    for param in state.parameters():
        if param.name.endswith(".bias") or param.name.endswith(".beta"):
            param.data = rng.standard_normal(param.shape) * 0.1
    taps = [Tensor(rng.standard_normal((2, 6, 8)).astype(np.float32).astype(np.float64)) for _ in range(3)]
    labels = np.array([2, 0])

    def loss():
        return F.cross_entropy(classify(side_forward(taps, state), state.head), labels)

    backward(loss())
    assert len(state.parameters()) == 3 * 2 * 10 + 4
    for param in state.parameters():
        numeric = numerical_gradient(loss, param)
        np.testing.assert_allclose(param.grad, numeric, rtol=1e-4, atol=1e-8, err_msg=param.name)
    # scores are shifted by q . b_k per row, which softmax ignores
    for name, param in state.params.items():
        if name.endswith("down_k.bias"):
            np.testing.assert_allclose(param.grad, 0.0, atol=1e-12)


def _lsa_by_loops(x, module, n_head):
    length, width = x.shape
    arrays = {name: param.data for name, param in module.items()}
    y = np.zeros_like(x)
    for i in range(length):
        mean = sum(x[i]) / width
        var = sum((x[i] - mean) ** 2) / width
        y[i] = (x[i] - mean) / np.sqrt(var + LAYER_NORM_EPS) * arrays["attn.ln.gamma"] + arrays["attn.ln.beta"]
    q = y @ arrays["attn.down_q.weight"] + arrays["attn.down_q.bias"]
    k = y @ arrays["attn.down_k.weight"] + arrays["attn.down_k.bias"]
    v = y @ arrays["attn.down_v.weight"] + arrays["attn.down_v.bias"]
    rank = q.shape[1]
    w = rank // n_head
    attended = np.zeros((length, rank))
    for h in range(n_head):
        cols = slice(h * w, (h + 1) * w)
        for i in range(length):
            scores = np.array([np.dot(q[i, cols], k[j, cols]) / np.sqrt(w) for j in range(length)])
            weights = np.exp(scores - scores.max())
            weights = weights / weights.sum()
            for j in range(length):
                attended[i, cols] += weights[j] * v[j, cols]
    return x + attended @ arrays["attn.up.weight"] + arrays["attn.up.bias"]


def _random_module(seed):
    config = SideConfig(width=8, depth=4, gap=2, stack=1, rank=4, n_head=2, num_classes=3, init_std=0.4)
    module = init_side(config, seed=seed).unit(0, 0)
    rng = np.random.default_rng(seed)
    for name in ("attn.ln.gamma", "attn.ln.beta", "attn.down_q.bias", "attn.down_k.bias", "attn.down_v.bias",
                 "attn.up.bias"):
        module[name].data = module[name].data + rng.standard_normal(module[name].shape) * 0.2
    return module


def test_lsa_module_matches_explicit_loops():
    module = _random_module(7)
    x = np.random.default_rng(8).standard_normal((5, 8)) * 2.0
    out = lsa_module(Tensor(x), module, 2)
    np.testing.assert_allclose(out.data, _lsa_by_loops(x, module, 2), rtol=0, atol=1e-12)


def test_lsa_module_single_token():
    module = _random_module(9)
    x = np.random.default_rng(10).standard_normal((1, 8))
    scores = F.softmax_lastdim(Tensor(np.array([[3.75]])))
    assert scores.data[0, 0] == 1.0
    out = lsa_module(Tensor(x), module, 2)
    np.testing.assert_allclose(out.data, _lsa_by_loops(x, module, 2), rtol=0, atol=1e-12)
    y = F.layer_norm(Tensor(x), module["attn.ln.gamma"], module["attn.ln.beta"]).data
    v = y @ module["attn.down_v.weight"].data + module["attn.down_v.bias"].data
    expected = x + v @ module["attn.up.weight"].data + module["attn.up.bias"].data
    np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-12)


def test_backbone_taps_receive_no_gradient(side_config, random_taps):
    state = init_side(side_config, seed=0)
    taps = [Tensor(t) for t in random_taps[:3]]
    backward(F.cross_entropy(classify(side_forward(taps, state), state.head), 1))
    assert all(tap.grad is None for tap in taps)
    assert all(param.grad is not None for param in state.parameters())


def test_side_weights_file(tmp_path, side_config):
    state = init_side(side_config, seed=0)
    path = str(tmp_path / "side.lasts")
    save_side(path, state)
    loaded = load_side(path)
    assert loaded.config == side_config
    for name, param in state.params.items():
        np.testing.assert_array_equal(loaded[name].data, param.data.astype(np.float32).astype(np.float64))
