import os

import pandas as pd
import pytest

from last.errors import ConfigurationError
from last.side_tuning.ablations import PRESETS, ablation_configs, divisors, run_ablation
from last.side_tuning.side_network import SideConfig


def test_divisors():
    assert divisors(12) == [1, 2, 3, 4, 6, 12]


def test_preset_grids(side_config):
    assert len(ablation_configs("gap-stack", side_config)) == 3 * 2
    assert len(ablation_configs("stack-T", side_config)) == 3 * 5
    assert len(ablation_configs("bias", side_config)) == 2 * 3
    ffn = ablation_configs("ffn", side_config)
    assert [(c.mode, c.ffn_hidden) for c in ffn] == [
        ("attn", None), ("both", 16), ("both", 64), ("ffn", 16), ("ffn", 64),
    ]
    heads = ablation_configs("heads", side_config)
    assert len(heads) == 9
    assert {(c.rank // c.n_head, c.n_head) for c in heads} == {(r, n) for r in (1, 2, 4) for n in (1, 2, 4)}


def test_heads_skip_ranks_at_width():
    narrow = SideConfig(width=8, depth=4, gap=2, rank=4, n_head=2)
    ranks = {c.rank for c in ablation_configs("heads", narrow)}
    assert max(ranks) < 8
    assert 16 not in ranks


def test_unknown_preset(side_config):
    with pytest.raises(ConfigurationError, match="valid: "):
        ablation_configs("width", side_config)
    assert set(PRESETS) == {"gap-stack", "heads", "bias", "ffn", "stack-T"}


def test_bias_ablation_writes_table_and_plot(tmp_path, cache, side_config):
    out = str(tmp_path / "ablate")
    table = run_ablation("bias", side_config, cache, epochs=1, batch_size=8, out_dir=out, plot=True)
    assert len(table) == 6
    assert set(table["bias_correction"]) == {True, False}
    assert (table["status"] == "ok").all()
    written = pd.read_csv(os.path.join(out, "bias.csv"))
    assert list(written["run_id"]) == list(table["run_id"])
    with open(os.path.join(out, "bias.svg")) as handle:
        assert "<svg" in handle.read()


def test_ffn_ablation_reports_probe(tmp_path, cache, side_config):
    table = run_ablation("ffn", side_config, cache, epochs=1, batch_size=8, out_dir=str(tmp_path), plot=True)
    assert list(table["mode"])[-1] == "probe"
    assert len(table) == 6
    assert os.path.isfile(str(tmp_path / "ffn.svg"))
