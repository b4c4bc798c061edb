"""
Tests for the command-line entry point, driven through click's CliRunner.
"""
import json
import os

import pandas as pd
import pytest
from click.testing import CliRunner

from last.cli import main
from last.side_tuning.feature_cache import RECORDS_FILE
from last.utils import sha256_file

RUN_CONFIG = {
    "backbone": {"preset": "toy", "seed": 0},
    "side": {"gap": 2, "stack": 1, "rank": 8, "n_head": 2},
    "train": {"epochs": 1, "batch_size": 8},
    "cache": {"gap": 1},
    "sweep": {"gaps": [1, 2], "stacks": [1]},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.json"
    config.write_text(json.dumps(RUN_CONFIG))
    runner = CliRunner()
    result = runner.invoke(
        main, ["make-synth", "--out", str(root / "data"), "--n-train", "16", "--n-eval", "8", "--seed", "0"]
    )
    assert result.exit_code == 0, result.output
    assert "samples: 24" in result.output
    result = runner.invoke(
        main, ["extract", "--config", str(config), "--dataset", str(root / "data"), "--out", str(root / "cache")]
    )
    assert result.exit_code == 0, result.output
    return root


def _invoke(*args):
    return CliRunner().invoke(main, list(args))


def test_extract_reports_size_and_is_idempotent(workspace):
    records = os.path.join(str(workspace / "cache"), RECORDS_FILE)
    digest = sha256_file(records)
    result = _invoke("extract", "--config", str(workspace / "run.json"), "--dataset", str(workspace / "data"),
                     "--out", str(workspace / "cache"))
    assert result.exit_code == 0, result.output
    assert "cache up-to-date" in result.output
    assert "samples: 24" in result.output
    assert "bytes: %i" % os.path.getsize(records) in result.output
    assert sha256_file(records) == digest
    assert os.path.isfile(str(workspace / "cache" / "backbone.lastw"))


def test_train_from_cache_and_live_agree(workspace):
    config = str(workspace / "run.json")
    cached = _invoke("train", "--config", config, "--cache", str(workspace / "cache"), "--out",
                     str(workspace / "train-cache"))
    live = _invoke("train", "--config", config, "--live", "--dataset", str(workspace / "data"), "--out",
                   str(workspace / "train-live"))
    assert cached.exit_code == 0, cached.output
    assert live.exit_code == 0, live.output
    last_line = [line for line in cached.output.splitlines() if line.startswith("g2-T1")]
    assert last_line
    assert last_line[-1] in live.output
    for name in ("metrics.jsonl", "side.lasts", "summary.csv"):
        assert os.path.isfile(str(workspace / "train-cache" / name))
    with open(str(workspace / "train-cache" / "metrics.jsonl")) as a, open(str(workspace / "train-live" / "metrics.jsonl")) as b:
        assert a.read() == b.read()


def test_sweep_writes_summary(workspace):
    out = str(workspace / "sweep")
    result = _invoke("sweep", "--config", str(workspace / "run.json"), "--cache", str(workspace / "cache"),
                     "--out", out, "--concurrency", "2")
    assert result.exit_code == 0, result.output
    table = pd.read_csv(os.path.join(out, "summary.csv"))
    assert sorted(table["gap"]) == [1, 2]
    assert list(table["rank"]) == [1, 2]


def test_ablate_rejects_unknown_preset(workspace):
    result = _invoke("ablate", "--preset", "width", "--cache", str(workspace / "cache"))
    assert result.exit_code == 2


def test_ablate_gap_stack(workspace):
    out = str(workspace / "ablate")
    result = _invoke("ablate", "--preset", "gap-stack", "--config", str(workspace / "run.json"), "--cache",
                     str(workspace / "cache"), "--out", out, "--plot")
    assert result.exit_code == 0, result.output
    assert len(pd.read_csv(os.path.join(out, "gap-stack.csv"))) == 6
    assert os.path.isfile(os.path.join(out, "gap-stack.svg"))


def test_missing_cache_exits_with_io_code(workspace):
    missing = str(workspace / "no-such-cache")
    result = _invoke("train", "--config", str(workspace / "run.json"), "--cache", missing)
    assert result.exit_code == 3
    assert missing in result.output


def test_missing_config_exits_with_io_code(workspace):
    result = _invoke("estimate-mem", "--config", str(workspace / "absent.json"))
    assert result.exit_code == 3
    assert "absent.json" in result.output


def test_unknown_config_key_exits_with_config_code(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"side": {"ranks": 4}}))
    result = _invoke("estimate-mem", "--config", str(path))
    assert result.exit_code == 2
    assert "ranks" in result.output


def test_estimate_mem_json():
    result = _invoke("estimate-mem", "--json", "--batch-size", "4")
    assert result.exit_code == 0, result.output
    document = json.loads(result.output)
    assert document["backbone"]["width"] == 768
    reports = {report["strategy"]: report for report in document["reports"]}
    assert set(reports) == {"full", "bias_only", "prompt", "entangled_lowrank", "ladder_side", "linear_probe", "last"}
    assert reports["full"]["activation_elements_cached"] > reports["last"]["activation_elements_cached"]
    assert reports["last"]["batch_size"] == 4


def test_estimate_mem_table():
    result = _invoke("estimate-mem", "--strategy", "last")
    assert result.exit_code == 0, result.output
    assert "last" in result.output
    assert "total_bytes" in result.output


def test_estimate_mem_depth_keeps_side_constant():
    shallow = json.loads(_invoke("estimate-mem", "--json", "--strategy", "last").output)
    deep = json.loads(_invoke("estimate-mem", "--json", "--strategy", "last", "--depth", "24").output)
    assert deep["backbone"]["depth"] == 24
    key = "activation_elements_cached"
    assert shallow["reports"][0][key] == deep["reports"][0][key]


def test_estimate_mem_rejects_bad_requests():
    assert _invoke("estimate-mem", "--depth", "10").exit_code == 2
    assert _invoke("estimate-mem", "--strategy", "adapters").exit_code == 2


def test_mistyped_config_value_exits_with_config_code(tmp_path):
    path = tmp_path / "typed.json"
    path.write_text(json.dumps({"backbone": {"seed": "x"}}))
    result = _invoke("estimate-mem", "--config", str(path))
    assert result.exit_code == 2
    assert "backbone.seed" in result.output
