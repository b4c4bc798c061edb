"""
Ablation grids over side-network hyperparameters, each trained as a sweep
over one cache extracted at the finest gap.
"""
import dataclasses
import os

import pandas as pd

from last.errors import ConfigurationError
from last.side_tuning.baselines import linear_probe
from last.side_tuning.training import SweepPlan, TrainRun, summary, sweep
from last.utils import atomic_write_text, log


def divisors(n):
    return [g for g in range(1, n + 1) if n % g == 0]


def _variant(base, **changes):
    return dataclasses.replace(base, **changes)


def gap_stack(base):
    """Every gap dividing N against T in {1, 2}."""
    return [_variant(base, gap=g, stack=t) for g in divisors(base.depth) for t in (1, 2)]


def heads(base):
    """r_head x n_head over {1, 2, 4}^2; ranks not below d are skipped."""
    configs = list()
    for r_head in (1, 2, 4):
        for n_head in (1, 2, 4):
            if r_head * n_head < base.width:
                configs.append(_variant(base, rank=r_head * n_head, n_head=n_head))
    return configs


def bias(base):
    """Bias correction on and off at every gap."""
    return [_variant(base, gap=g, bias_correction=flag) for flag in (True, False) for g in divisors(base.depth)]


def ffn(base):
    """Attention only, attention + FFN and FFN only, FFN hidden width d/2 and 2d."""
    configs = [_variant(base, mode="attn", ffn_hidden=None)]
    for mode in ("both", "ffn"):
        for hidden in (max(base.width // 2, 1), 2 * base.width):
            configs.append(_variant(base, mode=mode, ffn_hidden=hidden))
    return configs


def stack_t(base):
    """T from 1 to 5 at every gap."""
    return [_variant(base, gap=g, stack=t) for g in divisors(base.depth) for t in range(1, 6)]


PRESETS = {
    "gap-stack": gap_stack,
    "heads": heads,
    "bias": bias,
    "ffn": ffn,
    "stack-T": stack_t,
}


def ablation_configs(preset, base):
    builder = PRESETS.get(preset)
    if builder is None:
        raise ConfigurationError("Unrecognised ablation preset %s (valid: %s)" % (preset, ", ".join(PRESETS)))
    return builder(base)


def ablation_plan(preset, base, cache, seed=0, lr=1e-3, epochs=20, batch_size=32, concurrency=None, out_dir=None):
    runs = [
        TrainRun(config, seed=seed, lr=lr, epochs=epochs, batch_size=batch_size)
        for config in ablation_configs(preset, base)
    ]
    return SweepPlan(runs, cache, concurrency=concurrency, out_dir=out_dir)


def _plot(preset, table, path):
    from last.utils import plotting

    ok = table[table["status"] == "ok"]
    if preset == "gap-stack":
        plotting.line_plot(ok, "gap", "final_acc", "stack", path, title="gap x stack")
    elif preset == "heads":
        frame = ok.assign(r_head=ok["rank_r"] // ok["n_head"])
        plotting.line_plot(frame, "n_head", "final_acc", "r_head", path, title="heads")
    elif preset == "bias":
        plotting.line_plot(ok, "gap", "final_acc", "bias_correction", path, title="bias correction")
    elif preset == "stack-T":
        plotting.line_plot(ok, "stack", "final_acc", "gap", path, title="stack T")
    else:
        labels = ["%s/%s" % (mode, hidden) for mode, hidden in zip(table["mode"], table["ffn_hidden"])]
        plotting.bar_plot(labels, table["final_acc"].fillna(0.0), path, title="ffn", ylabel="final_acc")


def run_ablation(preset, base, cache, seed=0, lr=1e-3, epochs=20, batch_size=32, concurrency=None, out_dir=None,
                 plot=False):
    """Train the preset's grid; writes ``<preset>.csv`` (and ``<preset>.svg``) under ``out_dir``.

    The ffn preset also reports a linear-probe row for reference.
    """
    plan = ablation_plan(preset, base, cache, seed=seed, lr=lr, epochs=epochs, batch_size=batch_size,
                         concurrency=concurrency, out_dir=out_dir)
    log("Ablation %s: %i runs" % (preset, len(plan)))
    table = summary(sweep(plan))
    if preset == "ffn":
        probe = linear_probe(base.num_classes, cache=cache, seed=seed, lr=lr, epochs=epochs, batch_size=batch_size)
        row = {column: None for column in table.columns}
        row.update(
            rank=len(table) + 1, run_id=probe.run_id, gap=base.depth, stack=0, rank_r=0, n_head=0,
            bias_correction=False, mode="probe", ffn_hidden=0, seed=seed, lr=lr,
            trainable_params=probe.trainable_params, final_loss=probe.final_loss, final_acc=probe.final_acc,
            status=probe.status,
        )
        table = pd.concat([table, pd.DataFrame([row])], ignore_index=True)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        atomic_write_text(os.path.join(out_dir, "%s.csv" % preset), table.to_csv(index=False))
        if plot:
            _plot(preset, table, os.path.join(out_dir, "%s.svg" % preset))
    return table
