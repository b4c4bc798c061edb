"""
Training loop, evaluation and the parallel sweep over one feature cache.

Every run derives two independent generators from its seed (initialisation
and data order), so a run gives the same bits whether it trains alone, in a
sweep, from the cache or from live backbone forwards.
"""
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd

import last.tensor.functional as F
from last.errors import ConfigurationError, NumericError
from last.side_tuning.feature_cache import TAP_DTYPE
from last.side_tuning.side_network import (
    classify,
    count_trainable_params,
    init_side,
    save_side,
    side_forward,
    side_param_count,
)
from last.tensor.autograd import Tensor, backward, no_grad
from last.tensor.optim import AdamState, adam_step
from last.utils import atomic_write_text, log, resolve_concurrency

SUMMARY_COLUMNS = [
    "rank", "run_id", "gap", "stack", "rank_r", "n_head", "bias_correction", "mode",
    "ffn_hidden", "seed", "lr", "trainable_params", "final_loss", "final_acc", "status",
]


class CacheSource:
    """Taps read from a FeatureCache."""

    def __init__(self, cache, gap):
        self.cache = cache
        self.gap = gap
        cache.tap_indices(gap)

    def split_indices(self, split):
        return self.cache.split_indices(split)

    def batch(self, indices):
        return self.cache.load_batch(indices, gap=self.gap)


class LiveSource:
    """Taps computed per sample by the backbone, rounded like the cache stores them."""

    def __init__(self, dataset, backbone, gap):
        self.dataset = dataset
        self.backbone = backbone
        self.gap = gap
        backbone.schedule(gap)

    def split_indices(self, split):
        return self.dataset.split_indices(split)

    def batch(self, indices):
        taps = self.backbone.batch_taps(self.dataset.images[indices], self.gap, tap_dtype=TAP_DTYPE)
        return taps, self.dataset.labels[indices]


class ImageSource:
    """Raw images, for models that run the backbone themselves."""

    def __init__(self, dataset):
        self.dataset = dataset

    def split_indices(self, split):
        return self.dataset.split_indices(split)

    def batch(self, indices):
        return Tensor(self.dataset.images[indices]), self.dataset.labels[indices]


class SideModel:
    def __init__(self, state):
        self.state = state

    def parameters(self):
        return self.state.parameters()

    def logits(self, taps):
        return classify(side_forward(taps, self.state), self.state.head)


class TrainRun:
    """One side-network training run and its results."""

    def __init__(self, side_config, seed=0, lr=1e-3, epochs=100, batch_size=32, run_id=None, print_times=False):
        self.side_config = side_config
        self.seed = seed
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.print_times = print_times
        if run_id is None:
            c = side_config
            run_id = "g%i-T%i-r%i-h%i-%s%s-s%i" % (
                c.gap, c.stack, c.rank, c.n_head,
                c.mode if c.mode == "attn" else "%s%i" % (c.mode, c.ffn_hidden),
                "" if c.bias_correction else "-nobias", seed,
            )
        self.run_id = run_id

        self.metrics = list()
        self.state = None
        self.status = "pending"
        self.error = None
        self.timings = dict()
        self.run_info = dict()

        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError(
                "epochs must be >= 0 and batch_size >= 1, got %r and %r" % (self.epochs, self.batch_size)
            )
        if self.lr < 0:
            raise ConfigurationError("learning rate must be >= 0, got %r" % (self.lr,))

    def __repr__(self):
        return "TrainRun(%s, status=%s, epochs=%i/%i)" % (self.run_id, self.status, len(self.metrics), self.epochs)

    @property
    def final_loss(self):
        return self.metrics[-1]["loss"] if self.metrics else float("nan")

    @property
    def final_acc(self):
        return self.metrics[-1]["acc"] if self.metrics else float("nan")

    @property
    def trainable_params(self):
        if self.state is not None:
            return count_trainable_params(self.state)
        return side_param_count(self.side_config)

    def metric_lines(self):
        return "".join(json.dumps(record, sort_keys=True) + "\n" for record in self.metrics)

    def to_row(self):
        c = self.side_config
        return {
            "run_id": self.run_id,
            "gap": c.gap,
            "stack": c.stack,
            "rank_r": c.rank,
            "n_head": c.n_head,
            "bias_correction": c.bias_correction,
            "mode": c.mode,
            "ffn_hidden": c.ffn_hidden if c.ffn_hidden is not None else 0,
            "seed": self.seed,
            "lr": self.lr,
            "trainable_params": self.trainable_params,
            "final_loss": self.final_loss,
            "final_acc": self.final_acc,
            "status": self.status,
        }


def run_generators(seed):
    """Independent (init, shuffle) generators derived from one seed."""
    init_seq, shuffle_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(shuffle_seq)


def predict(model, source, indices, batch_size=256):
    predictions = list()
    labels = list()
    with no_grad():
        for start in range(0, len(indices), batch_size):
            inputs, batch_labels = source.batch(indices[start:start + batch_size])
            logits = model.logits(inputs)
            predictions.append(np.argmax(logits.data, axis=-1))
            labels.append(batch_labels)
    if not predictions:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(predictions), np.concatenate(labels)


def accuracy(model, source, split="eval", batch_size=256):
    indices = source.split_indices(split)
    predictions, labels = predict(model, source, indices, batch_size=batch_size)
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predictions == labels))


def evaluate(state, cache, split="eval", batch_size=256):
    """Accuracy of a side-network on a cache split."""
    return accuracy(SideModel(state), CacheSource(cache, state.config.gap), split=split, batch_size=batch_size)


def fit(run, model, source, train_split="train", eval_split="eval", shuffle_rng=None):
    """Cross-entropy + Adam over ``source``; fills ``run.metrics`` with one record per epoch.

    The epoch loss is the exactly rounded mean of the per-sample losses seen
    during the epoch, so it does not depend on batch boundaries.
    """
    if shuffle_rng is None:
        shuffle_rng = run_generators(run.seed)[1]
    params = model.parameters()
    optimizer = AdamState(params, lr=run.lr)
    train_indices = source.split_indices(train_split)
    eval_indices = source.split_indices(eval_split)
    if len(train_indices) == 0:
        raise ConfigurationError("split %s is empty" % train_split)
    if len(eval_indices) == 0:
        eval_split = train_split

    run.timings["train"] = 0.0
    run.timings["evaluate"] = 0.0
    steps = 0
    for epoch in range(run.epochs):
        start = time.time()
        order = shuffle_rng.permutation(train_indices)
        sample_losses = list()
        for step, begin in enumerate(range(0, len(order), run.batch_size)):
            inputs, labels = source.batch(order[begin:begin + run.batch_size])
            logits = model.logits(inputs)
            loss = F.cross_entropy(logits, labels)
            if not np.isfinite(loss.item()):
                raise NumericError(
                    "non-finite loss %r in run %s at epoch %i step %i" % (loss.item(), run.run_id, epoch, step),
                    epoch=epoch,
                    step=step,
                )
            sample_losses.extend(F.per_sample_cross_entropy(logits.data, labels).tolist())
            tape = backward(loss)
            if steps == 0:
                run.run_info["retained_elements"] = tape.retained_elements
                run.run_info["retained_buffers"] = tape.retained_count
                run.run_info["first_batch_loss"] = loss.item()
            adam_step(params, optimizer)
            steps += 1
        run.timings["train"] += time.time() - start

        start = time.time()
        acc = accuracy(model, source, split=eval_split)
        run.timings["evaluate"] += time.time() - start
        record = {"run_id": run.run_id, "epoch": epoch, "loss": math.fsum(sample_losses) / len(sample_losses), "acc": acc}
        run.metrics.append(record)
        log("%s epoch %i loss %.6f acc %.4f" % (run.run_id, epoch, record["loss"], acc), level="debug")

    run.run_info["steps"] = steps
    run.timings["step_ms"] = 1000.0 * run.timings["train"] / steps if steps else 0.0
    if run.print_times:
        log("%s trained %i steps in %f s (%f ms/step)" % (run.run_id, steps, run.timings["train"], run.timings["step_ms"]))
    return run


def train(run, cache=None, dataset=None, backbone=None, metrics_path=None, weights_path=None):
    """Train ``run``'s side-network from the cache, or live from dataset + backbone.

    Both paths see identical taps, so they produce identical loss curves.
    """
    config = run.side_config
    if cache is not None:
        cache.check_compatible(config, backbone.checksum if backbone is not None else None)
        source = CacheSource(cache, config.gap)
        run.run_info["mode"] = "cache"
    elif dataset is not None and backbone is not None:
        if config.width != backbone.config.width or config.depth != backbone.config.depth:
            raise ConfigurationError(
                "side-network built for d=%i, N=%i; backbone has d=%i, N=%i"
                % (config.width, config.depth, backbone.config.width, backbone.config.depth)
            )
        source = LiveSource(dataset, backbone, config.gap)
        run.run_info["mode"] = "live"
    else:
        raise ConfigurationError("train needs a cache, or a dataset and a backbone")

    init_rng, shuffle_rng = run_generators(run.seed)
    run.status = "running"
    run.metrics = list()
    run.state = init_side(config, init_rng)
    fit(run, SideModel(run.state), source, shuffle_rng=shuffle_rng)
    run.status = "ok"

    if metrics_path is not None:
        atomic_write_text(metrics_path, run.metric_lines())
    if weights_path is not None:
        save_side(weights_path, run.state)
    return run


class SweepPlan:
    """Runs that share one cache, executed by up to ``concurrency`` threads."""

    def __init__(self, runs, cache, concurrency=None, out_dir=None):
        self.runs = list(runs)
        self.cache = cache
        self.concurrency = resolve_concurrency(concurrency)
        self.out_dir = out_dir
        self.timings = dict()
        ids = [run.run_id for run in self.runs]
        duplicates = sorted(set(i for i in ids if ids.count(i) > 1))
        if duplicates:
            raise ConfigurationError("duplicate run ids in sweep: %s" % ", ".join(duplicates))

    def __len__(self):
        return len(self.runs)

    def run_paths(self, run):
        if self.out_dir is None:
            return None, None
        directory = os.path.join(self.out_dir, "runs")
        return (
            os.path.join(directory, "%s.jsonl" % run.run_id),
            os.path.join(directory, "%s.lasts" % run.run_id),
        )


def _train_isolated(plan, run):
    metrics_path, weights_path = plan.run_paths(run)
    try:
        train(run, plan.cache, metrics_path=metrics_path, weights_path=weights_path)
    except Exception as error:
        run.status = "failed"
        run.error = "%s: %s" % (type(error).__name__, error)
        log("run %s failed: %s" % (run.run_id, run.error), level="warning")
    return run


def sweep(plan):
    """Train every run of ``plan``; a failing run is marked and the others continue."""
    start = time.time()
    if plan.concurrency == 1:
        results = [_train_isolated(plan, run) for run in plan.runs]
    else:
        with ThreadPoolExecutor(max_workers=plan.concurrency) as pool:
            results = list(pool.map(lambda run: _train_isolated(plan, run), plan.runs))
    plan.timings["sweep"] = time.time() - start
    log("Sweep of %i runs finished in %f s" % (len(results), plan.timings["sweep"]))
    if plan.out_dir is not None:
        write_summary(os.path.join(plan.out_dir, "summary.csv"), results)
    return results


def summary(runs):
    """Runs ranked by final accuracy (failures last), one row each."""
    if not runs:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)
    table = pd.DataFrame([run.to_row() for run in runs])
    table["_failed"] = table["status"] != "ok"
    table["_acc"] = table["final_acc"].fillna(-1.0)
    table = table.sort_values(["_failed", "_acc", "run_id"], ascending=[True, False, True], kind="mergesort")
    table = table.drop(columns=["_failed", "_acc"]).reset_index(drop=True)
    table.insert(0, "rank", np.arange(1, len(table) + 1))
    return table[SUMMARY_COLUMNS]


def write_summary(path, runs):
    table = summary(runs)
    atomic_write_text(path, table.to_csv(index=False))
    return table
