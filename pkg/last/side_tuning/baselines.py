"""
Reference points for the side-network: a linear probe on the last tap and
full finetuning of a trainable copy of the backbone.
"""
import numpy as np
import pandas as pd

from last.side_tuning.backbone import forward_tokens
from last.side_tuning.side_network import SideConfig, classify, init_head
from last.side_tuning.training import CacheSource, ImageSource, LiveSource, TrainRun, fit, run_generators, train
from last.utils import log


class BaselineRun:
    def __init__(self, method, seed=0, lr=1e-3, epochs=100, batch_size=32, print_times=False):
        self.method = method
        self.run_id = "%s-s%i" % (method, seed)
        self.seed = seed
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.print_times = print_times
        self.metrics = list()
        self.timings = dict()
        self.run_info = dict()
        self.trainable_params = 0
        self.status = "pending"

    @property
    def final_loss(self):
        return self.metrics[-1]["loss"] if self.metrics else float("nan")

    @property
    def final_acc(self):
        return self.metrics[-1]["acc"] if self.metrics else float("nan")

    def __repr__(self):
        return "BaselineRun(%s, status=%s)" % (self.run_id, self.status)


class ProbeModel:
    """Head only, reading the class token of z_m."""

    def __init__(self, head):
        self.head = head

    def parameters(self):
        return list(self.head.values())

    def logits(self, taps):
        return classify(taps[-1], _local(self.head))


class FinetuneModel:
    """Every backbone weight plus the head is trainable; runs the backbone differentiably."""

    def __init__(self, weights, head):
        self.weights = weights
        self.head = head

    def parameters(self):
        return list(self.weights) + list(self.head.values())

    def logits(self, images):
        return classify(forward_tokens(images, self.weights), _local(self.head))


def _local(head):
    return {name[len("head."):]: param for name, param in head.items()}


def _trainable(params):
    return int(sum(param.size for param in params if param.requires_grad))


def linear_probe(num_classes, cache=None, dataset=None, backbone=None, seed=0, lr=1e-3, epochs=100, batch_size=32):
    """Train only a LayerNorm + linear head on z_m; d*C + C + 2d parameters."""
    if cache is not None:
        width = cache.tap_shape[1]
        source = CacheSource(cache, cache.manifest["backbone"]["depth"])
    else:
        width = backbone.config.width
        source = LiveSource(dataset, backbone, backbone.config.depth)
    run = BaselineRun("linear_probe", seed=seed, lr=lr, epochs=epochs, batch_size=batch_size)
    init_rng, shuffle_rng = run_generators(seed)
    model = ProbeModel(init_head(width, num_classes, init_rng))
    run.trainable_params = _trainable(model.parameters())
    run.status = "running"
    fit(run, model, source, shuffle_rng=shuffle_rng)
    run.status = "ok"
    return run


def full_finetune(dataset, backbone, seed=0, lr=1e-4, epochs=10, batch_size=32):
    """Train a writable copy of the backbone together with the head; the backbone itself stays untouched."""
    run = BaselineRun("full_finetune", seed=seed, lr=lr, epochs=epochs, batch_size=batch_size)
    init_rng, shuffle_rng = run_generators(seed)
    model = FinetuneModel(
        backbone.weights.trainable_copy(), init_head(backbone.config.width, dataset.num_classes, init_rng)
    )
    run.trainable_params = _trainable(model.parameters())
    run.status = "running"
    fit(run, model, ImageSource(dataset), shuffle_rng=shuffle_rng)
    run.status = "ok"
    return run


def baselines(dataset, backbone, cache=None, side_config=None, seed=0, lr=1e-3, epochs=20, batch_size=32,
              finetune_epochs=None, finetune_lr=1e-4):
    """Linear probe, full finetune and the side-network on one task.

    Returns the runs and a table of trainable parameters, retained elements
    of the first step, milliseconds per step and final loss/accuracy.
    """
    if side_config is None:
        side_config = SideConfig.for_backbone(backbone.config, num_classes=dataset.num_classes)
    runs = list()
    runs.append(
        linear_probe(dataset.num_classes, cache=cache, dataset=dataset, backbone=backbone, seed=seed, lr=lr,
                     epochs=epochs, batch_size=batch_size)
    )
    runs.append(
        full_finetune(dataset, backbone, seed=seed, lr=finetune_lr,
                      epochs=epochs if finetune_epochs is None else finetune_epochs, batch_size=batch_size)
    )
    side = TrainRun(side_config, seed=seed, lr=lr, epochs=epochs, batch_size=batch_size, run_id="last-s%i" % seed)
    if cache is not None:
        train(side, cache=cache)
    else:
        train(side, dataset=dataset, backbone=backbone)
    side.method = "last"
    runs.append(side)

    rows = list()
    for run in runs:
        rows.append(
            {
                "method": run.method,
                "trainable_params": run.trainable_params,
                "retained_elements": run.run_info.get("retained_elements", 0),
                "ms_per_step": run.timings.get("step_ms", np.nan),
                "final_loss": run.final_loss,
                "final_acc": run.final_acc,
            }
        )
        log("%s: %i trainable, acc %.4f" % (run.method, run.trainable_params, run.final_acc))
    return runs, pd.DataFrame(rows)
