"""
Command-line entry point.

Exit codes: 0 success, 1 autodiff misuse, 2 configuration or shape error
(click usage errors included), 3 I/O or cache error, 4 non-finite training.
"""
import functools
import json
import os
import sys

import click

from last.config import RunConfig
from last.errors import CacheError, ConfigurationError, GraphError, NumericError, ShapeError
from last.utils import atomic_write_text, enable_console_logging, log

EXIT_GRAPH = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def handle_errors(command):
    """Map library exceptions onto exit codes with a one-line message on stderr."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (ConfigurationError, ShapeError) as error:
            click.echo("error: %s" % error, err=True)
            sys.exit(EXIT_CONFIG)
        except NumericError as error:
            click.echo("error: %s" % error, err=True)
            sys.exit(EXIT_NUMERIC)
        except (CacheError, OSError) as error:
            click.echo("error: %s" % error, err=True)
            sys.exit(EXIT_IO)
        except GraphError as error:
            click.echo("error: %s" % error, err=True)
            sys.exit(EXIT_GRAPH)

    return wrapper


def load_config(path):
    if path is None:
        return RunConfig()
    if not os.path.isfile(path):
        raise FileNotFoundError("config file not found: %s" % path)
    return RunConfig.from_json(path)


def build_backbone(config, seed=None):
    from last.side_tuning.backbone import Backbone

    if config.backbone.weights:
        return Backbone.from_file(config.backbone.weights)
    return Backbone(config.backbone.build(), seed=config.backbone.seed if seed is None else seed)


def _dataset_path(config, dataset):
    return dataset if dataset is not None else config.cache.dataset


def _cache_path(config, cache):
    return cache if cache is not None else config.cache.path


config_option = click.option("--config", "config_path", type=str, default=None, help="JSON run configuration.")
seed_option = click.option("--seed", type=int, default=None, help="Overrides the seed of the configuration.")
out_option = click.option("--out", type=str, default=None, help="Output directory.")
concurrency_option = click.option(
    "--concurrency", type=int, default=None, envvar="LAST_THREADS", help="Parallel runs (env LAST_THREADS)."
)


@click.group()
@click.option("--verbose", is_flag=True, help="Log at DEBUG level.")
def main(verbose):
    """Low-rank attention side-tuning on a frozen vision transformer."""
    enable_console_logging("debug" if verbose else "info")


@main.command("make-synth")
@click.option("--out", type=str, required=True, help="Dataset directory to create.")
@click.option("--seed", type=int, default=0)
@click.option("--num-classes", type=click.IntRange(2, 10), default=4)
@click.option("--variant", type=click.Choice(["pointer", "parity"]), default="pointer")
@click.option("--n-train", type=int, default=800)
@click.option("--n-eval", type=int, default=200)
@handle_errors
def make_synth_command(out, seed, num_classes, variant, n_train, n_eval):
    """Write the seeded synth-cls dataset."""
    from last.side_tuning.datasets import make_synth

    dataset = make_synth(num_classes=num_classes, seed=seed, n_train=n_train, n_eval=n_eval, variant=variant)
    dataset.save(out)
    click.echo("samples: %i" % len(dataset))


@main.command("extract")
@config_option
@click.option("--dataset", type=str, default=None, help="Dataset directory (default: cache.dataset).")
@out_option
@seed_option
@handle_errors
def extract_command(config_path, dataset, out, seed):
    """Forward every image once and cache its taps."""
    from last.side_tuning.datasets import load_dataset
    from last.side_tuning.feature_cache import extract

    config = load_config(config_path)
    images = load_dataset(_dataset_path(config, dataset))
    backbone = build_backbone(config, seed=seed)
    out = _cache_path(config, out)
    cache = extract(images, backbone, config.cache.gap, out)
    weights_path = os.path.join(out, "backbone.lastw")
    if not os.path.isfile(weights_path):
        backbone.save(weights_path)
    if cache.up_to_date:
        click.echo("cache up-to-date")
    click.echo("samples: %i" % cache.sample_count)
    click.echo("bytes: %i" % cache.byte_size)


def _open_cache(config, cache):
    from last.side_tuning.feature_cache import open_cache

    return open_cache(_cache_path(config, cache))


@main.command("train")
@config_option
@click.option("--cache", type=str, default=None, help="Cache directory (default: cache.path).")
@click.option("--dataset", type=str, default=None, help="Dataset directory for --live.")
@out_option
@seed_option
@click.option("--live", is_flag=True, help="Run the backbone every step instead of reading the cache.")
@handle_errors
def train_command(config_path, cache, dataset, out, seed, live):
    """Train one side-network."""
    from last.side_tuning.training import TrainRun, train, write_summary

    config = load_config(config_path)
    seed = config.train.seed if seed is None else seed
    out = out or "train"
    os.makedirs(out, exist_ok=True)
    if live:
        from last.side_tuning.datasets import load_dataset

        images = load_dataset(_dataset_path(config, dataset))
        backbone = build_backbone(config)
        side = config.side_config(backbone.config, num_classes=images.num_classes)
        source = dict(dataset=images, backbone=backbone)
    else:
        features = _open_cache(config, cache)
        side = config.side_config(features.backbone_config, num_classes=features.num_classes)
        source = dict(cache=features)
    run = TrainRun(side, seed=seed, lr=config.train.lr, epochs=config.train.epochs,
                   batch_size=config.train.batch_size)
    train(run, metrics_path=os.path.join(out, "metrics.jsonl"), weights_path=os.path.join(out, "side.lasts"),
          **source)
    write_summary(os.path.join(out, "summary.csv"), [run])
    click.echo("%s: loss %.6f acc %.4f" % (run.run_id, run.final_loss, run.final_acc))


@main.command("sweep")
@config_option
@click.option("--cache", type=str, default=None, help="Cache directory (default: cache.path).")
@out_option
@seed_option
@concurrency_option
@handle_errors
def sweep_command(config_path, cache, out, seed, concurrency):
    """Train the sweep grid of the configuration against one cache."""
    from last.side_tuning.training import SweepPlan, TrainRun, summary, sweep

    config = load_config(config_path)
    features = _open_cache(config, cache)
    seeds = [seed] if seed is not None else config.sweep.seeds
    runs = list()
    for side in config.sweep_configs(features.backbone_config, num_classes=features.num_classes):
        for run_seed in seeds:
            runs.append(TrainRun(side, seed=run_seed, lr=config.train.lr, epochs=config.train.epochs,
                                 batch_size=config.train.batch_size))
    concurrency = concurrency if concurrency is not None else config.sweep.concurrency
    plan = SweepPlan(runs, features, concurrency=concurrency, out_dir=out or "sweep")
    table = summary(sweep(plan))
    click.echo(table.to_string(index=False))


@main.command("ablate")
@click.option("--preset", type=click.Choice(["gap-stack", "heads", "bias", "ffn", "stack-T"]), required=True)
@config_option
@click.option("--cache", type=str, default=None, help="Cache directory (default: cache.path).")
@out_option
@seed_option
@concurrency_option
@click.option("--plot", is_flag=True, help="Also write an SVG chart.")
@handle_errors
def ablate_command(preset, config_path, cache, out, seed, concurrency, plot):
    """Train one of the ablation grids."""
    from last.side_tuning.ablations import run_ablation

    config = load_config(config_path)
    features = _open_cache(config, cache)
    base = config.side_config(features.backbone_config, num_classes=features.num_classes)
    table = run_ablation(
        preset, base, features, seed=config.train.seed if seed is None else seed, lr=config.train.lr,
        epochs=config.train.epochs, batch_size=config.train.batch_size,
        concurrency=concurrency if concurrency is not None else config.sweep.concurrency,
        out_dir=out or "ablate", plot=plot,
    )
    click.echo(table.to_string(index=False))


@main.command("baselines")
@config_option
@click.option("--dataset", type=str, default=None, help="Dataset directory (default: cache.dataset).")
@click.option("--cache", type=str, default=None, help="Optional cache for the probe and side-network.")
@out_option
@seed_option
@handle_errors
def baselines_command(config_path, dataset, cache, out, seed):
    """Linear probe, full finetuning and the side-network on one task."""
    from last.side_tuning.baselines import baselines
    from last.side_tuning.datasets import load_dataset

    config = load_config(config_path)
    images = load_dataset(_dataset_path(config, dataset))
    features = _open_cache(config, cache) if cache is not None else None
    backbone = build_backbone(config)
    side = config.side_config(backbone.config, num_classes=images.num_classes)
    _, table = baselines(images, backbone, cache=features, side_config=side,
                         seed=config.train.seed if seed is None else seed, lr=config.train.lr,
                         epochs=config.train.epochs, batch_size=config.train.batch_size)
    out = out or "baselines"
    os.makedirs(out, exist_ok=True)
    atomic_write_text(os.path.join(out, "baselines.csv"), table.to_csv(index=False))
    click.echo(table.to_string(index=False))


@main.command("estimate-mem")
@config_option
@click.option("--backbone", "preset", type=str, default="vit_b", help="Backbone preset.")
@click.option("--strategy", type=str, default="all", help="A strategy name or 'all'.")
@click.option("--depth", type=int, default=None, help="Backbone depth N; the side gap keeps memory.taps fixed.")
@click.option("--batch-size", type=int, default=None)
@click.option("--json", "as_json", is_flag=True, help="Print JSON instead of a table.")
@handle_errors
def estimate_mem_command(config_path, preset, strategy, depth, batch_size, as_json):
    """Predicted training memory per strategy."""
    from last.memory import STRATEGIES, StrategyModel, compare, estimate
    from last.side_tuning.backbone import BackboneConfig
    from last.side_tuning.side_network import SideConfig

    config = load_config(config_path)
    memory = config.memory
    arch = BackboneConfig.preset(preset, depth=depth)
    if arch.depth % memory.taps:
        raise ConfigurationError("depth %i is not divisible into %i taps" % (arch.depth, memory.taps))
    side = SideConfig.recommended(arch, num_classes=memory.num_classes)
    side = SideConfig.for_backbone(
        arch, gap=arch.depth // memory.taps, stack=side.stack, rank=side.rank, n_head=side.n_head,
        num_classes=memory.num_classes,
    )
    names = STRATEGIES if strategy == "all" else [strategy]
    reports = [
        estimate(
            arch,
            StrategyModel(strategy=name, num_classes=memory.num_classes, lora_rank=memory.lora_rank,
                          prompt_tokens=memory.prompt_tokens, reduction=memory.reduction, side=side,
                          live=memory.live),
            batch_size=batch_size or memory.batch_size,
            seq_len=memory.seq_len,
            dtype_bytes=memory.dtype_bytes,
        )
        for name in names
    ]
    if as_json:
        document = {
            "backbone": arch.to_dict(),
            "batch_size": reports[0].batch_size,
            "reports": [report.to_dict() for report in reports],
        }
        click.echo(json.dumps(document, indent=1, sort_keys=True))
    else:
        click.echo(compare(reports).to_string(index=False))
    log("Estimated %i strategies for %s" % (len(reports), arch.name), level="debug")


if __name__ == "__main__":
    main()
