"""
Analytic training-memory accounting.

A training step holds the frozen and trainable parameters, one gradient
per trainable parameter, two Adam moments per trainable parameter, the
activations the backward pass needs and the inputs of the step. Everything
is counted in scalar elements and converted to bytes at the end.
"""
from dataclasses import asdict, dataclass

import pandas as pd

import last.memory.strategies as strategies
from last.errors import ConfigurationError
from last.side_tuning.side_network import SideConfig

STRATEGIES = ("full", "bias_only", "prompt", "entangled_lowrank", "ladder_side", "linear_probe", "last")


@dataclass
class StrategyModel:
    strategy: str = "last"
    num_classes: int = 100
    lora_rank: int = 8
    prompt_tokens: int = 10
    reduction: int = 8
    side: SideConfig = None
    live: bool = False

    def __post_init__(self):
        if strategy_module(self.strategy) is None:
            raise ConfigurationError(
                "Unrecognised strategy %s (valid: %s)" % (self.strategy, ", ".join(STRATEGIES))
            )


def strategy_module(name):
    if name not in STRATEGIES:
        return None
    return getattr(strategies, name, None)


@dataclass
class FootprintReport:
    strategy: str
    batch_size: int
    seq_len: int
    dtype_bytes: int
    trainable_param_count: int
    frozen_param_count: int
    gradient_elements: int
    optimizer_state_elements: int
    activation_elements_cached: int
    input_elements: int

    @property
    def total_elements(self):
        return (
            self.frozen_param_count
            + self.trainable_param_count
            + self.gradient_elements
            + self.optimizer_state_elements
            + self.activation_elements_cached
            + self.input_elements
        )

    @property
    def activation_bytes(self):
        return self.activation_elements_cached * self.dtype_bytes

    @property
    def total_bytes(self):
        return self.total_elements * self.dtype_bytes

    def to_dict(self):
        values = asdict(self)
        values["total_elements"] = self.total_elements
        values["activation_bytes"] = self.activation_bytes
        values["total_bytes"] = self.total_bytes
        return values


def estimate(arch, strategy="last", batch_size=32, seq_len=None, dtype_bytes=4, model=None):
    """FootprintReport for one strategy on backbone ``arch``.

    ``strategy`` is a name or a StrategyModel; ``model`` carries the
    strategy parameters when a name is given.
    """
    if isinstance(strategy, StrategyModel):
        model = strategy
    elif model is None:
        model = StrategyModel(strategy=strategy)
    elif model.strategy != strategy:
        raise ConfigurationError("strategy %s does not match model %s" % (strategy, model.strategy))
    if batch_size < 1 or dtype_bytes < 1:
        raise ConfigurationError("batch_size and dtype_bytes must be positive, got %r and %r" % (batch_size, dtype_bytes))
    seq_len = arch.seq_len if seq_len is None else seq_len
    if seq_len <= arch.num_registers:
        raise ConfigurationError("seq_len %i leaves no patch tokens" % seq_len)

    module = strategy_module(model.strategy)
    module.verify_parameters(arch, model)
    trainable = module.trainable_params(arch, model)
    return FootprintReport(
        strategy=model.strategy,
        batch_size=batch_size,
        seq_len=seq_len,
        dtype_bytes=dtype_bytes,
        trainable_param_count=trainable,
        frozen_param_count=module.frozen_params(arch, model),
        gradient_elements=trainable,
        optimizer_state_elements=2 * trainable,
        activation_elements_cached=batch_size * module.activation_elements(arch, model, seq_len),
        input_elements=batch_size * module.input_elements(arch, model, seq_len),
    )


def estimate_all(arch, batch_size=32, seq_len=None, dtype_bytes=4, **model_values):
    return [
        estimate(arch, StrategyModel(strategy=name, **model_values), batch_size=batch_size, seq_len=seq_len,
                 dtype_bytes=dtype_bytes)
        for name in STRATEGIES
    ]


def compare(reports):
    """Reports ranked by total bytes, with ratios against ``full`` (else the first report)."""
    reports = list(reports)
    if not reports:
        raise ConfigurationError("compare needs at least one report")
    reference = next((report for report in reports if report.strategy == "full"), reports[0])
    rows = list()
    for report in reports:
        row = {
            "strategy": report.strategy,
            "trainable_params": report.trainable_param_count,
            "frozen_params": report.frozen_param_count,
            "activation_elements": report.activation_elements_cached,
            "input_elements": report.input_elements,
            "total_elements": report.total_elements,
            "activation_bytes": report.activation_bytes,
            "total_bytes": report.total_bytes,
            "activation_ratio": report.activation_elements_cached / reference.activation_elements_cached
            if reference.activation_elements_cached
            else float("nan"),
            "total_ratio": report.total_bytes / reference.total_bytes,
        }
        rows.append(row)
    table = pd.DataFrame(rows)
    table = table.sort_values(["total_bytes", "strategy"], ascending=[False, True], kind="mergesort")
    return table.reset_index(drop=True)
