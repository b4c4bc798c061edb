"""
Run configuration: a JSON document with the sections backbone, side, train,
cache, sweep and memory. Every field has a default, so ``{}`` is valid;
unknown sections and keys are rejected by name.
"""
import dataclasses
import itertools
import json
from dataclasses import dataclass, field

from last.errors import ConfigurationError
from last.side_tuning.backbone import PRESETS, BackboneConfig
from last.side_tuning.side_network import SideConfig


@dataclass
class BackboneSection:
    preset: str = "toy"
    depth: int = None
    width: int = None
    heads: int = None
    patch_size: int = None
    image_size: int = None
    seed: int = 0
    weights: str = None

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigurationError(
                "Unrecognised backbone preset %s (valid: %s)" % (self.preset, ", ".join(sorted(PRESETS)))
            )

    def build(self, depth=None):
        return BackboneConfig.preset(
            self.preset,
            depth=depth if depth is not None else self.depth,
            width=self.width,
            heads=self.heads,
            patch_size=self.patch_size,
            image_size=self.image_size,
        )


@dataclass
class SideSection:
    gap: int = 2
    stack: int = 2
    rank: int = 16
    n_head: int = 4
    bias_correction: bool = True
    mode: str = "attn"
    ffn_hidden: int = None
    num_classes: int = None
    skip_block_zero: bool = False
    init_std: float = 0.02

    def build(self, backbone_config, num_classes=None, **changes):
        values = dataclasses.asdict(self)
        values["num_classes"] = num_classes if self.num_classes is None else self.num_classes
        if values["num_classes"] is None:
            raise ConfigurationError("side.num_classes is unset and no dataset provides it")
        values.update(changes)
        return SideConfig.for_backbone(backbone_config, **values)


@dataclass
class TrainSection:
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError(
                "train needs lr >= 0, epochs >= 0 and batch_size >= 1, got %r, %r, %r"
                % (self.lr, self.epochs, self.batch_size)
            )


@dataclass
class CacheSection:
    path: str = "cache"
    dataset: str = "data"
    gap: int = 1

    def __post_init__(self):
        if self.gap < 1:
            raise ConfigurationError("cache.gap must be positive, got %r" % (self.gap,))


@dataclass
class SweepSection:
    gaps: list = field(default_factory=lambda: [1, 2])
    stacks: list = field(default_factory=lambda: [1, 2, 3])
    ranks: list = None
    n_heads: list = None
    seeds: list = field(default_factory=lambda: [0])
    concurrency: int = None

    def __post_init__(self):
        for name in ("gaps", "stacks", "ranks", "n_heads", "seeds"):
            value = getattr(self, name)
            if value is not None and (not isinstance(value, list) or not value):
                raise ConfigurationError("sweep.%s must be a non-empty list, got %r" % (name, value))


@dataclass
class MemorySection:
    batch_size: int = 32
    seq_len: int = None
    dtype_bytes: int = 4
    num_classes: int = 100
    lora_rank: int = 8
    prompt_tokens: int = 10
    reduction: int = 8
    taps: int = 6
    live: bool = False

    def __post_init__(self):
        if self.taps < 1:
            raise ConfigurationError("memory.taps must be positive, got %r" % (self.taps,))


_ACCEPTED = {
    int: (int,),
    float: (int, float),
    bool: (bool,),
    str: (str,),
    list: (list,),
}


def check_types(name, section_cls, values):
    """Reject values whose JSON type does not match the field; None only where it is the default."""
    for f in dataclasses.fields(section_cls):
        if f.name not in values:
            continue
        value = values[f.name]
        if value is None and f.default is None:
            continue
        accepted = _ACCEPTED[f.type]
        if isinstance(value, bool) and bool not in accepted or not isinstance(value, accepted):
            raise ConfigurationError(
                "config key %s.%s must be %s, got %r" % (name, f.name, f.type.__name__, value)
            )


SECTIONS = {
    "backbone": BackboneSection,
    "side": SideSection,
    "train": TrainSection,
    "cache": CacheSection,
    "sweep": SweepSection,
    "memory": MemorySection,
}


@dataclass
class RunConfig:
    backbone: BackboneSection = field(default_factory=BackboneSection)
    side: SideSection = field(default_factory=SideSection)
    train: TrainSection = field(default_factory=TrainSection)
    cache: CacheSection = field(default_factory=CacheSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    memory: MemorySection = field(default_factory=MemorySection)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a JSON object, got %s" % type(data).__name__)
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigurationError(
                "Unknown config section %s (valid: %s)" % (", ".join(unknown), ", ".join(SECTIONS))
            )
        sections = dict()
        for name, section_cls in SECTIONS.items():
            values = data.get(name, {})
            if not isinstance(values, dict):
                raise ConfigurationError("config section %s must be an object" % name)
            known = {f.name for f in dataclasses.fields(section_cls)}
            extra = sorted(set(values) - known)
            if extra:
                raise ConfigurationError("Unknown key %s in config section %s" % (", ".join(extra), name))
            check_types(name, section_cls, values)
            try:
                sections[name] = section_cls(**values)
            except TypeError as error:
                raise ConfigurationError("config section %s: %s" % (name, error))
        return cls(**sections)

    @classmethod
    def from_json(cls, path):
        with open(path, "r") as handle:
            try:
                data = json.load(handle)
            except ValueError as error:
                raise ConfigurationError("%s is not valid JSON (%s)" % (path, error))
        return cls.from_dict(data)

    def to_dict(self):
        return dataclasses.asdict(self)

    def side_config(self, backbone_config, num_classes=None, **changes):
        return self.side.build(backbone_config, num_classes=num_classes, **changes)

    def sweep_configs(self, backbone_config, num_classes=None):
        """Cartesian product of the sweep lists over the side section."""
        ranks = self.sweep.ranks or [self.side.rank]
        n_heads = self.sweep.n_heads or [self.side.n_head]
        configs = list()
        for gap, stack, rank, n_head in itertools.product(self.sweep.gaps, self.sweep.stacks, ranks, n_heads):
            configs.append(
                self.side_config(backbone_config, num_classes=num_classes, gap=gap, stack=stack, rank=rank,
                                 n_head=n_head)
            )
        return configs
