"""
The trainable side-network: a ladder of low-rank self-attention blocks fed
by backbone taps, bias correction and the classification head.

Block i consumes h_i = u_{i-1} + z_i (h_0 = z_0) and produces u_i. With
``skip_block_zero`` the block after z_0 is omitted and u_0 = z_0. The final
representation u_m is corrected by subtracting z_0 + ... + z_{m-1}.
"""
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

import last.tensor.functional as F
from last.errors import ConfigurationError, ShapeError
from last.side_tuning.backbone import truncated_normal
from last.tensor.autograd import Parameter, Tensor, as_tensor
from last.utils.binary import SIDE_MAGIC, read_container, write_container

MODES = ("attn", "both", "ffn")

_ATTN_LEAVES = (
    "attn.ln.gamma", "attn.ln.beta",
    "attn.down_q.weight", "attn.down_q.bias",
    "attn.down_k.weight", "attn.down_k.bias",
    "attn.down_v.weight", "attn.down_v.bias",
    "attn.up.weight", "attn.up.bias",
)
_FFN_LEAVES = (
    "ffn.ln.gamma", "ffn.ln.beta",
    "ffn.fc1.weight", "ffn.fc1.bias",
    "ffn.fc2.weight", "ffn.fc2.bias",
)
_HEAD_LEAVES = ("head.ln.gamma", "head.ln.beta", "head.weight", "head.bias")


@dataclass
class SideConfig:
    """Hyperparameters of the side-network.

    ``width`` and ``depth`` repeat the backbone's d and N so the config can be
    validated on its own.
    """

    width: int = 32
    depth: int = 4
    gap: int = 2
    stack: int = 2
    rank: int = 16
    n_head: int = 4
    bias_correction: bool = True
    mode: str = "attn"
    ffn_hidden: int = None
    num_classes: int = 4
    skip_block_zero: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        for field in ("width", "depth", "gap", "stack", "rank", "n_head", "num_classes"):
            value = getattr(self, field)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigurationError("side %s must be a positive integer, got %r" % (field, value))
        if self.depth % self.gap:
            raise ConfigurationError("gap %i does not divide backbone depth %i" % (self.gap, self.depth))
        if self.rank % self.n_head:
            raise ConfigurationError("rank %i is not divisible by %i heads" % (self.rank, self.n_head))
        if self.rank >= self.width:
            raise ConfigurationError("rank %i must be smaller than width %i" % (self.rank, self.width))
        if self.mode not in MODES:
            raise ConfigurationError("Unrecognised side mode %s (valid: %s)" % (self.mode, ", ".join(MODES)))
        if self.mode != "attn" and not self.ffn_hidden:
            raise ConfigurationError("side mode %s needs ffn_hidden" % self.mode)
        if self.ffn_hidden is not None and self.ffn_hidden < 1:
            raise ConfigurationError("ffn_hidden must be positive, got %r" % (self.ffn_hidden,))
        if self.init_std <= 0:
            raise ConfigurationError("init_std must be positive, got %r" % (self.init_std,))

    @classmethod
    def for_backbone(cls, backbone_config, **values):
        return cls(width=backbone_config.width, depth=backbone_config.depth, **values)

    @classmethod
    def recommended(cls, backbone_config, num_classes=100, skip_block_zero=False):
        """g=2, T=2, r=16 with 4 heads; g=4, r=32 with 8 heads for the giant backbone."""
        if backbone_config.name == "vit_g":
            values = dict(gap=4, stack=2, rank=32, n_head=8)
        else:
            values = dict(gap=2, stack=2, rank=16, n_head=4)
        return cls.for_backbone(
            backbone_config, num_classes=num_classes, skip_block_zero=skip_block_zero, **values
        )

    @property
    def m(self):
        return self.depth // self.gap

    @property
    def r_head(self):
        return self.rank // self.n_head

    @property
    def tap_count(self):
        return self.m + 1

    @property
    def block_count(self):
        return self.m if self.skip_block_zero else self.m + 1

    @property
    def has_attention(self):
        return self.mode in ("attn", "both")

    @property
    def has_ffn(self):
        return self.mode in ("ffn", "both")

    def to_dict(self):
        return asdict(self)


def _unit_leaves(config):
    leaves = list()
    if config.has_attention:
        leaves.extend(_ATTN_LEAVES)
    if config.has_ffn:
        leaves.extend(_FFN_LEAVES)
    return leaves


def parameter_shapes(config, include_head=True):
    d, r, h = config.width, config.rank, config.ffn_hidden
    local = {
        "ln.gamma": (d,), "ln.beta": (d,),
        "down_q.weight": (d, r), "down_q.bias": (r,),
        "down_k.weight": (d, r), "down_k.bias": (r,),
        "down_v.weight": (d, r), "down_v.bias": (r,),
        "up.weight": (r, d), "up.bias": (d,),
        "fc1.weight": (d, h), "fc1.bias": (h,),
        "fc2.weight": (h, d), "fc2.bias": (d,),
    }
    shapes = OrderedDict()
    for block in range(config.block_count):
        for unit in range(config.stack):
            for leaf in _unit_leaves(config):
                shapes["blocks.%i.%i.%s" % (block, unit, leaf)] = local[leaf.split(".", 1)[1]]
    if include_head:
        shapes.update(head_shapes(d, config.num_classes))
    return shapes


def head_shapes(width, num_classes):
    shapes = OrderedDict()
    shapes["head.ln.gamma"] = (width,)
    shapes["head.ln.beta"] = (width,)
    shapes["head.weight"] = (width, num_classes)
    shapes["head.bias"] = (num_classes,)
    return shapes


class SideState:
    """Parameters of one side-network, owned by exactly one training run."""

    def __init__(self, config, params):
        self.config = config
        self.params = OrderedDict(params)
        expected = parameter_shapes(config)
        if list(expected) != list(self.params):
            raise ConfigurationError(
                "side parameters do not match config (%i expected, %i given)" % (len(expected), len(self.params))
            )
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError("side weight %s has shape %s, expected %s" % (name, self.params[name].shape, shape))

    def __getitem__(self, name):
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def unit(self, block, unit):
        prefix = "blocks.%i.%i." % (block, unit)
        return {name[len(prefix):]: param for name, param in self.params.items() if name.startswith(prefix)}

    def block(self, index):
        return [self.unit(index, unit) for unit in range(self.config.stack)]

    @property
    def head(self):
        return {name[len("head."):]: self.params[name] for name in _HEAD_LEAVES}

    def arrays(self):
        return OrderedDict((name, param.data) for name, param in self.params.items())

    def copy(self):
        return SideState(
            self.config,
            OrderedDict((name, Parameter(p.data.copy(), name=name, frozen=p.frozen)) for name, p in self.params.items()),
        )

    def __repr__(self):
        c = self.config
        return "SideState(g=%i, T=%i, r=%i, n_head=%i, blocks=%i, params=%i)" % (
            c.gap, c.stack, c.rank, c.n_head, c.block_count, count_trainable_params(self),
        )


def _initial_value(rng, name, shape, std):
    if name.endswith(".gamma"):
        return np.ones(shape)
    if name.endswith(".beta") or name.endswith(".bias"):
        return np.zeros(shape)
    return truncated_normal(rng, shape, std)


def init_head(width, num_classes, seed=0, std=0.02):
    """LayerNorm + linear head; weights truncated-normal, bias zero."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return OrderedDict(
        (name, Parameter(_initial_value(rng, name, shape, std), name=name))
        for name, shape in head_shapes(width, num_classes).items()
    )


def init_side(config, seed=0):
    """Random down and up projections (the up projection is not zero-initialised)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        params[name] = Parameter(_initial_value(rng, name, shape, config.init_std), name=name)
    return SideState(config, params)


def lsa_module(x, module, n_head):
    """x + Up(MHSA_r(Down_Q(LN x), Down_K(LN x), Down_V(LN x))); no output projection."""
    y = F.layer_norm(x, module["attn.ln.gamma"], module["attn.ln.beta"])
    q = F.linear(y, module["attn.down_q.weight"], module["attn.down_q.bias"])
    k = F.linear(y, module["attn.down_k.weight"], module["attn.down_k.bias"])
    v = F.linear(y, module["attn.down_v.weight"], module["attn.down_v.bias"])
    attended = F.multi_head_attention(q, k, v, n_head)
    return F.add(x, F.linear(attended, module["attn.up.weight"], module["attn.up.bias"]))


def ffn_module(x, module):
    """x + fc2(GELU(fc1(LN x)))."""
    if "ffn.fc1.weight" not in module:
        raise ConfigurationError("ffn_module called on a side-network without ffn_hidden")
    y = F.layer_norm(x, module["ffn.ln.gamma"], module["ffn.ln.beta"])
    hidden = F.gelu(F.linear(y, module["ffn.fc1.weight"], module["ffn.fc1.bias"]))
    return F.add(x, F.linear(hidden, module["ffn.fc2.weight"], module["ffn.fc2.bias"]))


def lsa_block(x, units, n_head):
    """Apply the T units of a block in order."""
    if not units:
        raise ConfigurationError("an LSA block needs at least one module")
    for module in units:
        if "attn.ln.gamma" in module:
            x = lsa_module(x, module, n_head)
        if "ffn.ln.gamma" in module:
            x = ffn_module(x, module)
    return x


class TapLedger:
    """Left-to-right running sum of the taps already merged into the ladder."""

    def __init__(self):
        self.total = None
        self.count = 0

    def add(self, tap):
        data = tap.data if isinstance(tap, Tensor) else np.asarray(tap, dtype=np.float64)
        self.total = data.copy() if self.total is None else self.total + data
        self.count += 1

    def value(self, like):
        return np.zeros_like(like) if self.total is None else self.total


def correct_bias(u_m, taps):
    """u_m - (z_0 + ... + z_{m-1}); ``taps`` lists z_0..z_{m-1} and are treated as constants."""
    u_m = as_tensor(u_m)
    ledger = TapLedger()
    for tap in taps:
        if tuple(tap.shape) != u_m.shape:
            raise ShapeError("tap shape %s does not match representation %s" % (tuple(tap.shape), u_m.shape))
        ledger.add(tap)
    return F.sub(u_m, Tensor(ledger.value(u_m.data)))


def side_forward(taps, state, bias_correction=None):
    """Run the ladder over z_0..z_m and return the (corrected) representation."""
    config = state.config
    if len(taps) != config.tap_count:
        raise ConfigurationError(
            "side-network with gap %i expects %i taps, got %i" % (config.gap, config.tap_count, len(taps))
        )
    taps = [as_tensor(tap) for tap in taps]
    shape = taps[0].shape
    for tap in taps:
        if tap.shape != shape or shape[-1] != config.width:
            raise ShapeError("taps must all be [..., L, %i], got %s and %s" % (config.width, shape, tap.shape))

    if config.skip_block_zero:
        u = taps[0]
        blocks = iter(range(config.block_count))
    else:
        blocks = iter(range(config.block_count))
        u = lsa_block(taps[0], state.block(next(blocks)), config.n_head)
    for block, tap in zip(blocks, taps[1:]):
        u = lsa_block(F.add(u, tap), state.block(block), config.n_head)

    apply = config.bias_correction if bias_correction is None else bias_correction
    if apply:
        return correct_bias(u, taps[:-1])
    return u


def classify(rep, head):
    """LayerNorm then linear on the class token (position 0) of ``rep``."""
    rep = as_tensor(rep)
    token = F.index(rep, (Ellipsis, 0, slice(None)))
    normed = F.layer_norm(token, head["ln.gamma"], head["ln.beta"])
    return F.linear(normed, head["weight"], head["bias"])


def count_trainable_params(state, include_head=True):
    return int(
        sum(
            param.size
            for name, param in state.params.items()
            if param.requires_grad and (include_head or not name.startswith("head."))
        )
    )


def side_param_count(config, include_head=True):
    """Closed form of count_trainable_params for a fresh side-network."""
    d, r = config.width, config.rank
    per_unit = 0
    if config.has_attention:
        per_unit += 3 * (d * r + r) + (r * d + d) + 2 * d
    if config.has_ffn:
        h = config.ffn_hidden
        per_unit += (d * h + h) + (h * d + d) + 2 * d
    total = config.block_count * config.stack * per_unit
    if include_head:
        total += 2 * d + d * config.num_classes + config.num_classes
    return total


def value_path_rank(state, block=0, unit=0, tol=None):
    """Numerical rank of the A_V @ U composite of one attention module."""
    module = state.unit(block, unit)
    if "attn.down_v.weight" not in module:
        raise ConfigurationError("block %i module %i has no attention path" % (block, unit))
    composite = module["attn.down_v.weight"].data @ module["attn.up.weight"].data
    return int(np.linalg.matrix_rank(composite, tol=tol))


def save_side(path, state):
    write_container(path, SIDE_MAGIC, state.arrays(), meta={"config": state.config.to_dict()})


def load_side(path):
    arrays, meta = read_container(path, SIDE_MAGIC)
    if "config" not in meta:
        raise ConfigurationError("%s carries no side-network config" % path)
    config = SideConfig(**meta["config"])
    params = OrderedDict((name, Parameter(array, name=name)) for name, array in arrays.items())
    return SideState(config, params)
