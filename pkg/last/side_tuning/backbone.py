"""
Frozen pre-LN Vision Transformer used as a standalone feature extractor.

Taps are emitted after the patch embedding (z_0) and after every ``gap``
blocks. The extractor never records an autodiff graph; the same building
blocks are reused differentiably by the full-finetune baseline through
:meth:`ViTWeights.trainable_copy`.
"""
import hashlib
import threading
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

import last.tensor.functional as F
from last.errors import ConfigurationError, ShapeError
from last.tensor.autograd import Parameter, Tensor, as_tensor, no_grad
from last.utils import log
from last.utils.binary import WEIGHTS_MAGIC, read_container, write_container

PRESETS = {
    "toy": dict(depth=4, width=32, heads=4, patch_size=4, image_size=16),
    "vit_b": dict(depth=12, width=768, heads=12, patch_size=16, image_size=224),
    "vit_l": dict(depth=24, width=1024, heads=16, patch_size=16, image_size=224),
    "vit_g": dict(depth=40, width=1536, heads=24, patch_size=14, image_size=224),
}

# truncnorm(-2, 2) has std < 1; samples are rescaled so the configured std is exact.
_TRUNCNORM_STD = float(stats.truncnorm.std(-2.0, 2.0))


@dataclass
class BackboneConfig:
    depth: int = 4
    width: int = 32
    heads: int = 4
    patch_size: int = 4
    image_size: int = 16
    channels: int = 3
    num_registers: int = 1
    mlp_ratio: int = 4
    init_std: float = 0.02
    name: str = "custom"

    def __post_init__(self):
        for field in ("depth", "width", "heads", "patch_size", "image_size", "channels", "mlp_ratio"):
            value = getattr(self, field)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError("backbone %s must be a positive integer, got %r" % (field, value))
        if self.width % self.heads:
            raise ConfigurationError("width %i is not divisible by %i heads" % (self.width, self.heads))
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                "image size %i is not divisible by patch size %i" % (self.image_size, self.patch_size)
            )
        if self.num_registers not in (0, 1):
            raise ConfigurationError("num_registers must be 0 or 1, got %r" % (self.num_registers,))
        if self.init_std <= 0:
            raise ConfigurationError("init_std must be positive, got %r" % (self.init_std,))

    @classmethod
    def preset(cls, name, **overrides):
        if name not in PRESETS:
            raise ConfigurationError(
                "Unrecognised backbone preset %s (valid: %s)" % (name, ", ".join(sorted(PRESETS)))
            )
        values = dict(PRESETS[name])
        values.update({key: value for key, value in overrides.items() if value is not None})
        values.setdefault("name", name)
        return cls(**values)

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self):
        return self.num_patches + self.num_registers

    @property
    def head_width(self):
        return self.width // self.heads

    @property
    def patch_dim(self):
        return self.channels * self.patch_size * self.patch_size

    @property
    def hidden_width(self):
        return self.mlp_ratio * self.width

    @property
    def block_param_count(self):
        d, h = self.width, self.hidden_width
        return 4 * (d * d + d) + 2 * (d * h) + h + d + 4 * d

    @property
    def param_count(self):
        d = self.width
        embed = self.patch_dim * d + d + self.seq_len * d + self.num_registers * d
        return embed + self.depth * self.block_param_count

    def to_dict(self):
        return asdict(self)


@dataclass
class TapSchedule:
    depth: int
    gap: int

    def __post_init__(self):
        if self.gap < 1 or self.depth % self.gap:
            raise ConfigurationError("gap %i does not divide backbone depth %i" % (self.gap, self.depth))

    @property
    def m(self):
        return self.depth // self.gap

    @property
    def boundaries(self):
        """Block counts after which z_1..z_m are taken."""
        return [self.gap * i for i in range(1, self.m + 1)]

    @property
    def tap_count(self):
        return self.m + 1


def _block_names(index):
    prefix = "blocks.%i." % index
    return [
        prefix + name
        for name in (
            "ln1.gamma", "ln1.beta",
            "attn.q.weight", "attn.q.bias",
            "attn.k.weight", "attn.k.bias",
            "attn.v.weight", "attn.v.bias",
            "attn.out.weight", "attn.out.bias",
            "ln2.gamma", "ln2.beta",
            "mlp.fc1.weight", "mlp.fc1.bias",
            "mlp.fc2.weight", "mlp.fc2.bias",
        )
    ]


def parameter_shapes(config):
    """Ordered name -> shape of every backbone parameter."""
    d, h = config.width, config.hidden_width
    shapes = OrderedDict()
    shapes["patch_embed.weight"] = (config.patch_dim, d)
    shapes["patch_embed.bias"] = (d,)
    if config.num_registers:
        shapes["cls_token"] = (d,)
    shapes["pos_embed"] = (config.seq_len, d)
    for index in range(config.depth):
        for name in _block_names(index):
            leaf = name.split(".", 2)[2]
            if leaf.startswith("ln"):
                shapes[name] = (d,)
            elif leaf == "mlp.fc1.weight":
                shapes[name] = (d, h)
            elif leaf == "mlp.fc1.bias":
                shapes[name] = (h,)
            elif leaf == "mlp.fc2.weight":
                shapes[name] = (h, d)
            elif leaf.endswith("weight"):
                shapes[name] = (d, d)
            else:
                shapes[name] = (d,)
    return shapes


class ViTWeights:
    """Named backbone parameters; frozen and read-only unless copied with trainable_copy()."""

    def __init__(self, config, params):
        self.config = config
        self.params = OrderedDict(params)
        expected = parameter_shapes(config)
        if list(expected) != list(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ConfigurationError("weights do not match config: missing %s, unexpected %s" % (missing, extra))
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(
                    "weight %s has shape %s, config expects %s" % (name, self.params[name].shape, shape)
                )

    @classmethod
    def from_arrays(cls, config, arrays, frozen=True):
        params = OrderedDict()
        for name, array in arrays.items():
            data = np.array(array, dtype=np.float64)
            if frozen:
                data.flags.writeable = False
            params[name] = Parameter(data, name=name, frozen=frozen)
        return cls(config, params)

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    def block(self, index):
        """Parameters of block ``index`` keyed by their name inside the block."""
        prefix = "blocks.%i." % index
        return {name[len(prefix):]: self.params[name] for name in _block_names(index)}

    @property
    def frozen(self):
        return all(param.frozen for param in self.params.values())

    @property
    def param_count(self):
        return int(sum(param.size for param in self.params.values()))

    def arrays(self):
        return OrderedDict((name, param.data) for name, param in self.params.items())

    def trainable_copy(self):
        """Independent, writable, trainable copy (full finetuning baseline)."""
        return ViTWeights.from_arrays(self.config, self.arrays(), frozen=False)

    def checksum(self):
        """sha256 over names, shapes and float32 little-endian values."""
        digest = hashlib.sha256()
        for name, param in self.params.items():
            digest.update(name.encode("utf-8"))
            digest.update(repr(tuple(param.shape)).encode("utf-8"))
            digest.update(np.ascontiguousarray(param.data, dtype="<f4").tobytes())
        return digest.hexdigest()


def truncated_normal(rng, shape, std):
    samples = stats.truncnorm.rvs(-2.0, 2.0, size=shape, random_state=rng)
    return samples * (std / _TRUNCNORM_STD)


def init_synthetic(config, seed=0):
    """Deterministic stand-in for pretrained weights.

    Projections, class token and positional embedding are drawn from a normal
    truncated at two standard deviations with std ``config.init_std``; biases
    are zero and layer norms are the identity. Values are rounded to float32
    so that the on-disk container reproduces them exactly.
    """
    rng = np.random.default_rng(seed)
    arrays = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gamma"):
            values = np.ones(shape)
        elif name.endswith(".beta") or name.endswith(".bias"):
            values = np.zeros(shape)
        else:
            values = truncated_normal(rng, shape, config.init_std)
        arrays[name] = values.astype(np.float32).astype(np.float64)
    return ViTWeights.from_arrays(config, arrays)


def save_weights(path, weights):
    write_container(path, WEIGHTS_MAGIC, weights.arrays(), meta={"config": weights.config.to_dict()})


def load_weights(path):
    arrays, meta = read_container(path, WEIGHTS_MAGIC)
    if "config" not in meta:
        raise ConfigurationError("%s carries no backbone config" % path)
    config = BackboneConfig(**meta["config"])
    return ViTWeights.from_arrays(config, arrays)


def unfold_patches(images, patch_size):
    """[..., C, H, W] -> [..., P, C*p*p], patches in row-major grid order."""
    images = np.asarray(images, dtype=np.float64)
    *lead, channels, height, width = images.shape
    rows, cols = height // patch_size, width // patch_size
    grid = images.reshape(tuple(lead) + (channels, rows, patch_size, cols, patch_size))
    order = tuple(range(len(lead))) + tuple(len(lead) + axis for axis in (1, 3, 0, 2, 4))
    grid = grid.transpose(order)
    return grid.reshape(tuple(lead) + (rows * cols, channels * patch_size * patch_size))


def patch_embed(image, weights):
    """Image [C,H,W] (or [B,C,H,W]) -> tokens [L,d] (or [B,L,d]); this output is z_0."""
    config = weights.config
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    expected = (config.channels, config.image_size, config.image_size)
    if data.ndim not in (3, 4) or data.shape[-3:] != expected:
        raise ShapeError("image shape %s does not match backbone input %s" % (data.shape, expected))
    patches = unfold_patches(data, config.patch_size)
    tokens = F.linear(patches, weights["patch_embed.weight"], weights["patch_embed.bias"])
    if config.num_registers:
        cls = F.reshape(weights["cls_token"], (1, config.width))
        if data.ndim == 4:
            cls = F.add(np.zeros((data.shape[0], 1, config.width)), cls)
        tokens = F.concat([cls, tokens], axis=-2)
    return F.add(tokens, weights["pos_embed"])


def mhsa(x, block, heads):
    """Standard multi-head self-attention with output projection W_O."""
    q = F.linear(x, block["attn.q.weight"], block["attn.q.bias"])
    k = F.linear(x, block["attn.k.weight"], block["attn.k.bias"])
    v = F.linear(x, block["attn.v.weight"], block["attn.v.bias"])
    attended = F.multi_head_attention(q, k, v, heads)
    return F.linear(attended, block["attn.out.weight"], block["attn.out.bias"])


def mlp(x, block):
    hidden = F.gelu(F.linear(x, block["mlp.fc1.weight"], block["mlp.fc1.bias"]))
    return F.linear(hidden, block["mlp.fc2.weight"], block["mlp.fc2.bias"])


def transformer_block(x, block, heads):
    """Pre-LN block: x + MHSA(LN(x)), then + FFN(LN(.))."""
    x = as_tensor(x)
    if x.shape[-1] != block["ln1.gamma"].shape[0]:
        raise ShapeError("block input width %i does not match %i" % (x.shape[-1], block["ln1.gamma"].shape[0]))
    x = F.add(x, mhsa(F.layer_norm(x, block["ln1.gamma"], block["ln1.beta"]), block, heads))
    return F.add(x, mlp(F.layer_norm(x, block["ln2.gamma"], block["ln2.beta"]), block))


def _round_taps(tokens, tap_dtype):
    if tap_dtype is None:
        return Tensor(tokens.data.copy())
    return Tensor(tokens.data.astype(tap_dtype).astype(np.float64))


def forward_with_taps(image, weights, schedule, tap_dtype=None):
    """Run every block without recording a graph; return [z_0, ..., z_m].

    With ``tap_dtype`` (e.g. "float32") each tap is rounded to that precision
    and promoted back, which is how the feature cache stores them.
    """
    config = weights.config
    if not isinstance(schedule, TapSchedule):
        schedule = TapSchedule(config.depth, int(schedule))
    if schedule.depth != config.depth:
        raise ConfigurationError(
            "tap schedule depth %i does not match backbone depth %i" % (schedule.depth, config.depth)
        )
    with no_grad():
        x = patch_embed(image, weights)
        taps = [_round_taps(x, tap_dtype)]
        for index in range(config.depth):
            x = transformer_block(x, weights.block(index), config.heads)
            if (index + 1) % schedule.gap == 0:
                taps.append(_round_taps(x, tap_dtype))
    return taps


def forward_tokens(image, weights):
    """Differentiable forward to the final block output (full-finetune baseline)."""
    x = patch_embed(image, weights)
    for index in range(weights.config.depth):
        x = transformer_block(x, weights.block(index), weights.config.heads)
    return x


class Backbone:
    """A frozen extractor: config, weights, and the count of samples it has forwarded."""

    def __init__(self, config=None, weights=None, seed=0, print_times=False):
        if weights is not None:
            config = weights.config
        elif config is None:
            config = BackboneConfig.preset("toy")
        self.config = config
        self.seed = seed
        self.print_times = print_times
        self.timings = dict()
        self.timings["init"] = 0.0
        self.timings["forward"] = 0.0
        self._lock = threading.Lock()
        self._samples_forwarded = 0

        start = time.time()
        self.weights = weights if weights is not None else init_synthetic(config, seed)
        self.timings["init"] = time.time() - start
        if not self.weights.frozen:
            raise ConfigurationError("Backbone weights must be frozen")
        if self.print_times:
            log("Backbone %s ready in %f s" % (self.config.name, self.timings["init"]))

    @classmethod
    def from_file(cls, path, print_times=False):
        return cls(weights=load_weights(path), print_times=print_times)

    @property
    def samples_forwarded(self):
        return self._samples_forwarded

    @property
    def checksum(self):
        if not hasattr(self, "_checksum"):
            self._checksum = self.weights.checksum()
        return self._checksum

    def schedule(self, gap):
        return TapSchedule(self.config.depth, gap)

    def taps(self, image, gap, tap_dtype=None):
        """Taps for one image [C,H,W]; counts as one forward."""
        start = time.time()
        taps = forward_with_taps(image, self.weights, self.schedule(gap), tap_dtype=tap_dtype)
        with self._lock:
            self._samples_forwarded += 1
            self.timings["forward"] += time.time() - start
        return taps

    def batch_taps(self, images, gap, tap_dtype=None):
        """Per-sample forwards stacked to [B, L, d] per tap."""
        per_sample = [self.taps(image, gap, tap_dtype=tap_dtype) for image in images]
        return [
            Tensor(np.stack([sample[i].data for sample in per_sample]))
            for i in range(self.schedule(gap).tap_count)
        ]

    def save(self, path):
        save_weights(path, self.weights)
        log("Saved backbone weights to %s" % path)

    def __repr__(self):
        return "Backbone(%s, N=%i, d=%i, heads=%i)" % (
            self.config.name,
            self.config.depth,
            self.config.width,
            self.config.heads,
        )
