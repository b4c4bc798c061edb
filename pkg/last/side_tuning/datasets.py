"""
Image datasets: the seeded synth-cls generator and the on-disk layout.

On disk a dataset is a directory holding ``labels.csv`` (columns
``sample_id,label,split``) and one ``<sample_id>.bin`` container per image
with a single float32 tensor named ``image`` of shape [C, H, W].
"""
import os
from collections import OrderedDict

import numpy as np
import pandas as pd

from last.errors import ConfigurationError, ShapeError
from last.utils import atomic_write_text, log
from last.utils.binary import IMAGE_MAGIC, read_container, write_container

LABELS_FILE = "labels.csv"
VARIANTS = ("pointer", "parity")
SPLITS = ("train", "eval")


class ImageDataset:
    """Images [n, C, H, W] as float64, integer labels and named splits."""

    def __init__(self, images, labels, sample_ids=None, splits=None, num_classes=None, name="dataset"):
        self.images = np.asarray(images, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeError("images must be [n, C, H, W], got %s" % (self.images.shape,))
        if len(self.labels) != len(self.images):
            raise ShapeError("%i images but %i labels" % (len(self.images), len(self.labels)))
        if sample_ids is None:
            sample_ids = ["%06i" % i for i in range(len(self.images))]
        self.sample_ids = list(sample_ids)
        if splits is None:
            splits = {"train": np.arange(len(self.images)), "eval": np.arange(0)}
        self.splits = {key: np.asarray(value, dtype=np.int64) for key, value in splits.items()}
        self.num_classes = int(num_classes if num_classes is not None else self.labels.max() + 1)
        self.name = name
        self.images.flags.writeable = False

    def __len__(self):
        return len(self.images)

    def __getitem__(self, index):
        return self.images[index], int(self.labels[index])

    def __repr__(self):
        return "ImageDataset(%s, n=%i, classes=%i, image=%s)" % (
            self.name,
            len(self),
            self.num_classes,
            self.image_shape,
        )

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def split_indices(self, split):
        if split not in self.splits:
            raise ConfigurationError("Unknown split %s (valid: %s)" % (split, ", ".join(sorted(self.splits))))
        return self.splits[split]

    def split_of(self):
        """Per-sample split name, in sample order."""
        names = np.array([""] * len(self), dtype=object)
        for split, indices in self.splits.items():
            names[indices] = split
        return names

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        for sample_id, image in zip(self.sample_ids, self.images):
            write_container(
                os.path.join(directory, "%s.bin" % sample_id), IMAGE_MAGIC, OrderedDict(image=image)
            )
        table = pd.DataFrame({"sample_id": self.sample_ids, "label": self.labels, "split": self.split_of()})
        atomic_write_text(os.path.join(directory, LABELS_FILE), table.to_csv(index=False))
        log("Wrote %i images to %s" % (len(self), directory))


def load_dataset(directory, num_classes=None):
    """Read a dataset directory; a missing directory or file raises OSError."""
    labels_path = os.path.join(directory, LABELS_FILE)
    if not os.path.isfile(labels_path):
        raise FileNotFoundError("dataset labels not found: %s" % labels_path)
    table = pd.read_csv(labels_path, dtype={"sample_id": str, "label": np.int64, "split": str})
    images = list()
    for sample_id in table["sample_id"]:
        arrays, _ = read_container(os.path.join(directory, "%s.bin" % sample_id), IMAGE_MAGIC)
        images.append(arrays["image"])
    splits = {split: np.flatnonzero(table["split"].to_numpy() == split) for split in table["split"].unique()}
    return ImageDataset(
        np.stack(images),
        table["label"].to_numpy(),
        sample_ids=list(table["sample_id"]),
        splits=splits,
        num_classes=num_classes,
        name=os.path.basename(os.path.normpath(directory)),
    )


def synth_palette(num_classes, channels=3):
    """Fixed color palette shared by every seed, colors spread over [-1, 1]."""
    rng = np.random.default_rng(12345)
    return rng.uniform(-1.0, 1.0, size=(num_classes, channels))


def make_synth(
    num_classes=4,
    seed=0,
    n_train=800,
    n_eval=200,
    variant="pointer",
    image_size=16,
    patch_size=4,
    channels=3,
    noise=0.05,
    target_patch=5,
):
    """Seeded synth-cls task.

    Every patch is a solid palette color plus Gaussian noise. In the
    ``pointer`` variant the label is the palette index of patch
    ``target_patch``, and all other patches draw from the same palette, so
    statistics pooled over tokens say little about the label. In the
    ``parity`` variant a patch is bright or dark and the label is the number
    of bright patches modulo ``num_classes``.
    """
    if variant not in VARIANTS:
        raise ConfigurationError("Unrecognised synth variant %s (valid: %s)" % (variant, ", ".join(VARIANTS)))
    if not 2 <= num_classes <= 10:
        raise ConfigurationError("synth-cls supports 2 to 10 classes, got %i" % num_classes)
    if image_size % patch_size:
        raise ConfigurationError("image size %i is not divisible by patch size %i" % (image_size, patch_size))
    grid = image_size // patch_size
    num_patches = grid * grid
    if not 0 <= target_patch < num_patches:
        raise ConfigurationError("target patch %i outside %i patches" % (target_patch, num_patches))

    rng = np.random.default_rng(seed)
    count = n_train + n_eval
    if variant == "pointer":
        palette = synth_palette(num_classes, channels)
        colors = rng.integers(0, num_classes, size=(count, num_patches))
        labels = colors[:, target_patch]
        patch_values = palette[colors]
    else:
        bright = rng.integers(0, 2, size=(count, num_patches))
        labels = bright.sum(axis=1) % num_classes
        patch_values = np.where(bright[..., None] == 1, 0.8, -0.8) * np.ones(channels)

    # [n, grid, grid, C] -> [n, C, H, W] with each patch a solid block
    blocks = patch_values.reshape(count, grid, grid, channels).transpose(0, 3, 1, 2)
    images = np.repeat(np.repeat(blocks, patch_size, axis=2), patch_size, axis=3)
    images = images + noise * rng.standard_normal(images.shape)
    images = images.astype(np.float32).astype(np.float64)

    splits = {"train": np.arange(n_train), "eval": np.arange(n_train, count)}
    return ImageDataset(
        images,
        labels,
        splits=splits,
        num_classes=num_classes,
        name="synth-%s-%i" % (variant, seed),
    )
