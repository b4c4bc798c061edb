"""
On-disk cache of backbone taps.

A cache directory holds ``manifest.json`` and ``records.bin``. The records
file starts with the 6-byte magic ``b"LASTC\\0"`` and a little-endian uint16
format version, followed by one fixed-stride record per sample: float32
little-endian taps laid out as [tap_count, L, d]. Record ``i`` therefore
starts at byte ``8 + i * record_stride``.

The manifest is written before any record (``complete: false``) and
rewritten with the records checksum once the last record is on disk, so an
interrupted extraction can be resumed.
"""
import json
import os
import struct
import time

import numpy as np

from last.errors import CacheError, ConfigurationError
from last.side_tuning.backbone import BackboneConfig
from last.tensor.autograd import Tensor
from last.utils import atomic_write_text, log, sha256_file

CACHE_MAGIC = b"LASTC\0"
CACHE_FORMAT_VERSION = 1
HEADER_BYTES = len(CACHE_MAGIC) + 2
MANIFEST_FILE = "manifest.json"
RECORDS_FILE = "records.bin"
TAP_DTYPE = np.dtype("<f4")


def _manifest_path(path):
    return os.path.join(path, MANIFEST_FILE)


def _write_manifest(path, manifest):
    atomic_write_text(_manifest_path(path), json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def read_manifest(path):
    manifest_path = _manifest_path(path)
    if not os.path.isfile(manifest_path):
        raise FileNotFoundError("cache manifest not found: %s" % manifest_path)
    with open(manifest_path, "r") as handle:
        try:
            manifest = json.load(handle)
        except ValueError as error:
            raise CacheError("%s: unreadable manifest (%s)" % (manifest_path, error))
    if manifest.get("format_version") != CACHE_FORMAT_VERSION:
        raise CacheError("%s: unsupported cache format %r" % (manifest_path, manifest.get("format_version")))
    return manifest


def build_manifest(dataset, backbone, gap):
    schedule = backbone.schedule(gap)
    config = backbone.config
    tap_shape = [config.seq_len, config.width]
    return {
        "format_version": CACHE_FORMAT_VERSION,
        "backbone_checksum": backbone.checksum,
        "backbone": config.to_dict(),
        "gap": gap,
        "sample_count": len(dataset),
        "tap_count": schedule.tap_count,
        "tap_shape": tap_shape,
        "dtype": TAP_DTYPE.str,
        "num_classes": dataset.num_classes,
        "labels": [int(label) for label in dataset.labels],
        "sample_ids": list(dataset.sample_ids),
        "splits": {name: [int(i) for i in indices] for name, indices in sorted(dataset.splits.items())},
        "record_stride": schedule.tap_count * tap_shape[0] * tap_shape[1] * TAP_DTYPE.itemsize,
        "records_file": RECORDS_FILE,
        "records_sha256": None,
        "complete": False,
    }


def _same_inputs(existing, manifest):
    keys = ("backbone", "gap", "sample_count", "tap_count", "tap_shape", "dtype", "labels", "sample_ids", "splits")
    return all(existing.get(key) == manifest[key] for key in keys)


def _records_on_disk(records_path, stride):
    if not os.path.isfile(records_path):
        return 0
    size = os.path.getsize(records_path)
    if size < HEADER_BYTES:
        return 0
    return (size - HEADER_BYTES) // stride


def extract(dataset, backbone, gap, path, print_times=False):
    """Forward every sample once and persist its taps; returns the opened FeatureCache.

    Re-running on a complete cache built from the same backbone and dataset
    does no forward passes. A partial cache from the same inputs is resumed.
    A cache from a different backbone is refused with CacheError.
    """
    start = time.time()
    manifest = build_manifest(dataset, backbone, gap)
    records_path = os.path.join(path, RECORDS_FILE)
    stride = manifest["record_stride"]
    done = 0

    if os.path.isfile(_manifest_path(path)):
        existing = read_manifest(path)
        if existing.get("backbone_checksum") != manifest["backbone_checksum"]:
            raise CacheError(
                "cache at %s was extracted with backbone %s, not %s; refusing to resume"
                % (path, existing.get("backbone_checksum"), manifest["backbone_checksum"])
            )
        if not _same_inputs(existing, manifest):
            raise CacheError("cache at %s was built from a different dataset or gap; refusing to resume" % path)
        if existing.get("complete"):
            if not os.path.isfile(records_path) or existing.get("records_sha256") != sha256_file(records_path):
                raise CacheError("cache at %s is marked complete but its records do not match the manifest" % path)
            log("cache up-to-date at %s (%i samples)" % (path, manifest["sample_count"]))
            cache = FeatureCache(path)
            cache.up_to_date = True
            return cache
        done = _records_on_disk(records_path, stride)
        log("Resuming extraction at sample %i of %i" % (done, manifest["sample_count"]), level="debug")
    else:
        os.makedirs(path, exist_ok=True)
        _write_manifest(path, manifest)

    mode = "r+b" if done else "wb"
    with open(records_path, mode) as handle:
        if done:
            handle.truncate(HEADER_BYTES + done * stride)
            handle.seek(0, os.SEEK_END)
        else:
            handle.write(CACHE_MAGIC + struct.pack("<H", CACHE_FORMAT_VERSION))
        for index in range(done, len(dataset)):
            sample_id = dataset.sample_ids[index]
            image, _ = dataset[index]
            taps = backbone.taps(image, gap, tap_dtype=TAP_DTYPE)
            record = np.stack([tap.data for tap in taps]).astype(TAP_DTYPE)
            try:
                handle.write(record.tobytes())
            except OSError as error:
                raise CacheError("failed to write record: %s" % error, sample_id=sample_id)
        try:
            handle.flush()
            os.fsync(handle.fileno())
        except OSError as error:
            raise CacheError("failed to flush records: %s" % error, sample_id=dataset.sample_ids[-1])

    manifest["records_sha256"] = sha256_file(records_path)
    manifest["complete"] = True
    _write_manifest(path, manifest)
    elapsed = time.time() - start
    if print_times:
        log("Extracted %i samples in %f s" % (len(dataset) - done, elapsed))
    cache = FeatureCache(path)
    cache.timings["extract"] = elapsed
    return cache


class FeatureCache:
    """Read-only view of a complete cache; safe to share between threads."""

    def __init__(self, path, verify=False):
        self.path = path
        self.manifest = read_manifest(path)
        self.up_to_date = False
        self.timings = dict()
        if not self.manifest.get("complete"):
            raise CacheError("cache at %s is incomplete; run extract again to resume" % path)
        self.records_path = os.path.join(path, self.manifest["records_file"])
        if not os.path.isfile(self.records_path):
            raise FileNotFoundError("cache records not found: %s" % self.records_path)
        with open(self.records_path, "rb") as handle:
            header = handle.read(HEADER_BYTES)
        if header[: len(CACHE_MAGIC)] != CACHE_MAGIC:
            raise CacheError("%s: expected magic %r, found %r" % (self.records_path, CACHE_MAGIC, header[:6]))
        (version,) = struct.unpack("<H", header[len(CACHE_MAGIC):HEADER_BYTES])
        if version != CACHE_FORMAT_VERSION:
            raise CacheError("%s: unsupported record format %i" % (self.records_path, version))
        expected = HEADER_BYTES + self.sample_count * self.manifest["record_stride"]
        actual = os.path.getsize(self.records_path)
        if actual != expected:
            missing = (expected - actual) // self.manifest["record_stride"]
            raise CacheError(
                "%s: %i bytes on disk, %i expected" % (self.records_path, actual, expected),
                sample_id=self.manifest["sample_ids"][max(self.sample_count - missing, 0)]
                if 0 < missing <= self.sample_count
                else None,
            )
        if verify:
            self.verify()
        self._records = np.memmap(
            self.records_path,
            dtype=np.dtype(self.manifest["dtype"]),
            mode="r",
            offset=HEADER_BYTES,
            shape=(self.sample_count, self.tap_count) + self.tap_shape,
        )
        self.labels = np.asarray(self.manifest["labels"], dtype=np.int64)
        self.labels.flags.writeable = False

    def __len__(self):
        return self.sample_count

    def __repr__(self):
        return "FeatureCache(%s, samples=%i, gap=%i, taps=%i)" % (
            self.path,
            self.sample_count,
            self.gap,
            self.tap_count,
        )

    @property
    def sample_count(self):
        return self.manifest["sample_count"]

    @property
    def gap(self):
        return self.manifest["gap"]

    @property
    def tap_count(self):
        return self.manifest["tap_count"]

    @property
    def tap_shape(self):
        return tuple(self.manifest["tap_shape"])

    @property
    def checksum(self):
        return self.manifest["backbone_checksum"]

    @property
    def num_classes(self):
        return self.manifest["num_classes"]

    @property
    def backbone_config(self):
        return BackboneConfig(**self.manifest["backbone"])

    @property
    def byte_size(self):
        return os.path.getsize(self.records_path)

    def verify(self):
        digest = sha256_file(self.records_path)
        if digest != self.manifest["records_sha256"]:
            raise CacheError("%s: records checksum %s does not match manifest" % (self.records_path, digest))

    def split_indices(self, split):
        splits = self.manifest["splits"]
        if split not in splits:
            raise ConfigurationError("Unknown split %s (valid: %s)" % (split, ", ".join(sorted(splits))))
        return np.asarray(splits[split], dtype=np.int64)

    def tap_indices(self, gap=None):
        """Positions of z_0..z_m for a run at ``gap`` (a multiple of the cache gap)."""
        gap = self.gap if gap is None else gap
        depth = self.manifest["backbone"]["depth"]
        if gap < 1 or depth % gap or gap % self.gap:
            raise ConfigurationError(
                "gap %i cannot be read from a cache extracted at gap %i (depth %i)" % (gap, self.gap, depth)
            )
        return list(range(0, self.tap_count, gap // self.gap))

    def check_compatible(self, side_config, backbone_checksum=None):
        self.tap_indices(side_config.gap)
        if side_config.width != self.tap_shape[1] or side_config.depth != self.manifest["backbone"]["depth"]:
            raise ConfigurationError(
                "side-network built for d=%i, N=%i; cache holds d=%i, N=%i"
                % (side_config.width, side_config.depth, self.tap_shape[1], self.manifest["backbone"]["depth"])
            )
        if backbone_checksum is not None and backbone_checksum != self.checksum:
            raise CacheError("cache %s does not belong to backbone %s" % (self.path, backbone_checksum))

    def load_batch(self, indices, gap=None):
        """Taps [B, L, d] (float64, read-only) for each of z_0..z_m, plus labels."""
        indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
        bad = (indices < 0) | (indices >= self.sample_count)
        if np.any(bad):
            raise IndexError("cache index %i out of range for %i samples" % (indices[bad][0], self.sample_count))
        records = self._records[indices][:, self.tap_indices(gap)]
        taps = list()
        for position in range(records.shape[1]):
            data = records[:, position].astype(np.float64)
            data.flags.writeable = False
            taps.append(Tensor(data))
        labels = self.labels[indices]
        labels.flags.writeable = False
        return taps, labels


def open_cache(path, verify=False):
    return FeatureCache(path, verify=verify)


def load_batch(cache, indices, gap=None):
    return cache.load_batch(indices, gap=gap)
