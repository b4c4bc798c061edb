"""
Flat tensor container shared by backbone weights, side weights and raw
dataset images.

Layout (all integers little-endian)::

    offset 0   6 bytes   magic, b"LASTW\\0" (weights), b"LASTS\\0" (side) or b"LASTI\\0" (image)
    offset 6   uint32    H, byte length of the JSON header
    offset 10  H bytes   UTF-8 JSON header, space padded so that 10 + H is a multiple of 8
    offset 10+H          payload: float32 little-endian tensors, row-major, in header order

The header is ``{"format": 1, "tensors": [{"name", "shape", "offset"}...], "meta": {...}}``
where ``offset`` counts bytes from the start of the payload.
"""
import json
import struct
from collections import OrderedDict

import numpy as np

from last.errors import CacheError
from last.utils import atomic_write_bytes

FORMAT_VERSION = 1
WEIGHTS_MAGIC = b"LASTW\0"
SIDE_MAGIC = b"LASTS\0"
IMAGE_MAGIC = b"LASTI\0"
STORAGE_DTYPE = np.dtype("<f4")


def encode_container(magic, arrays, meta=None):
    if len(magic) != 6:
        raise ValueError("Container magic must be 6 bytes, got %r" % (magic,))
    entries = list()
    offset = 0
    for name, array in arrays.items():
        array = np.asarray(array)
        entries.append({"name": name, "shape": list(array.shape), "offset": offset})
        offset += array.size * STORAGE_DTYPE.itemsize
    header = json.dumps(
        {"format": FORMAT_VERSION, "tensors": entries, "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    header += b" " * (-(10 + len(header)) % 8)

    chunks = [magic, struct.pack("<I", len(header)), header]
    for array in arrays.values():
        chunks.append(np.ascontiguousarray(array, dtype=STORAGE_DTYPE).tobytes())
    return b"".join(chunks)


def write_container(path, magic, arrays, meta=None):
    """Atomically write ``arrays`` (an ordered name -> array mapping)."""
    atomic_write_bytes(path, encode_container(magic, arrays, meta))


def read_container(path, magic):
    """Return ``(arrays, meta)`` with arrays promoted to float64."""
    with open(path, "rb") as handle:
        blob = handle.read()
    if blob[:6] != magic:
        raise CacheError("%s: expected magic %r, found %r" % (path, magic, blob[:6]))
    if len(blob) < 10:
        raise CacheError("%s: truncated header" % path)
    (header_length,) = struct.unpack("<I", blob[6:10])
    try:
        header = json.loads(blob[10:10 + header_length].decode("utf-8"))
    except ValueError as error:
        raise CacheError("%s: unreadable header (%s)" % (path, error))
    if header.get("format") != FORMAT_VERSION:
        raise CacheError("%s: unsupported container format %r" % (path, header.get("format")))

    payload = memoryview(blob)[10 + header_length:]
    arrays = OrderedDict()
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        stop = start + count * STORAGE_DTYPE.itemsize
        if stop > len(payload):
            raise CacheError("%s: payload too short for tensor %s" % (path, entry["name"]))
        values = np.frombuffer(payload[start:stop], dtype=STORAGE_DTYPE)
        arrays[entry["name"]] = values.astype(np.float64).reshape(entry["shape"])
    return arrays, header.get("meta", {})
