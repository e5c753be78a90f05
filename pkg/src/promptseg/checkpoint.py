"""Binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"PMPC"
    version u32      currently 1
    count   u32      number of tensors
    per tensor:
        name_len u16, name UTF-8 bytes,
        rank u8, extents u32 each,
        payload: float64 little-endian values (row-major)
    checksum u64     sum of the concatenated payload bytes read as
                     little-endian u64 words, modulo 2^64

Round trips are bit-exact; the checksum is verified on load and a mismatch
raises `ChecksumError`.  Next to each checkpoint a `<path>.config` sidecar
echoes the effective run configuration as parseable `key = value` lines.
"""

from __future__ import annotations

import struct

import numpy as np

from . import autodiff as ad
from .errors import ChecksumError, ConfigError

MAGIC = b"PMPC"
VERSION = 1


def _word_checksum(payload):
    words = np.frombuffer(payload, dtype="<u8")
    return int(words.sum(dtype=np.uint64))


def save(path, tensors):
    """Write named tensors (dict preserving order) to `path`."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    payloads = []
    for name, tensor in tensors.items():
        arr = tensor.data if isinstance(tensor, ad.Tensor) else np.asarray(tensor)
        arr = np.asarray(arr, dtype=np.float64)
        raw = arr.astype("<f8").tobytes()  # C-order copy, explicit endianness
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(raw)
        payloads.append(raw)
    checksum = _word_checksum(b"".join(payloads))
    chunks.append(struct.pack("<Q", checksum))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load(path):
    """Read a checkpoint back into an ordered dict of numpy arrays."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ChecksumError(f"{path}: bad magic (not a checkpoint)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ChecksumError(f"{path}: unsupported format version {version}")
    pos = 12
    out = {}
    payloads = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        raw = data[pos:pos + 8 * n]
        if len(raw) != 8 * n:
            raise ChecksumError(f"{path}: truncated payload for tensor {name!r}")
        pos += 8 * n
        out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        payloads.append(raw)
    if pos + 8 > len(data):
        raise ChecksumError(f"{path}: missing trailing checksum")
    (stored,) = struct.unpack_from("<Q", data, pos)
    actual = _word_checksum(b"".join(payloads))
    if stored != actual:
        raise ChecksumError(f"{path}: checksum mismatch "
                            f"(stored {stored:#x}, computed {actual:#x})")
    return out


def save_with_config(path, tensors, cfg):
    """Checkpoint plus its `<path>.config` sidecar echoing the run config."""
    save(path, tensors)
    with open(str(path) + ".config", "w", encoding="utf-8") as fh:
        fh.write("\n".join(cfg.echo_lines()) + "\n")


def load_params(path, requires_grad=True):
    """Load tensors back as autodiff parameters (same name order)."""
    return {name: ad.Tensor(arr, requires_grad=requires_grad)
            for name, arr in load(path).items()}


def split_bundle_arrays(arrays):
    """Split a combined checkpoint into (model, frozen, text-table) parts."""
    model, frozen, table = {}, {}, None
    for name, arr in arrays.items():
        if name.startswith("clip."):
            frozen[name] = arr
        elif name == "text.table":
            table = arr
        else:
            model[name] = arr
    if table is None:
        raise ConfigError("checkpoint is missing the frozen text table")
    return model, frozen, table
