"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"TTLM"                      magic
    u32                          format version
    u32                          length of the JSON header in bytes
    JSON header (UTF-8)          model config, vocabulary, optimizer scalars,
                                 tensor count, extra metadata, checksums
    tensor table, repeated:
        u32 name length, name bytes (UTF-8)
        u32 rank, rank x u64 dims
        float32 values, C order

Optimizer moments are stored as ordinary tensors named ``adam.m/<param>``
and ``adam.v/<param>``.

The header's first key is ``header_crc32``: eight hex digits holding the
CRC-32 of the header bytes with those digits set to ``0``.  ``tensor_crc32``
covers the tensor table.  Together they catch any single corrupted byte.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import Model, ModelConfig, build_model
from .training import Adam, Vocabulary

MAGIC = b"TTLM"
VERSION = 1
_CRC_PREFIX = b'{"header_crc32": "'
_CRC_SPAN = slice(len(_CRC_PREFIX), len(_CRC_PREFIX) + 8)
_HEADER_KEYS = {"header_crc32", "meta", "model_config", "n_tensors", "optimizer", "tensor_crc32", "vocab"}


@dataclass
class Checkpoint:
    model: Model
    optimizer: Adam | None
    vocab: Vocabulary | None = None
    meta: dict = field(default_factory=dict)


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
    head += b"".join(struct.pack("<Q", n) for n in arr.shape)
    return head + arr.tobytes()


def encode_checkpoint(model: Model, optimizer: Adam | None = None,
                      vocab: Vocabulary | None = None, meta: dict | None = None) -> bytes:
    tensors = dict(model.params)
    opt = None
    if optimizer is not None:
        opt = {"beta1": optimizer.beta1, "beta2": optimizer.beta2,
               "eps": optimizer.eps, "step": optimizer.step}
        for name in sorted(optimizer.m):
            tensors[f"adam.m/{name}"] = optimizer.m[name]
            tensors[f"adam.v/{name}"] = optimizer.v[name]
    table = b"".join(_tensor_record(k, v) for k, v in tensors.items())
    header = {
        "header_crc32": "0" * 8,
        "model_config": model.config.to_dict(),
        "optimizer": opt,
        "vocab": vocab.to_dict() if vocab is not None else None,
        "meta": meta or {},
        "n_tensors": len(tensors),
        "tensor_crc32": zlib.crc32(table),
    }
    blob = seal_header(header)
    return b"".join([MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob, table])


def seal_header(header: dict) -> bytes:
    """Serialize a header dict and stamp its CRC-32 into ``header_crc32``."""
    blob = bytearray(json.dumps({**header, "header_crc32": "0" * 8},
                                sort_keys=True, ensure_ascii=False).encode("utf-8"))
    assert blob.startswith(_CRC_PREFIX)
    blob[_CRC_SPAN] = b"%08x" % zlib.crc32(blob)
    return bytes(blob)


def save_checkpoint(path, model: Model, optimizer: Adam | None = None,
                    vocab: Vocabulary | None = None, meta: dict | None = None) -> None:
    data = encode_checkpoint(model, optimizer, vocab, meta)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"file truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what):
        return struct.unpack("<Q", self.take(8, what))[0]


def decode_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("magic: not a TTLM checkpoint")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"version: unsupported format version {version}")
    n = r.u32("header length")
    raw = r.take(n, "header")
    stored = raw[_CRC_SPAN]
    if not raw.startswith(_CRC_PREFIX) or len(raw) < _CRC_SPAN.stop:
        raise FormatError("header: checksum field missing")
    zeroed = raw[:_CRC_SPAN.start] + b"0" * 8 + raw[_CRC_SPAN.stop:]
    if stored != b"%08x" % zlib.crc32(zeroed):
        raise FormatError("header: checksum mismatch (header bytes corrupted)")
    try:
        header = json.loads(raw.decode("utf-8"))
        extra = set(header) ^ _HEADER_KEYS
        if extra:
            raise ValueError(f"unexpected or missing keys {sorted(extra)}")
        cfg = ModelConfig.from_dict(header["model_config"])
        n_tensors = int(header["n_tensors"])
    except Exception as exc:
        raise FormatError(f"header: cannot parse JSON header ({exc})") from exc
    table_start = r.pos
    tensors = {}
    for _ in range(n_tensors):
        name = r.take(r.u32("tensor name length"), "tensor name").decode("utf-8", "replace")
        rank = r.u32(f"rank of {name}")
        if rank > 8:
            raise FormatError(f"{name}: implausible rank {rank}")
        shape = tuple(r.u64(f"dims of {name}") for _ in range(rank))
        count = math.prod(shape)
        if 4 * count > len(data) - r.pos:
            raise FormatError(f"file truncated or corrupt: {name} shape {shape} exceeds remaining bytes")
        raw = r.take(4 * count, f"values of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(data):
        raise FormatError(f"tensor table: {len(data) - r.pos} trailing bytes")
    if zlib.crc32(data[table_start:]) != header["tensor_crc32"]:
        raise FormatError("tensor table: checksum mismatch (tensor bytes corrupted)")

    expected = build_model(cfg).params
    params = {}
    for name, ref in expected.items():
        if name not in tensors:
            raise FormatError(f"{name}: missing from tensor table")
        if tensors[name].shape != ref.shape:
            raise FormatError(f"{name}: shape {tensors[name].shape} disagrees with "
                              f"config-implied {ref.shape}")
        params[name] = tensors[name]
    model = Model(cfg, params)

    optimizer = None
    if header.get("optimizer"):
        o = header["optimizer"]
        optimizer = Adam(o["beta1"], o["beta2"], o["eps"], int(o["step"]))
        for name in params:
            if f"adam.m/{name}" in tensors:
                for key, store in (("m", optimizer.m), ("v", optimizer.v)):
                    arr = tensors[f"adam.{key}/{name}"]
                    if arr.shape != params[name].shape:
                        raise FormatError(f"adam.{key}/{name}: shape mismatch")
                    store[name] = arr
    vocab = Vocabulary.from_dict(header["vocab"]) if header.get("vocab") else None
    return Checkpoint(model, optimizer, vocab, header.get("meta", {}))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
