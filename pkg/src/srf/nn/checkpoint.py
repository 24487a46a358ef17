"""SRFM model checkpoints.

Layout (little endian):

    magic "SRFM" | u32 version=1
    u32 header_len, UTF-8 JSON {"config": ModelConfig fields incl. the
        normalizer spec, "params": [{"name", "shape"}, ...]}
    parameter tensors as raw float32 in header order
    u32 CRC32 of all preceding bytes

Parameters are stored float32; loading upcasts to float64, so a
save -> load -> save cycle is byte identical.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import (BadMagic, CheckpointMismatch, ChecksumMismatch,
                      MissingNormalizer, TruncatedFile, VersionUnsupported)
from .model import Model, ModelConfig

MAGIC = b"SRFM"
VERSION = 1


def checkpoint_to_bytes(model: Model) -> bytes:
    params = model.parameters()
    header = {
        "config": model.config.to_json(),
        "params": [{"name": k, "shape": list(v.data.shape)}
                   for k, v in params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<I", len(blob)) + blob
    for tensor in params.values():
        out += tensor.data.astype(np.float32).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def checkpoint_from_bytes(data: bytes) -> Model:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic("not an SRFM checkpoint")
    pos = 4
    if len(data) < pos + 8:
        raise TruncatedFile("checkpoint header incomplete")
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != VERSION:
        raise VersionUnsupported(f"SRFM version {version} not supported")
    (header_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) < pos + header_len:
        raise TruncatedFile("checkpoint header truncated")
    header = json.loads(data[pos:pos + header_len].decode("utf-8"))
    pos += header_len
    cfg_json = header.get("config", {})
    if "normalizer" not in cfg_json:
        raise MissingNormalizer("checkpoint lacks a normalizer spec")
    config = ModelConfig.from_json(cfg_json)
    model = Model(config, seed=0)
    params = model.parameters()
    declared = header.get("params", [])
    if [d["name"] for d in declared] != list(params):
        raise CheckpointMismatch("checkpoint parameter names do not match "
                                 "the declared architecture")
    for entry in declared:
        expected = params[entry["name"]].data.shape
        if tuple(entry["shape"]) != expected:
            raise CheckpointMismatch(
                f"parameter {entry['name']}: declared shape "
                f"{tuple(entry['shape'])} != expected {expected}")
    arrays = {}
    for entry in declared:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if len(data) < pos + nbytes:
            raise TruncatedFile(f"parameter {entry['name']} truncated")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
        pos += nbytes
    if len(data) != pos + 4:
        raise TruncatedFile("checkpoint CRC missing or trailing bytes present")
    (crc_stored,) = struct.unpack_from("<I", data, pos)
    crc_actual = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if crc_stored != crc_actual:
        raise ChecksumMismatch(
            f"stored CRC {crc_stored:#010x} != computed {crc_actual:#010x}")
    model.set_parameters(arrays)
    return model


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_to_bytes(model))
    return path


def load_checkpoint(path) -> Model:
    return checkpoint_from_bytes(Path(path).read_bytes())
