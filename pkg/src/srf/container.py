"""SRF1 binary container for radiation fields.

Layout (little endian):

    magic "SRF1" | u32 version=1 | u32 dims[3] | f32 voxel_extent[3]
    u8 channel_count
    per channel: u8 name_len, UTF-8 name,
                 fluence f32[N], spectra f32[N*32], rel_error f32[N]
    geometry u8[N]
    u32 metadata_len, UTF-8 JSON {direction, tube_distance, beam_shape,
                                  tube_spectrum}
    u32 CRC32 of all preceding bytes

N = dims[0]*dims[1]*dims[2]; voxel arrays are stored x-fastest, spectra
with the 32 bins contiguous per voxel.  Read/write round-trips are bit
identical.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from . import spectra
from .errors import (BadMagic, ChecksumMismatch, FormatError, TruncatedFile,
                     VersionUnsupported)
from .field import BeamParams, FieldChannel, RadiationField

MAGIC = b"SRF1"
VERSION = 1


def _grid_to_bytes(arr: np.ndarray) -> bytes:
    # x-fastest == Fortran ravel of the (nx, ny, nz[, bins]) array with the
    # bin axis, when present, moved in front so it stays innermost.
    if arr.ndim == 4:
        arr = np.transpose(arr, (3, 0, 1, 2))
    return np.asfortranarray(arr).tobytes(order="F")


def _grid_from_bytes(buf: bytes, dims, bins: int | None, dtype) -> np.ndarray:
    if bins is None:
        arr = np.frombuffer(buf, dtype=dtype).reshape(dims, order="F")
    else:
        arr = np.frombuffer(buf, dtype=dtype).reshape((bins,) + tuple(dims), order="F")
        arr = np.transpose(arr, (1, 2, 3, 0))
    return np.ascontiguousarray(arr)


def field_to_bytes(field: RadiationField) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<3I", *field.dims)
    out += struct.pack("<3f", *field.voxel_extent)
    out += struct.pack("<B", len(field.channels))
    for name, ch in field.channels.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 255:
            raise FormatError(f"channel name too long: {name!r}")
        out += struct.pack("<B", len(encoded)) + encoded
        out += _grid_to_bytes(ch.fluence)
        out += _grid_to_bytes(ch.spectra)
        out += _grid_to_bytes(ch.rel_error)
    out += _grid_to_bytes(field.geometry.astype(np.uint8))
    meta = json.dumps(field.meta.to_json(), sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(meta)) + meta
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(
                f"file ends at byte {len(self.data)}, needed {self.pos + n}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def field_from_bytes(data: bytes) -> RadiationField:
    """Decode a container.

    Structure is walked first (magic, version, segment bounds), then the
    CRC is verified, and only then are channels constructed -- so a
    corrupted payload reports ChecksumMismatch rather than whatever
    content validation it happens to break.
    """
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic("not an SRF1 file")
    cur = _Cursor(data)
    cur.take(4)
    (version,) = cur.unpack("<I")
    if version != VERSION:
        raise VersionUnsupported(f"SRF1 version {version} not supported")
    dims = cur.unpack("<3I")
    extent = cur.unpack("<3f")
    n = int(dims[0] * dims[1] * dims[2])
    (n_channels,) = cur.unpack("<B")
    segments = []     # (name, fluence_bytes, spectra_bytes, rel_bytes)
    for _ in range(n_channels):
        (name_len,) = cur.unpack("<B")
        name = cur.take(name_len).decode("utf-8")
        segments.append((name,
                         cur.take(4 * n),
                         cur.take(4 * n * spectra.FIELD_BINS),
                         cur.take(4 * n)))
    geometry_bytes = cur.take(n)
    (meta_len,) = cur.unpack("<I")
    meta_bytes = cur.take(meta_len)
    (crc_stored,) = cur.unpack("<I")
    if cur.pos != len(data):
        raise FormatError(f"{len(data) - cur.pos} trailing bytes after CRC")
    crc_actual = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if crc_stored != crc_actual:
        raise ChecksumMismatch(
            f"stored CRC {crc_stored:#010x} != computed {crc_actual:#010x}")

    channels = {}
    for name, flu_b, spec_b, rel_b in segments:
        channels[name] = FieldChannel(
            _grid_from_bytes(flu_b, dims, None, np.float32),
            _grid_from_bytes(spec_b, dims, spectra.FIELD_BINS, np.float32),
            _grid_from_bytes(rel_b, dims, None, np.float32))
    geometry = _grid_from_bytes(geometry_bytes, dims, None, np.uint8).astype(bool)
    meta = BeamParams.from_json(json.loads(meta_bytes.decode("utf-8")))
    return RadiationField(dims, extent, channels, geometry, meta)


def write_field(field: RadiationField, path) -> Path:
    path = Path(path)
    path.write_bytes(field_to_bytes(field))
    return path


def read_field(path) -> RadiationField:
    return field_from_bytes(Path(path).read_bytes())
