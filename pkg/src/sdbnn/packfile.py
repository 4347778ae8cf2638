"""On-disk formats: resumable checkpoints and 1-bit deployment models.

Both files share one container layout, little-endian throughout:

    magic(4) version(u32) endian_tag(u8 = 0x01) pad(3 zero bytes)
    repeated sections: tag(4) length(u64) payload

Checkpoints (magic SDCK) carry the model spec text, every parameter
(including binary-layer latents), BN running stats, optimizer state and
the metric history; saving, loading and saving again is byte-identical.

Packed models (magic SDBN) carry binary-layer weights only as packed sign
words with the weight shift already folded in: no latent real weights and
no weight-shift factors survive export. Static activation shifts ride
along as per-channel floats and dynamic shift heads as small float blocks.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"SDCK"
PACKED_MAGIC = b"SDBN"
FORMAT_VERSION = 1
_ENDIAN_LITTLE = 0x01

_DTYPES = {0: "<f4", 1: "<f8", 2: "<u8", 3: "<i8", 4: "|u1"}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class FileFormatError(ValueError):
    """Bad magic, unsupported version, or corrupted section structure."""


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(buf: bytes, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    return buf[off : off + n].decode("utf-8"), off + n


def pack_array(arr: np.ndarray) -> bytes:
    dt = np.dtype(arr.dtype).newbyteorder("<") if arr.dtype != np.uint8 else np.dtype("|u1")
    if dt not in _DTYPE_CODES:
        raise FileFormatError(f"unsupported array dtype {arr.dtype}")
    body = np.ascontiguousarray(arr.astype(dt, copy=False)).tobytes()
    head = struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + body


def unpack_array(buf: bytes, off: int) -> tuple[np.ndarray, int]:
    code, ndim = struct.unpack_from("<BB", buf, off)
    off += 2
    shape = struct.unpack_from(f"<{ndim}I", buf, off) if ndim else ()
    off += 4 * ndim
    dt = np.dtype(_DTYPES[code])
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape)
    return arr.copy(), off + count * dt.itemsize


def write_sections(path: Path, magic: bytes, sections: list[tuple[bytes, bytes]],
                   version: int = FORMAT_VERSION):
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<IB3x", version, _ENDIAN_LITTLE))
        for tag, payload in sections:
            if len(tag) != 4:
                raise ValueError(f"section tag must be 4 bytes, got {tag!r}")
            fh.write(tag)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def read_sections(path: Path, magic: bytes) -> tuple[int, dict[bytes, bytes]]:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != magic:
        raise FileFormatError(f"{path}: bad magic (want {magic!r})")
    version, endian = struct.unpack_from("<IB", blob, 4)
    if version > FORMAT_VERSION:
        raise FileFormatError(f"{path}: format version {version} is newer than supported")
    if endian != _ENDIAN_LITTLE:
        raise FileFormatError(f"{path}: unsupported endianness tag {endian}")
    off = 12
    sections: dict[bytes, bytes] = {}
    while off < len(blob):
        if off + 12 > len(blob):
            raise FileFormatError(f"{path}: truncated section header")
        tag = blob[off : off + 4]
        (length,) = struct.unpack_from("<Q", blob, off + 4)
        off += 12
        if off + length > len(blob):
            raise FileFormatError(f"{path}: truncated section {tag!r}")
        sections[tag] = blob[off : off + length]
        off += length
    return version, sections


# -- named-array tables ------------------------------------------------


def pack_named_arrays(items: list[tuple[str, str, np.ndarray]]) -> bytes:
    """[(name, kind, array)] -> bytes; order is preserved."""
    out = [struct.pack("<I", len(items))]
    for name, kind, arr in items:
        out.append(_pack_str(name))
        out.append(_pack_str(kind))
        out.append(pack_array(arr))
    return b"".join(out)


def unpack_named_arrays(buf: bytes) -> list[tuple[str, str, np.ndarray]]:
    (count,) = struct.unpack_from("<I", buf, 0)
    off = 4
    items = []
    for _ in range(count):
        name, off = _unpack_str(buf, off)
        kind, off = _unpack_str(buf, off)
        arr, off = unpack_array(buf, off)
        items.append((name, kind, arr))
    if off != len(buf):
        raise FileFormatError("trailing bytes after named-array table")
    return items


def pack_bit_payloads(items: list[tuple[str, tuple[int, ...], int, np.ndarray]]) -> bytes:
    """[(layer, logical_shape, valid_bits, words u64[R,W])] -> bytes."""
    out = [struct.pack("<I", len(items))]
    for name, shape, valid_bits, words in items:
        out.append(_pack_str(name))
        out.append(struct.pack("<B", len(shape)))
        out.append(struct.pack(f"<{len(shape)}I", *shape))
        out.append(struct.pack("<I", valid_bits))
        out.append(struct.pack("<II", *words.shape))
        out.append(words.astype("<u8", copy=False).tobytes())
    return b"".join(out)


def unpack_bit_payloads(buf: bytes) -> list[tuple[str, tuple[int, ...], int, np.ndarray]]:
    (count,) = struct.unpack_from("<I", buf, 0)
    off = 4
    items = []
    for _ in range(count):
        name, off = _unpack_str(buf, off)
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        valid_bits, rows, wpr = struct.unpack_from("<III", buf, off)
        off += 12
        words = np.frombuffer(buf, dtype="<u8", count=rows * wpr, offset=off).reshape(rows, wpr).copy()
        off += rows * wpr * 8
        items.append((name, tuple(shape), valid_bits, words))
    if off != len(buf):
        raise FileFormatError("trailing bytes after bit-payload table")
    return items
