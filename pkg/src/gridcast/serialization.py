"""Binary parameter container.

Layout, all little-endian:
    magic    4 bytes  b"LMTW"
    version  u32      currently 1
    count    u32      number of parameters
    then per parameter, sorted by name:
    name_len u32
    name     UTF-8 bytes
    rank     u32
    extents  rank * u64
    values   prod(extents) * f64, C order

Round-trips are bitwise: save(load(b)) == b for any container this module
produced.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"LMTW"
VERSION = 1


class ContainerError(ValueError):
    """Malformed or truncated parameter container."""


def dump_params(params: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name in sorted(params):
        # np.ascontiguousarray promotes rank 0 to rank 1; np.array does not
        arr = np.array(params[name], dtype=np.float64, order="C", copy=None)
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        out.append(arr.tobytes())
    return b"".join(out)


def _need(buf: bytes, off: int, n: int, what: str) -> int:
    if off + n > len(buf):
        raise ContainerError(f"truncated container: expected {n} bytes for {what} at offset {off}")
    return off + n


def load_params(buf: bytes) -> dict[str, np.ndarray]:
    off = _need(buf, 0, 4, "magic")
    if buf[:4] != MAGIC:
        raise ContainerError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    off2 = _need(buf, off, 8, "header")
    version, count = struct.unpack_from("<II", buf, off)
    off = off2
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        off2 = _need(buf, off, 4, "name length")
        (nlen,) = struct.unpack_from("<I", buf, off)
        off = _need(buf, off2, nlen, "name")
        name = buf[off2:off].decode("utf-8")
        off2 = _need(buf, off, 4, "rank")
        (rank,) = struct.unpack_from("<I", buf, off)
        off = _need(buf, off2, 8 * rank, "extents")
        shape = struct.unpack_from(f"<{rank}Q", buf, off2) if rank else ()
        n = 1
        for e in shape:
            n *= e
        off2 = _need(buf, off, 8 * n, f"values of {name!r}")
        params[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off = off2
    if off != len(buf):
        raise ContainerError(f"{len(buf) - off} trailing bytes after last parameter")
    return params


def save_params_file(path, params: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(dump_params(params))


def load_params_file(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return load_params(f.read())
