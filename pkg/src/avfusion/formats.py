"""Little-endian binary containers and PGM images.

Every container starts with a 4-byte ASCII magic followed by u32 header
fields and a float32 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFile

MAGIC_FRAMES = b"FBFM"
MAGIC_GAMMATONE = b"FBGT"
MAGIC_EMBEDDING = b"FBEM"
MAGIC_NETWORK = b"FBNN"
MAGIC_SOFTMAX = b"FBSM"
MAGIC_PLDA = b"FBPL"

F32 = np.dtype("<f4")


class Reader:
    """Sequential reader over a byte buffer that raises CorruptFile on truncation."""

    def __init__(self, data: bytes, magic: bytes):
        if len(data) < 4 or data[:4] != magic:
            raise CorruptFile(f"bad magic, expected {magic!r}")
        self.data = data
        self.pos = 4

    def u32(self) -> int:
        if self.pos + 4 > len(self.data):
            raise CorruptFile("truncated header")
        (v,) = struct.unpack_from("<I", self.data, self.pos)
        self.pos += 4
        return v

    def f32(self, count: int) -> np.ndarray:
        nbytes = 4 * count
        if self.pos + nbytes > len(self.data):
            raise CorruptFile(f"truncated payload: need {count} floats")
        arr = np.frombuffer(self.data, dtype=F32, count=count, offset=self.pos)
        self.pos += nbytes
        return arr.astype(np.float64)

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise CorruptFile(f"{len(self.data) - self.pos} trailing bytes")


def pack_u32(*values: int) -> bytes:
    return struct.pack("<" + "I" * len(values), *values)


def pack_f32(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype=F32).tobytes()


def matrix_to_bytes(values: np.ndarray, magic: bytes) -> bytes:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("matrix containers hold 2-D arrays")
    rows, cols = values.shape
    return magic + pack_u32(rows, cols) + pack_f32(values)


def matrix_from_bytes(data: bytes, magic: bytes) -> np.ndarray:
    r = Reader(data, magic)
    rows, cols = r.u32(), r.u32()
    values = r.f32(rows * cols).reshape(rows, cols)
    r.finish()
    return values


def embedding_to_bytes(values: np.ndarray) -> bytes:
    values = np.asarray(values).ravel()
    return MAGIC_EMBEDDING + pack_u32(values.size) + pack_f32(values)


def embedding_from_bytes(data: bytes) -> np.ndarray:
    r = Reader(data, MAGIC_EMBEDDING)
    dim = r.u32()
    if dim == 0:
        raise CorruptFile("embedding dimension is zero")
    values = r.f32(dim)
    r.finish()
    return values


def pgm_to_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    h, w = img.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    return header + np.clip(img, 0, 255).astype(np.uint8).tobytes()


def pgm_from_bytes(data: bytes) -> np.ndarray:
    # header tokens: magic, width, height, maxval; '#' comments allowed
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptFile("truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise CorruptFile("not a binary PGM (P5)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise CorruptFile("non-numeric PGM header") from exc
    if maxval != 255:
        raise CorruptFile("only maxval 255 is supported")
    body = data[pos : pos + w * h]
    if len(body) != w * h:
        raise CorruptFile("truncated PGM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def write_bytes(path, data: bytes) -> None:
    Path(path).write_bytes(data)


def read_bytes(path) -> bytes:
    return Path(path).read_bytes()


def write_pgm(path, img: np.ndarray) -> None:
    write_bytes(path, pgm_to_bytes(img))


def read_pgm(path) -> np.ndarray:
    return pgm_from_bytes(read_bytes(path))
