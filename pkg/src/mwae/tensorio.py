"""Binary tensor records and the JSON-indexed container built on them.

Tensor record (``MWT1``)::

    b"MWT1" | u8 rank | rank x u32 LE extents | float32 LE payload (row-major)

Container::

    4-byte magic | u32 LE header length | UTF-8 JSON header | MWT1 records...

The header lists the records in file order, so a reader never needs offsets.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

TENSOR_MAGIC = b"MWT1"


class FormatError(ValueError):
    pass


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    a = np.ascontiguousarray(arr, dtype="<f4")
    if a.ndim > 255:
        raise FormatError("rank above 255 cannot be encoded")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<B", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
    fh.write(a.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    buf = fh.read(4 * count)
    if len(buf) != 4 * count:
        raise FormatError("truncated tensor payload")
    return np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)


def tensor_bytes(arr: np.ndarray) -> bytes:
    bio = io.BytesIO()
    write_tensor(bio, arr)
    return bio.getvalue()


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def write_container(path, magic: bytes, header: dict, tensors: list[np.ndarray]) -> None:
    if len(magic) != 4:
        raise FormatError("container magic must be 4 bytes")
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for t in tensors:
            write_tensor(fh, t)


def read_container(path, magic: bytes) -> tuple[dict, list[np.ndarray]]:
    with open(path, "rb") as fh:
        got = fh.read(4)
        if got != magic:
            raise FormatError(f"{path}: expected magic {magic!r}, found {got!r}")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode("utf-8"))
        tensors = []
        while True:
            peek = fh.read(1)
            if not peek:
                break
            fh.seek(-1, io.SEEK_CUR)
            tensors.append(read_tensor(fh))
    return header, tensors
