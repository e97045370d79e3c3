"""Dense float64 arrays, seeded generators and the tensor binary format.

Tensors are plain C-ordered ``numpy.ndarray`` objects of dtype float64; the
helpers here enforce the shape rules every other module relies on.

Randomness always flows through an explicit ``numpy.random.Generator`` backed
by PCG64. Sub-seeds are derived with ``numpy.random.SeedSequence`` so that a
single master seed reproduces a whole experiment.
"""

from __future__ import annotations

import io
import math
import struct
from typing import BinaryIO, Iterable, Optional, Sequence

import numpy as np
import numpy.typing as npt

from src.errors import InvalidArgumentError, MalformedFileError, ShapeError

Tensor = npt.NDArray[np.float64]

TENSOR_MAGIC = b"TNSRv001"


def _check_shape(shape: Iterable[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not dims:
        raise ShapeError("shape must have at least one dimension")
    if any(d < 1 for d in dims):
        raise ShapeError(f"all dimensions must be >= 1, got {list(dims)}")
    return dims


def as_tensor(values: npt.ArrayLike) -> Tensor:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    _check_shape(arr.shape)
    return arr


def zeros(shape: Sequence[int]) -> Tensor:
    return np.zeros(_check_shape(shape), dtype=np.float64)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(master: int, *keys: int) -> int:
    """64-bit seed for the stream identified by ``keys`` under ``master``.

    Appending new keys never changes the seeds of existing ones.
    """
    seq = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in keys))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def random_uniform(shape: Sequence[int], epsilon: float, rng: np.random.Generator) -> Tensor:
    """Values drawn uniformly from the open interval (-epsilon, epsilon)."""
    if not epsilon > 0:
        raise InvalidArgumentError(f"epsilon must be > 0, got {epsilon}")
    dims = _check_shape(shape)
    low = np.nextafter(-epsilon, 0.0)
    return rng.uniform(low, epsilon, size=dims).astype(np.float64, copy=False)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    dims = _check_shape(shape)
    if int(np.prod(dims)) != t.size:
        raise ShapeError(f"cannot reshape {t.size} elements into {list(dims)}")
    return np.ascontiguousarray(t).reshape(dims)


def write_tensor(stream: BinaryIO, t: Tensor) -> None:
    arr = as_tensor(t)
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<I", arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    offset = stream.tell()
    buf = stream.read(n)
    if len(buf) != n:
        raise MalformedFileError(f"truncated {what}: expected {n} bytes, got {len(buf)}", offset)
    return buf


def bytes_remaining(stream: BinaryIO) -> Optional[int]:
    """Bytes left after the current position, or None for unseekable streams."""
    try:
        here = stream.tell()
        end = stream.seek(0, io.SEEK_END)
        stream.seek(here)
    except (OSError, AttributeError):
        return None
    return end - here


def read_tensor(stream: BinaryIO) -> Tensor:
    offset = stream.tell()
    magic = _read_exact(stream, len(TENSOR_MAGIC), "tensor magic")
    if magic != TENSOR_MAGIC:
        raise MalformedFileError(f"bad tensor magic {magic!r}", offset)
    (rank,) = struct.unpack("<I", _read_exact(stream, 4, "tensor rank"))
    if rank == 0:
        raise MalformedFileError("tensor rank must be >= 1", offset + len(TENSOR_MAGIC))
    left = bytes_remaining(stream)
    if left is not None and 4 * rank > left:
        raise MalformedFileError(f"tensor rank {rank} exceeds the {left} bytes left", offset + len(TENSOR_MAGIC))
    dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank, "tensor dims"))
    if any(d == 0 for d in dims):
        raise MalformedFileError(f"zero dimension in {list(dims)}", offset + len(TENSOR_MAGIC) + 4)
    need = 8 * math.prod(dims)
    left = bytes_remaining(stream)
    if left is not None and need > left:
        raise MalformedFileError(
            f"tensor dims {list(dims)} need {need} payload bytes, only {left} remain", stream.tell()
        )
    payload = _read_exact(stream, need, "tensor payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
