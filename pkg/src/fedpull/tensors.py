"""Named dense float32 tensors plus the arithmetic used for aggregation and drift tracking.

Tensors are immutable after construction; every operation returns a new tensor.
Reductions and accumulations run in float64 regardless of the float32 storage so
that threshold computations are reproducible across platforms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable

import numpy as np

GROUP_ENCODER = "encoder"
GROUP_DECODER = "decoder"
GROUP_SHARED = "shared"
GROUPS = (GROUP_ENCODER, GROUP_DECODER, GROUP_SHARED)


def group_of(name: str) -> str:
    """Group membership is a pure function of the name prefix, never stored."""
    if name.startswith("enc."):
        return GROUP_ENCODER
    if name.startswith("dec."):
        return GROUP_DECODER
    return GROUP_SHARED


@dataclass(frozen=True)
class NamedTensor:
    """A named, shaped, flat array of float32 values in row-major order."""

    name: str
    shape: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        shape = tuple(int(s) for s in self.shape)
        if any(s <= 0 for s in shape):
            raise ValueError(f"tensor '{self.name}': non-positive extent in shape {shape}")
        values = np.ascontiguousarray(self.values, dtype=np.float32).reshape(-1)
        expected = 1
        for s in shape:
            expected *= s
        if values.size != expected:
            raise ValueError(
                f"tensor '{self.name}': shape {shape} implies {expected} values, got {values.size}"
            )
        if values is self.values:
            values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_array(cls, name: str, array: np.ndarray) -> "NamedTensor":
        array = np.asarray(array)
        return cls(name, tuple(array.shape), array.reshape(-1))

    @property
    def group(self) -> str:
        return group_of(self.name)

    @property
    def param_count(self) -> int:
        return int(self.values.size)

    def as_matrix(self) -> np.ndarray:
        """Read-only view with the declared shape."""
        return self.values.reshape(self.shape)

    def as_float64(self) -> np.ndarray:
        return self.values.reshape(self.shape).astype(np.float64)


@dataclass(frozen=True)
class DeltaRecord:
    """How much one tensor moved between two checkpoints of the same model."""

    name: str
    norm: float
    param_count: int
    group: str


def _check_finite(t: NamedTensor) -> None:
    finite = np.isfinite(t.values)
    if not finite.all():
        idx = int(np.flatnonzero(~finite)[0])
        raise ValueError(f"non-finite value in tensor '{t.name}' at flat index {idx}")


def l1_norm(t: NamedTensor) -> float:
    """Sum of absolute values, accumulated in float64."""
    _check_finite(t)
    return float(np.sum(np.abs(t.values), dtype=np.float64))


def diff(a: NamedTensor, b: NamedTensor) -> NamedTensor:
    """Elementwise a - b; the result carries a's name (and therefore group)."""
    if a.name != b.name:
        raise ValueError(f"tensor name mismatch: '{a.name}' vs '{b.name}'")
    if a.shape != b.shape:
        raise ValueError(
            f"shape mismatch for '{a.name}': {a.shape} vs '{b.name}': {b.shape}"
        )
    return NamedTensor(a.name, a.shape, a.values - b.values)


def weighted_accumulate(acc: NamedTensor, weight: float, t: NamedTensor) -> NamedTensor:
    """acc + weight * t, accumulated in float64 and stored back as float32."""
    if not np.isfinite(weight):
        raise ValueError(f"non-finite weight {weight!r} for tensor '{t.name}'")
    if acc.shape != t.shape:
        raise ValueError(
            f"shape mismatch: '{acc.name}' {acc.shape} vs '{t.name}' {t.shape}"
        )
    out = acc.values.astype(np.float64) + float(weight) * t.values.astype(np.float64)
    return NamedTensor(acc.name, acc.shape, out.astype(np.float32))


# ---------------------------------------------------------------------------
# Binary record format (little-endian):
#   u32 name length | utf-8 name | u32 rank | u32 extents... | f32 values...
# ---------------------------------------------------------------------------


def serialized_header_size(t: NamedTensor) -> int:
    return 8 + len(t.name.encode("utf-8")) + 4 * len(t.shape)


def serialized_size(t: NamedTensor) -> int:
    return serialized_header_size(t) + 4 * t.param_count


def tensor_to_bytes(t: NamedTensor) -> bytes:
    name = t.name.encode("utf-8")
    parts = [
        struct.pack("<I", len(name)),
        name,
        struct.pack("<I", len(t.shape)),
        struct.pack(f"<{len(t.shape)}I", *t.shape) if t.shape else b"",
        t.values.astype("<f4").tobytes(),
    ]
    return b"".join(parts)


def write_tensors(stream: BinaryIO, tensors: Iterable[NamedTensor]) -> None:
    for t in tensors:
        stream.write(tensor_to_bytes(t))


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise ValueError(f"truncated tensor record: wanted {n} bytes, got {len(data)}")
    return data


def read_tensor(stream: BinaryIO) -> NamedTensor | None:
    """Read one record; returns None at a clean end of stream."""
    head = stream.read(4)
    if head == b"":
        return None
    if len(head) != 4:
        raise ValueError("truncated tensor record header")
    (name_len,) = struct.unpack("<I", head)
    name = _read_exact(stream, name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(stream, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank)) if rank else ()
    count = 1
    for s in shape:
        count *= s
    values = np.frombuffer(_read_exact(stream, 4 * count), dtype="<f4")
    return NamedTensor(name, shape, values)


def read_all_tensors(stream: BinaryIO) -> list[NamedTensor]:
    out = []
    while True:
        t = read_tensor(stream)
        if t is None:
            return out
        out.append(t)
