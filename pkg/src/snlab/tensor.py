"""Dense NCHW float64 tensors backed by numpy, plus deterministic RNG and a
small binary dump format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable

import numpy as np

AXES = "NCHW"
MAGIC = b"SNT4"
_HEADER = struct.Struct("<4s4I")


class DimensionError(ValueError):
    pass


def _check_dims(dims: Iterable[int]) -> tuple[int, int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4:
        raise DimensionError(f"expected 4 dims (N, C, H, W), got {dims}")
    if any(d < 1 for d in dims):
        raise DimensionError(f"all dims must be >= 1, got {dims}")
    return dims  # type: ignore[return-value]


def as_tensor4(x) -> np.ndarray:
    """Validate and return ``x`` as a C-contiguous float64 NCHW array."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise DimensionError(f"expected a 4D NCHW array, got shape {x.shape}")
    _check_dims(x.shape)
    return x


def zeros(dims) -> np.ndarray:
    return np.zeros(_check_dims(dims), dtype=np.float64)


def make_rng(seed: int, stream: int | None = None) -> np.random.Generator:
    """Counter-based generator (Philox-4x64) keyed on ``seed``.

    Philox output depends only on (key, counter), so a fixed seed gives the
    same stream on every platform numpy supports. ``stream`` selects an
    independent key derived from (seed, stream).
    """
    if stream is None:
        return np.random.Generator(np.random.Philox(int(seed)))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def fill_normal(dims, rng: np.random.Generator, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    dims = _check_dims(dims)
    if std == 0:
        return np.full(dims, float(mean))
    return rng.normal(mean, std, size=dims)


@dataclass(frozen=True)
class StatView:
    """Result of a reduction: ``values`` keeps the surviving axes in NCHW order."""

    values: np.ndarray
    axes: str  # surviving axes, e.g. "NC"


def _axis_indices(axes: str | Iterable[str]) -> tuple[int, ...]:
    names = set(axes.upper()) if isinstance(axes, str) else {a.upper() for a in axes}
    if not names:
        raise ValueError("axis set must be nonempty")
    bad = names - set(AXES)
    if bad:
        raise ValueError(f"unknown axes {sorted(bad)}")
    return tuple(sorted(AXES.index(a) for a in names))


def reduce_mean(x: np.ndarray, axes) -> StatView:
    idx = _axis_indices(axes)
    kept = "".join(a for i, a in enumerate(AXES) if i not in idx)
    return StatView(np.mean(x, axis=idx), kept)


def write_tensor(f: BinaryIO, x: np.ndarray) -> None:
    x = as_tensor4(x)
    f.write(_HEADER.pack(MAGIC, *x.shape))
    f.write(x.astype("<f8").tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    head = f.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise ValueError("truncated tensor header")
    magic, *dims = _HEADER.unpack(head)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    dims = _check_dims(dims)
    count = int(np.prod(dims))
    raw = f.read(8 * count)
    if len(raw) != 8 * count:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
