"""COO sparse tensor model and FROSTT-style .tns text I/O.

Coordinates are stored 0-based internally, element-major: the d coordinates
of element i occupy the flat positions [i*d, (i+1)*d). The .tns text format
is 1-based; the shift happens only at the text boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import TnsFormatError

INDEX_DTYPE = np.uint64
VALUE_DTYPE = np.float64


@dataclass(eq=False)
class CooTensor:
    """An order-d sparse tensor as parallel coordinate/value arrays.

    dims:   mode sizes, one per mode.
    coords: flat uint64 array of length d*nnz, element-major.
    values: float64 array of length nnz.
    """

    dims: tuple[int, ...]
    coords: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        if len(self.dims) < 1:
            raise ValueError("tensor must have at least one mode")
        if any(n < 1 for n in self.dims):
            raise ValueError(f"mode sizes must be positive, got {self.dims}")
        self.coords = np.ascontiguousarray(self.coords, dtype=INDEX_DTYPE)
        self.values = np.ascontiguousarray(self.values, dtype=VALUE_DTYPE)
        d = len(self.dims)
        if self.coords.ndim != 1 or self.coords.size != d * self.values.size:
            raise ValueError(
                f"coords length {self.coords.size} != order {d} * nnz {self.values.size}"
            )
        if self.values.size:
            c2 = self.coords.reshape(-1, d)
            too_big = c2 >= np.asarray(self.dims, dtype=INDEX_DTYPE)
            if too_big.any():
                i, m = np.argwhere(too_big)[0]
                raise ValueError(
                    f"element {i} mode {m}: coordinate {c2[i, m]} out of bounds "
                    f"for dim {self.dims[m]}"
                )
        self.coords.setflags(write=False)
        self.values.setflags(write=False)

    @property
    def order(self) -> int:
        return len(self.dims)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def coords2d(self) -> np.ndarray:
        """(nnz, d) view of the flat coordinate array."""
        return self.coords.reshape(-1, self.order)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CooTensor):
            return NotImplemented
        return (
            self.dims == other.dims
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.values, other.values)
        )


def parse_tns(lines: Iterable[str], dims: Sequence[int] | None = None) -> CooTensor:
    """Parse FROSTT .tns text into a CooTensor.

    Each non-comment line holds d whitespace-separated 1-based integer
    coordinates followed by one value; '#' starts a comment line. The order d
    is inferred from the first data line. Mode sizes default to the maximum
    coordinate seen per mode; pass `dims` to override (required for tensors
    with empty trailing slices, and for empty input).
    """
    override = tuple(int(n) for n in dims) if dims is not None else None
    d = len(override) if override is not None else None
    raw_coords: list[int] = []
    raw_values: list[float] = []
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        if d is None:
            d = len(tokens) - 1
            if d < 1:
                raise TnsFormatError(f"line {lineno}: expected coordinates and a value")
        if len(tokens) != d + 1:
            raise TnsFormatError(
                f"line {lineno}: expected {d + 1} tokens, got {len(tokens)}"
            )
        try:
            coord = [int(t) for t in tokens[:-1]]
            value = float(tokens[-1])
        except ValueError as exc:
            raise TnsFormatError(f"line {lineno}: {exc}") from None
        for m, c in enumerate(coord):
            if c < 1:
                raise TnsFormatError(
                    f"line {lineno}: mode {m} coordinate {c} must be >= 1"
                )
        raw_coords.extend(c - 1 for c in coord)
        raw_values.append(value)

    if d is None:
        if override is None:
            raise TnsFormatError("no data lines and no dims override")
        d = len(override)
    if not raw_values and override is None:
        raise TnsFormatError("no data lines and no dims override")

    coords = np.asarray(raw_coords, dtype=INDEX_DTYPE)
    values = np.asarray(raw_values, dtype=VALUE_DTYPE)
    if override is not None:
        if len(override) != d:
            raise TnsFormatError(
                f"dims override has {len(override)} modes, data has {d}"
            )
        shape = override
    else:
        shape = tuple(int(coords.reshape(-1, d)[:, m].max()) + 1 for m in range(d))
    try:
        return CooTensor(shape, coords, values)
    except ValueError as exc:
        raise TnsFormatError(str(exc)) from None


def emit_tns(t: CooTensor, stream: TextIO) -> None:
    """Write `t` as .tns text, one element per line, 1-based coordinates.

    Values are written with repr() so that parse_tns(emit_tns(t)) reproduces
    t bit-exactly, in the same element order.
    """
    d = t.order
    c2 = t.coords2d
    for i in range(t.nnz):
        coord = " ".join(str(int(c2[i, m]) + 1) for m in range(d))
        stream.write(f"{coord} {float(t.values[i])!r}\n")


def dense_lookup(t: CooTensor, coord: Sequence[int]) -> float:
    """Value at `coord` via a linear scan over the whole coordinate array.

    Returns the first matching element's value, or 0.0 if absent. This is the
    O(nnz) random-access baseline that the sparse layout improves on.
    """
    probe = _check_coord(t.dims, coord)
    if t.nnz == 0:
        return 0.0
    hits = np.all(t.coords2d == probe, axis=1)
    idx = int(np.argmax(hits))
    if hits[idx]:
        return float(t.values[idx])
    return 0.0


def _check_coord(dims: tuple[int, ...], coord: Sequence[int]) -> np.ndarray:
    arr = np.asarray(list(coord), dtype=np.int64)
    if arr.shape != (len(dims),):
        raise ValueError(f"coordinate has {arr.size} modes, tensor has {len(dims)}")
    if (arr < 0).any() or (arr >= np.asarray(dims, dtype=np.int64)).any():
        raise ValueError(f"coordinate {tuple(int(x) for x in arr)} out of bounds for dims {dims}")
    return arr.astype(INDEX_DTYPE)
