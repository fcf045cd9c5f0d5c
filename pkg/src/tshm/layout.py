"""Growable shared-memory sparse domain with coordinate-indexed access.

A SparseDomain stores coordinates and values in two shm regions that double
as elements are added (truncate + remap underneath) and can shrink back to
the live size, so no padded up-front allocation is ever needed. A hash index
in ordinary memory maps coordinate tuples to slots, giving O(1) random reads
with a zero default for in-bounds coordinates that were never added.

Indices must be added before values can be stored at them; storing at an
un-added coordinate is an error, not an implicit add. Adding an existing
coordinate is idempotent. Single-process by design.
"""

from __future__ import annotations

import uuid
from typing import Sequence

import numpy as np

from .coo import CooTensor
from .errors import LayoutError
from .shm import ShmRegion

MIN_CAPACITY = 4


class SparseDomain:
    def __init__(self, dims: Sequence[int], session: str | None = None,
                 backing_dir: str | None = None):
        self.dims = tuple(int(n) for n in dims)
        if any(n < 1 for n in self.dims):
            raise ValueError(f"mode sizes must be positive, got {self.dims}")
        self.session = session or uuid.uuid4().hex[:12]
        self._backing_dir = backing_dir
        d = len(self.dims)
        self.capacity = MIN_CAPACITY
        self.count = 0
        self._coords_region = ShmRegion.create(
            f"/tshm-{self.session}-layout-coords", self.capacity * d * 8, backing_dir)
        self._values_region = ShmRegion.create(
            f"/tshm-{self.session}-layout-vals", self.capacity * 8, backing_dir)
        self._index: dict[tuple[int, ...], int] = {}
        self._coords: np.ndarray | None = None
        self._values: np.ndarray | None = None
        self._remap()

    @property
    def order(self) -> int:
        return len(self.dims)

    def _remap(self) -> None:
        d = self.order
        self._coords = self._coords_region.ndarray(
            np.uint64, self.capacity * d).reshape(self.capacity, d)
        self._values = self._values_region.ndarray(np.float64, self.capacity)

    def _resize(self, new_capacity: int) -> None:
        d = self.order
        self._coords = None
        self._values = None
        for region, width in ((self._coords_region, d * 8),
                              (self._values_region, 8)):
            target = new_capacity * width
            if target > region.byte_len:
                region.grow(target)
            elif target < region.byte_len:
                region.shrink(target)
        self.capacity = new_capacity
        self._remap()

    def _key(self, coord: Sequence[int]) -> tuple[int, ...]:
        key = tuple(int(c) for c in coord)
        if len(key) != self.order:
            raise ValueError(f"coordinate rank {len(key)} != {self.order}")
        for m, (c, n) in enumerate(zip(key, self.dims)):
            if not 0 <= c < n:
                raise ValueError(f"mode {m}: coordinate {c} out of bounds for dim {n}")
        return key

    def add_index(self, coord: Sequence[int]) -> int:
        """Add a coordinate to the domain; returns its slot.

        Idempotent: an existing coordinate keeps its slot. The value at a
        freshly added slot is 0.0. Regions double when full.
        """
        key = self._key(coord)
        slot = self._index.get(key)
        if slot is not None:
            return slot
        if self.count == self.capacity:
            self._resize(max(MIN_CAPACITY, 2 * self.capacity))
        slot = self.count
        self._coords[slot] = key
        self._values[slot] = 0.0
        self._index[key] = slot
        self.count += 1
        return slot

    def set(self, coord: Sequence[int], value: float) -> None:
        """Store a value at a previously added coordinate."""
        key = self._key(coord)
        slot = self._index.get(key)
        if slot is None:
            raise LayoutError(
                f"coordinate {key} was never added to the domain; "
                "add_index before storing"
            )
        self._values[slot] = value

    def get(self, coord: Sequence[int]) -> float:
        """Value at `coord`; 0.0 for in-bounds coordinates never added."""
        slot = self._index.get(self._key(coord))
        return 0.0 if slot is None else float(self._values[slot])

    def __setitem__(self, coord, value) -> None:
        self.set(coord, value)

    def __getitem__(self, coord) -> float:
        return self.get(coord)

    def __contains__(self, coord) -> bool:
        return self._key(coord) in self._index

    def __len__(self) -> int:
        return self.count

    def shrink_to_fit(self) -> None:
        """Truncate the regions down to the live prefix (floor 4 slots)."""
        target = max(MIN_CAPACITY, self.count)
        if target != self.capacity:
            self._resize(target)

    def freeze(self) -> CooTensor:
        """Snapshot the live elements, in slot order, as a CooTensor."""
        return CooTensor(
            self.dims,
            self._coords[:self.count].reshape(-1).copy(),
            self._values[:self.count].copy(),
        )

    def live_bytes(self) -> tuple[int, int]:
        """Current (coords, values) region lengths in bytes."""
        return self._coords_region.byte_len, self._values_region.byte_len

    def close(self) -> None:
        """Detach and unlink the backing regions."""
        if self._coords is None and self._coords_region is None:
            return
        self._coords = None
        self._values = None
        for attr in ("_coords_region", "_values_region"):
            region = getattr(self, attr)
            if region is not None:
                name = region.name
                region.detach()
                ShmRegion.unlink(name, self._backing_dir)
                setattr(self, attr, None)

    def __enter__(self) -> "SparseDomain":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def domain_from_tensor(t: CooTensor, session: str | None = None,
                       backing_dir: str | None = None) -> SparseDomain:
    """Load a tensor into a fresh domain; duplicate coordinates keep the
    last value (add-then-store per element, in element order)."""
    dom = SparseDomain(t.dims, session, backing_dir)
    c2 = t.coords2d
    for i in range(t.nnz):
        coord = tuple(int(x) for x in c2[i])
        dom.add_index(coord)
        dom.set(coord, float(t.values[i]))
    return dom
