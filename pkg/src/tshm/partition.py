"""Grid partitioning of the tensor index space into non-overlapping boxes.

A partition plan is the cross-product of per-mode index cuts: mode m is
split into grid[m] contiguous index ranges, and the P = prod(grid) resulting
boxes tile the whole index space. Every partition is allocated the same
number of element slots (the max per-box count), mirroring uniform block
distribution of a padded dense array; padding_ratio exposes the waste.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .coo import CooTensor


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, inclusive on both ends, 0-based."""

    lower: tuple[int, ...]
    upper: tuple[int, ...]

    def __post_init__(self):
        if len(self.lower) != len(self.upper):
            raise ValueError("lower/upper rank mismatch")
        if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError(f"empty box: {self.lower}..{self.upper}")

    def contains(self, coord: Sequence[int]) -> bool:
        return all(
            lo <= int(c) <= hi
            for lo, hi, c in zip(self.lower, self.upper, coord)
        )


@dataclass(frozen=True)
class PartitionPlan:
    """P boxes in row-major grid order, with per-box counts and uniform capacity."""

    dims: tuple[int, ...]
    grid: tuple[int, ...]
    cuts: tuple[tuple[int, ...], ...]
    boxes: tuple[BoundingBox, ...]
    counts: tuple[int, ...]

    @property
    def P(self) -> int:
        return len(self.boxes)

    @property
    def capacity(self) -> int:
        return max(self.counts)

    @classmethod
    def from_cuts(
        cls,
        t: CooTensor,
        cuts: Sequence[Sequence[int]],
        dims: Sequence[int] | None = None,
    ) -> "PartitionPlan":
        """Build a plan from explicit per-mode cuts and count t's elements.

        cuts[m] lists the first index of each chunk after the first, sorted,
        strictly inside (0, dims[m]).
        """
        shape = tuple(int(n) for n in (dims if dims is not None else t.dims))
        d = len(shape)
        if len(cuts) != d:
            raise ValueError(f"expected cuts for {d} modes, got {len(cuts)}")
        norm_cuts = []
        for m, mode_cuts in enumerate(cuts):
            mc = tuple(int(c) for c in mode_cuts)
            if list(mc) != sorted(set(mc)):
                raise ValueError(f"mode {m} cuts not sorted/unique: {mc}")
            if mc and (mc[0] < 1 or mc[-1] >= shape[m]):
                raise ValueError(f"mode {m} cuts {mc} outside (0, {shape[m]})")
            norm_cuts.append(mc)
        grid = tuple(len(mc) + 1 for mc in norm_cuts)

        boundaries = [(0,) + mc + (shape[m],) for m, mc in enumerate(norm_cuts)]
        boxes = []
        for cell in np.ndindex(*grid):
            lower = tuple(boundaries[m][j] for m, j in enumerate(cell))
            upper = tuple(boundaries[m][j + 1] - 1 for m, j in enumerate(cell))
            boxes.append(BoundingBox(lower, upper))

        cells = _cells_from_cuts(norm_cuts, grid, t.coords2d)
        counts = np.bincount(cells, minlength=len(boxes))
        return cls(shape, grid, tuple(norm_cuts), tuple(boxes),
                   tuple(int(c) for c in counts))


def choose_grid(dims: Sequence[int], P: int) -> tuple[int, ...]:
    """Pick the grid shape for P partitions over the given mode sizes.

    Enumerates every ordered factorization of P into one factor per mode
    (skipping factorizations where some factor exceeds its mode size, which
    could not be realized as index cuts) and keeps the one minimizing the
    worst-case box volume prod(ceil(dims[m]/grid[m])), breaking ties by
    lexicographically smallest grid.
    """
    shape = tuple(int(n) for n in dims)
    if P < 1:
        raise ValueError(f"partition count must be >= 1, got {P}")
    best: tuple[int, tuple[int, ...]] | None = None
    for grid in _ordered_factorizations(P, shape):
        volume = 1
        for n, g in zip(shape, grid):
            volume *= -(-n // g)
        key = (volume, grid)
        if best is None or key < best:
            best = key
    if best is None:
        raise ValueError(f"no grid of {P} partitions fits dims {shape}")
    return best[1]


def _ordered_factorizations(P, dims):
    if not dims:
        if P == 1:
            yield ()
        return
    head_max = min(P, dims[0])
    for f in range(1, head_max + 1):
        if P % f == 0:
            for rest in _ordered_factorizations(P // f, dims[1:]):
                yield (f,) + rest


def choose_cuts(t: CooTensor, grid: Sequence[int]) -> tuple[tuple[int, ...], ...]:
    """Balance cuts per mode against the marginal nonzero histograms.

    Mode by mode, greedily place each cut where the cumulative marginal
    count comes closest to its share k*nnz/grid[m], ties to the left,
    always leaving at least one index per chunk.
    """
    cuts = []
    for m, g in enumerate(int(x) for x in grid):
        n = t.dims[m]
        if g < 1:
            raise ValueError(f"mode {m}: grid factor {g} < 1")
        if g > n:
            raise ValueError(f"mode {m}: grid factor {g} exceeds mode size {n}")
        if g == 1:
            cuts.append(())
            continue
        hist = np.bincount(t.coords2d[:, m].astype(np.int64), minlength=n)
        # cum[s] = elements with index < s
        cum = np.concatenate(([0], np.cumsum(hist)))
        mode_cuts = []
        prev = 0
        for k in range(1, g):
            target = k * t.nnz / g
            lo = prev + 1
            hi = n - (g - k)
            window = cum[lo:hi + 1]
            s = lo + int(np.argmin(np.abs(window - target)))
            mode_cuts.append(s)
            prev = s
        cuts.append(tuple(mode_cuts))
    return tuple(cuts)


def uniform_cuts(dims: Sequence[int], grid: Sequence[int]) -> tuple[tuple[int, ...], ...]:
    """Index-space-even cuts, ignoring where the elements actually are.

    This is the uniform block split a dense distribution would apply; on
    skewed tensors it produces the badly unbalanced boxes whose padding cost
    padding_ratio measures.
    """
    cuts = []
    for n, g in zip((int(x) for x in dims), (int(x) for x in grid)):
        if g > n:
            raise ValueError(f"grid factor {g} exceeds mode size {n}")
        cuts.append(tuple(-(-n * k // g) for k in range(1, g)))
    return tuple(cuts)


def build_plan(t: CooTensor, P: int) -> PartitionPlan:
    """Analyze `t` once and produce a balanced P-partition plan."""
    grid = choose_grid(t.dims, P)
    cuts = choose_cuts(t, grid)
    return PartitionPlan.from_cuts(t, cuts)


def padding_ratio(plan: PartitionPlan) -> float:
    """Total allocated slots over total elements: P*capacity / nnz."""
    return plan.P * plan.capacity / max(1, sum(plan.counts))


def assign(plan: PartitionPlan, coord: Sequence[int]) -> int:
    """Row-major grid cell index of the box containing `coord`."""
    coord = [int(c) for c in coord]
    if len(coord) != len(plan.dims):
        raise ValueError(f"coordinate rank {len(coord)} != {len(plan.dims)}")
    cell = 0
    for m, (c, n, g) in enumerate(zip(coord, plan.dims, plan.grid)):
        if not 0 <= c < n:
            raise ValueError(f"mode {m}: coordinate {c} out of bounds for dim {n}")
        j = int(np.searchsorted(plan.cuts[m], c, side="right"))
        cell = cell * g + j
    return cell


def assign_all(plan: PartitionPlan, coords2d: np.ndarray) -> np.ndarray:
    """Vectorized assign() over an (nnz, d) coordinate array."""
    return _cells_from_cuts(plan.cuts, plan.grid, coords2d)


def _cells_from_cuts(cuts, grid, coords2d) -> np.ndarray:
    cells = np.zeros(len(coords2d), dtype=np.int64)
    for m, g in enumerate(grid):
        j = np.searchsorted(np.asarray(cuts[m], dtype=np.uint64),
                            coords2d[:, m], side="right")
        cells = cells * g + j
    return cells
