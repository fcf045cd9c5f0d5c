"""Consumer side: attach to a published session zero-copy, validate the
byte-level layout, run the decomposition over shared memory, send back the
result, and signal DONE.

Attachment maps the producer's regions directly; the partition views alias
those pages, so nothing is copied. Validation failures are signaled to the
producer through the flag (ERROR 3 for width/endianness/layout mismatches,
ERROR 1 for metadata or coordinate violations) before raising locally.
"""

from __future__ import annotations

import contextlib
import math
import sys
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import handshake, metadata
from .cpd import CpResult, KruskalModel, cp_als, mttkrp, write_model_region
from .errors import ProtocolError, ShmError, ValidationError
from .handshake import FlagCell
from .partition import BoundingBox
from .shm import ShmRegion

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


@dataclass
class PartitionView:
    """One partition's elements, viewed in place in shared memory."""

    box: BoundingBox
    count: int
    coords: np.ndarray  # (count, d) uint64, read-only
    values: np.ndarray  # (count,) float64, read-write


class ConsumerSession:
    def __init__(self, md, flag, regions, views):
        self.metadata = md
        self.flag = flag
        self._regions = regions
        self.views: list[PartitionView] = views
        self._closed = False

    @property
    def dims(self) -> tuple[int, ...]:
        return self.metadata.dims

    @property
    def nnz(self) -> int:
        return sum(v.count for v in self.views)

    def mttkrp(self, factors: Sequence[np.ndarray], mode: int) -> np.ndarray:
        return mttkrp(self.views, factors, mode)

    def cp_als(self, rank: int, iterations: int, seed: int) -> CpResult:
        return cp_als(self.views, self.dims, rank, iterations, seed)

    def finish(self, model: KruskalModel) -> None:
        """Serialize the model into the result region and signal DONE."""
        if self._closed:
            raise ProtocolError("finish on a closed session")
        if model.dims != self.dims:
            raise ValueError(f"model dims {model.dims} != tensor dims {self.dims}")
        try:
            write_model_region(self.metadata.result_region, model,
                               self.metadata.backing_dir)
        except ShmError:
            self.flag.signal(handshake.ERROR, handshake.ERR_REGION_MISSING)
            raise
        self.flag.signal(handshake.DONE)

    def fail(self, code: int = handshake.ERR_COMPUTE) -> None:
        """Abort the session, reporting `code` to the producer."""
        self.flag.signal(handshake.ERROR, code)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self.views = []
        for region in self._regions:
            with contextlib.suppress(ShmError):
                region.detach()
        with contextlib.suppress(ShmError):
            self.flag.detach()

    def __enter__(self) -> "ConsumerSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def attach_session(metadata_path: str, timeout: float = 30.0) -> ConsumerSession:
    """Attach to a session: await READY, map all partitions, validate.

    Returns a session whose views alias the producer's memory. Raises
    MetadataError before the flag is reachable, ValidationError (after
    signaling the producer) for layout or data problems, HandshakeTimeout
    or PeerError from the wait itself.
    """
    md = metadata.read_file(metadata_path)
    flag = FlagCell.attach(md.flag_region, md.backing_dir)
    try:
        flag.wait_for(handshake.READY, timeout)
    except Exception:
        flag.detach()
        raise

    def bail(code: int, msg: str, partition=None):
        flag.signal(handshake.ERROR, code)
        flag.detach()
        for r in regions:
            with contextlib.suppress(ShmError):
                r.detach()
        raise ValidationError(msg, code, partition)

    regions: list[ShmRegion] = []
    if md.index_width_bits != 64 or md.value_width_bits != 64:
        bail(handshake.ERR_LAYOUT,
             f"width mismatch: this build reads 64/64-bit, metadata declares "
             f"{md.index_width_bits}/{md.value_width_bits}")
    if md.endianness != "LE" or sys.byteorder != "little":
        bail(handshake.ERR_LAYOUT,
             f"endianness mismatch: metadata {md.endianness}, host {sys.byteorder}")
    if md.index_base != 0:
        bail(handshake.ERR_LAYOUT, f"unsupported index_base {md.index_base}")

    d = md.d
    dims_arr = np.asarray(md.dims, dtype=np.uint64)
    views = []
    for p in md.partitions:
        if p.count > p.capacity:
            bail(handshake.ERR_METADATA,
                 f"partition {p.index}: count {p.count} > capacity {p.capacity}",
                 p.index)
        try:
            creg = ShmRegion.attach(p.coords_region, md.backing_dir)
            regions.append(creg)
            vreg = ShmRegion.attach(p.values_region, md.backing_dir)
            regions.append(vreg)
        except ShmError:
            bail(handshake.ERR_REGION_MISSING,
                 f"partition {p.index}: region missing", p.index)
        if creg.byte_len != p.capacity * d * 8 or vreg.byte_len != max(p.capacity * 8, 8):
            bail(handshake.ERR_LAYOUT,
                 f"partition {p.index}: region length does not match capacity",
                 p.index)
        coords = creg.ndarray(np.uint64, p.count * d).reshape(p.count, d)
        coords.setflags(write=False)
        values = vreg.ndarray(np.float64, p.count)
        box = BoundingBox(tuple(p.box_lower), tuple(p.box_upper))
        if p.count:
            lo = np.asarray(box.lower, dtype=np.uint64)
            hi = np.asarray(box.upper, dtype=np.uint64)
            if ((coords < lo) | (coords > hi)).any() or (coords >= dims_arr).any():
                bail(handshake.ERR_METADATA,
                     f"partition {p.index}: coordinate outside its bounding box",
                     p.index)
        views.append(PartitionView(box=box, count=p.count,
                                   coords=coords, values=values))

    if sum(v.count for v in views) != md.nnz:
        bail(handshake.ERR_METADATA, "partition counts do not sum to nnz")
    return ConsumerSession(md, flag, regions, views)


# -- cross-language checksums ------------------------------------------------


def valsum(parts) -> float:
    """Exactly-rounded sum of all partition values (order-independent)."""
    return math.fsum(float(x) for p in parts for x in p.values)


def coordhash(parts) -> int:
    """Order-independent coordinate checksum: XOR of per-element FNV-1a
    hashes over the d little-endian uint64 coordinates."""
    acc = 0
    for p in parts:
        for row in np.asarray(p.coords, dtype=np.uint64):
            h = FNV_OFFSET
            for c in row:
                for byte in int(c).to_bytes(8, "little"):
                    h = ((h ^ byte) * FNV_PRIME) & _U64
            acc ^= h
    return acc
