"""Producer side: materialize a partitioned tensor into shared memory,
write the metadata file, signal READY, and await the consumer's result.

Regions follow the `/tshm-<session>-p<k>-{coords,vals}` naming scheme with
session-level `/tshm-<session>-flag` and `/tshm-<session>-result`. Every
partition gets the same number of element slots (the plan capacity, floored
at one so even empty tensors map a valid region); the first `count` slots
hold that partition's elements in input order, the rest stay zero. `count`
in the metadata is authoritative; padding slots are never read.
"""

from __future__ import annotations

import contextlib
import os
import re
import time
import uuid

import numpy as np

from . import handshake, metadata
from .coo import CooTensor
from .cpd import KruskalModel, read_model_region
from .errors import ShmError, TshmError
from .handshake import FlagCell
from .partition import PartitionPlan, assign_all
from .shm import BACKING_DIR, ShmRegion

_SESSION_RE = re.compile(r"^[A-Za-z0-9._-]{1,60}$")


def new_session_token() -> str:
    return uuid.uuid4().hex[:12]


def region_names(session: str, k: int) -> tuple[str, str]:
    return (f"/tshm-{session}-p{k}-coords", f"/tshm-{session}-p{k}-vals")


def flag_name(session: str) -> str:
    return f"/tshm-{session}-flag"


def result_name(session: str) -> str:
    return f"/tshm-{session}-result"


class ProducerSession:
    """Handle to a published session: open regions, flag, and metadata."""

    def __init__(self, md, flag, regions, metadata_path, backing_dir,
                 fill_seconds=0.0):
        self.metadata = md
        self.flag = flag
        self.regions = regions  # {(k, "coords"|"vals"): ShmRegion}
        self.metadata_path = metadata_path
        self.backing_dir = backing_dir
        self.fill_seconds = fill_seconds  # data-writing share of publish time
        self._closed = False

    @property
    def session(self) -> str:
        return self.metadata.session

    def values_view(self, k: int) -> np.ndarray:
        """Writable view of partition k's value slots, through this process's
        own mapping. Drop the view before teardown."""
        part = self.metadata.partitions[k]
        return self.regions[(k, "vals")].ndarray(np.float64, part.capacity)

    def coords_view(self, k: int) -> np.ndarray:
        part = self.metadata.partitions[k]
        d = self.metadata.d
        arr = self.regions[(k, "coords")].ndarray(np.uint64, part.capacity * d)
        return arr.reshape(part.capacity, d)

    def read_value(self, k: int, slot: int) -> float:
        """One value slot, copied out (safe against view-lifetime rules)."""
        region = self.regions[(k, "vals")]
        return float(np.frombuffer(region.read_bytes(slot * 8, 8), dtype="<f8")[0])

    def await_done(self, timeout: float) -> KruskalModel:
        """Block until the consumer signals DONE, then read its result.

        Raises PeerError on a consumer ERROR, HandshakeTimeout if nothing
        arrives in time (the session stays valid for a retry).
        """
        self.flag.wait_for(handshake.DONE, timeout)
        return read_model_region(self.metadata.result_region, self.backing_dir)

    def teardown(self) -> None:
        """Unlink all session regions and delete the metadata file. Idempotent."""
        if self._closed:
            return
        self._closed = True
        for region in self.regions.values():
            with contextlib.suppress(ShmError):
                region.detach()
        with contextlib.suppress(ShmError):
            self.flag.detach()
        names = [p.coords_region for p in self.metadata.partitions]
        names += [p.values_region for p in self.metadata.partitions]
        names += [self.metadata.flag_region, self.metadata.result_region]
        for name in names:
            with contextlib.suppress(ShmError):
                ShmRegion.unlink(name, self.backing_dir)
        with contextlib.suppress(FileNotFoundError):
            os.unlink(self.metadata_path)

    def __enter__(self) -> "ProducerSession":
        return self

    def __exit__(self, *exc) -> None:
        self.teardown()


def publish(t: CooTensor, plan: PartitionPlan, session: str,
            metadata_path: str, backing_dir: str | None = None) -> ProducerSession:
    """Create and fill all session regions, write metadata, signal READY."""
    if not _SESSION_RE.match(session):
        raise ValueError(f"bad session token: {session!r}")
    if plan.dims != t.dims:
        raise ValueError(f"plan dims {plan.dims} != tensor dims {t.dims}")
    if sum(plan.counts) != t.nnz:
        raise ValueError("plan was not built from this tensor (count mismatch)")
    bdir = backing_dir or BACKING_DIR

    d = t.order
    slots = max(1, plan.capacity)
    flag = FlagCell.create(flag_name(session), bdir)
    regions: dict[tuple[int, str], ShmRegion] = {}
    parts_meta = []
    metadata_written = False
    try:
        # the fill share of setup: routing elements to partitions plus the
        # writes into the mapped regions (everything that scales with nnz)
        t_fill = time.perf_counter()
        cells = assign_all(plan, t.coords2d)
        order = np.argsort(cells, kind="stable")
        sorted_cells = cells[order]
        starts = np.searchsorted(sorted_cells, np.arange(plan.P))
        ends = np.searchsorted(sorted_cells, np.arange(plan.P), side="right")
        c2 = t.coords2d
        fill_seconds = time.perf_counter() - t_fill
        for k in range(plan.P):
            cname, vname = region_names(session, k)
            creg = ShmRegion.create(cname, slots * d * 8, bdir)
            regions[(k, "coords")] = creg
            vreg = ShmRegion.create(vname, slots * 8, bdir)
            regions[(k, "vals")] = vreg
            idx = order[starts[k]:ends[k]]
            count = len(idx)
            if count:
                t_fill = time.perf_counter()
                cview = creg.ndarray(np.uint64, count * d)
                cview[:] = c2[idx].reshape(-1)
                del cview
                vview = vreg.ndarray(np.float64, count)
                vview[:] = t.values[idx]
                del vview
                fill_seconds += time.perf_counter() - t_fill
            box = plan.boxes[k]
            parts_meta.append(metadata.PartitionMeta(
                index=k, coords_region=cname, values_region=vname,
                box_lower=box.lower, box_upper=box.upper,
                count=count, capacity=slots,
            ))

        md = metadata.SessionMetadata(
            session=session, dims=t.dims, nnz=t.nnz,
            flag_region=flag_name(session), result_region=result_name(session),
            backing_dir=bdir, partitions=parts_meta,
        )
        metadata.write_file(md, metadata_path)
        metadata_written = True
        flag.signal(handshake.READY)
        return ProducerSession(md, flag, regions, metadata_path, bdir,
                               fill_seconds)
    except BaseException:
        with contextlib.suppress(TshmError):
            flag.signal(handshake.ERROR, handshake.ERR_METADATA)
        for region in regions.values():
            with contextlib.suppress(ShmError):
                region.detach()
            with contextlib.suppress(ShmError):
                ShmRegion.unlink(region.name, bdir)
        with contextlib.suppress(ShmError):
            flag.detach()
        with contextlib.suppress(ShmError):
            ShmRegion.unlink(flag_name(session), bdir)
        if metadata_written:
            with contextlib.suppress(FileNotFoundError):
                os.unlink(metadata_path)
        raise
