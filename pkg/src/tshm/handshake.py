"""Flag-cell handshake ordering producer and consumer across processes.

The cell is a 64-byte region: u32 magic "TSM1", u32 status, u32 error code,
zero padding. Status moves along INIT -> READY -> (DONE | ERROR), with
INIT -> ERROR allowed so a producer can abort before publishing. Exactly one
side owns each edge: the producer writes READY, the consumer writes DONE or
ERROR afterwards.

Data writes made before signal() are visible to a peer that observed the new
status via await: stores issue in program order and x86-TSO (or the C++
consumer's explicit release/acquire atomics) provides the ordering across
the mapping. Waiting polls with exponential backoff between 1 us and 1 ms,
far below the millisecond-scale shm setup times the protocol accompanies.
"""

from __future__ import annotations

import struct
import time

from .errors import HandshakeTimeout, PeerError, ProtocolError, ShmError
from .shm import ShmRegion

MAGIC = 0x54534D31  # "TSM1"
FLAG_BYTES = 64

INIT = 0
READY = 1
DONE = 2
ERROR = 3

STATUS_NAMES = {INIT: "INIT", READY: "READY", DONE: "DONE", ERROR: "ERROR"}

# error_code namespace carried with ERROR
ERR_METADATA = 1
ERR_REGION_MISSING = 2
ERR_LAYOUT = 3
ERR_COMPUTE = 4

_LEGAL = {(INIT, READY), (READY, DONE), (READY, ERROR), (INIT, ERROR)}

_BACKOFF_MIN = 1e-6
_BACKOFF_MAX = 1e-3


class FlagCell:
    """Handle to the 64-byte handshake cell inside a shared region."""

    def __init__(self, region: ShmRegion):
        self.region = region

    @classmethod
    def create(cls, name: str, backing_dir: str | None = None) -> "FlagCell":
        region = ShmRegion.create(name, FLAG_BYTES, backing_dir)
        struct.pack_into("<III", region.mm, 0, MAGIC, INIT, 0)
        return cls(region)

    @classmethod
    def attach(cls, name: str, backing_dir: str | None = None) -> "FlagCell":
        region = ShmRegion.attach(name, backing_dir)
        if region.byte_len < FLAG_BYTES:
            region.detach()
            raise ProtocolError(f"flag region {name} too small")
        cell = cls(region)
        if cell._magic() != MAGIC:
            region.detach()
            raise ProtocolError(f"flag region {name}: bad magic")
        return cell

    def _magic(self) -> int:
        return struct.unpack_from("<I", self.region.mm, 0)[0]

    @property
    def status(self) -> int:
        return struct.unpack_from("<I", self.region.mm, 4)[0]

    @property
    def error_code(self) -> int:
        return struct.unpack_from("<I", self.region.mm, 8)[0]

    def signal(self, status: int, error_code: int = 0) -> None:
        """Publish a status transition.

        The error code is stored before the status word so a peer that
        observes ERROR always sees the accompanying code.
        """
        if status not in STATUS_NAMES:
            raise ProtocolError(f"unknown status {status}")
        current = self.status
        if (current, status) not in _LEGAL:
            raise ProtocolError(
                f"illegal transition {STATUS_NAMES.get(current, current)} -> "
                f"{STATUS_NAMES[status]}"
            )
        if status == ERROR:
            struct.pack_into("<I", self.region.mm, 8, error_code)
        struct.pack_into("<I", self.region.mm, 4, status)

    def wait_for(self, status: int, timeout: float) -> None:
        """Block until the cell reaches `status` (or beyond).

        ERROR satisfies any wait but is reported distinctly by raising
        PeerError with the peer's code, unless ERROR itself was requested.
        Raises HandshakeTimeout (carrying the last observed status) if the
        deadline passes first.
        """
        if status not in (READY, DONE, ERROR):
            raise ProtocolError(f"cannot wait for status {status}")
        deadline = time.monotonic() + timeout
        delay = _BACKOFF_MIN
        while True:
            if self._magic() != MAGIC:
                raise ProtocolError("flag cell corrupt: bad magic")
            current = self.status
            if current == ERROR:
                if status == ERROR:
                    return
                raise PeerError(
                    f"peer signaled ERROR (code {self.error_code})",
                    self.error_code,
                )
            if current >= status:
                return
            if time.monotonic() >= deadline:
                raise HandshakeTimeout(
                    f"timed out after {timeout}s waiting for "
                    f"{STATUS_NAMES[status]}; last status "
                    f"{STATUS_NAMES.get(current, current)}",
                    current,
                )
            time.sleep(delay)
            delay = min(delay * 2, _BACKOFF_MAX)

    def detach(self) -> None:
        self.region.detach()


def attach_when_present(name: str, timeout: float,
                        backing_dir: str | None = None) -> FlagCell:
    """Attach a flag cell, polling until its region exists and is initialized.

    Region creation is the rendezvous for a consumer started before the
    producer published; a region caught between creation and the magic store
    reads as not-present-yet and is retried.
    """
    deadline = time.monotonic() + timeout
    delay = _BACKOFF_MIN
    while True:
        try:
            return FlagCell.attach(name, backing_dir)
        except (ShmError, ProtocolError):
            if time.monotonic() >= deadline:
                raise HandshakeTimeout(
                    f"timed out after {timeout}s waiting for region {name}", INIT
                ) from None
            time.sleep(delay)
            delay = min(delay * 2, _BACKOFF_MAX)
