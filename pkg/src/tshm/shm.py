"""Named, growable shared-memory regions.

Regions are named POSIX-style ("/tshm-<session>-p0-vals") and backed by files
in /dev/shm where available, which gives shm_open semantics: the same name
attaches to the same physical pages from any process. On systems without
/dev/shm a temp directory is used instead; the directory in effect is
exposed as BACKING_DIR and recorded in session metadata so that consumers
in any language resolve names identically.

All region lengths are multiples of 8 bytes. Growth (creator-only) extends
the backing file with ftruncate and remaps; existing bytes keep their
offsets and the new tail reads as zeros. Attachers observe a grow by
re-attaching. Note mmap cannot be resized or closed while numpy views of it
are alive; drop views before grow/shrink/detach.
"""

from __future__ import annotations

import mmap
import os
import tempfile

import numpy as np

from .errors import ShmError

_DEV_SHM = "/dev/shm"

if os.path.isdir(_DEV_SHM) and os.access(_DEV_SHM, os.W_OK):
    BACKING_DIR = _DEV_SHM
else:  # pragma: no cover - exercised only on platforms without /dev/shm
    BACKING_DIR = tempfile.mkdtemp(prefix="tshm-backing-")

ALIGN = 8


def _round_up(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _validate_name(name: str) -> str:
    if not isinstance(name, str) or not name.startswith("/"):
        raise ShmError(f"region name must start with '/': {name!r}")
    if len(name) > 250:
        raise ShmError(f"region name too long ({len(name)} chars)")
    body = name[1:]
    if not body or "/" in body:
        raise ShmError(f"region name must contain exactly one leading slash: {name!r}")
    return body


def region_path(name: str, backing_dir: str | None = None) -> str:
    """Filesystem path backing a region name."""
    return os.path.join(backing_dir or BACKING_DIR, _validate_name(name))


class ShmRegion:
    """A mapped shared-memory region handle.

    Use ShmRegion.create / ShmRegion.attach; not constructed directly.
    A handle belongs to one thread; cross-process ordering comes from the
    handshake flag protocol, never from assumptions about mmap coherency
    timing.
    """

    def __init__(self, name: str, fd: int, mm: mmap.mmap, byte_len: int, mode: str,
                 backing_dir: str):
        self.name = name
        self.byte_len = byte_len
        self.mode = mode
        self._fd = fd
        self._mm = mm
        self._backing_dir = backing_dir

    @classmethod
    def create(cls, name: str, byte_len: int, backing_dir: str | None = None) -> "ShmRegion":
        """Create a new region, zero-filled, exclusive: the name must be free."""
        if byte_len <= 0:
            raise ShmError(f"byte_len must be positive, got {byte_len}")
        bdir = backing_dir or BACKING_DIR
        path = region_path(name, bdir)
        byte_len = _round_up(byte_len)
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_RDWR, 0o600)
        except FileExistsError:
            raise ShmError(f"region already exists: {name}") from None
        except OSError as exc:
            raise ShmError(f"cannot create region {name}: {exc}") from exc
        try:
            os.ftruncate(fd, byte_len)
            mm = mmap.mmap(fd, byte_len)
        except OSError as exc:
            os.close(fd)
            os.unlink(path)
            raise ShmError(f"cannot map region {name}: {exc}") from exc
        return cls(name, fd, mm, byte_len, "creator", bdir)

    @classmethod
    def attach(cls, name: str, backing_dir: str | None = None) -> "ShmRegion":
        """Map an existing region read-write at its current length."""
        bdir = backing_dir or BACKING_DIR
        path = region_path(name, bdir)
        try:
            fd = os.open(path, os.O_RDWR)
        except FileNotFoundError:
            raise ShmError(f"no such region: {name}") from None
        except OSError as exc:
            raise ShmError(f"cannot attach region {name}: {exc}") from exc
        try:
            byte_len = os.fstat(fd).st_size
            if byte_len == 0:
                # creator opened but has not sized the object yet
                raise ShmError(f"region {name} not initialized")
            mm = mmap.mmap(fd, byte_len)
        except ShmError:
            os.close(fd)
            raise
        except OSError as exc:
            os.close(fd)
            raise ShmError(f"cannot map region {name}: {exc}") from exc
        return cls(name, fd, mm, byte_len, "attacher", bdir)

    def grow(self, new_byte_len: int) -> None:
        """Extend the region; prior bytes keep their offsets, tail is zeros."""
        if self.mode != "creator":
            raise ShmError("only the creator may grow a region")
        if new_byte_len <= self.byte_len:
            raise ShmError(
                f"grow target {new_byte_len} not larger than current {self.byte_len}"
            )
        self._resize(_round_up(new_byte_len))

    def shrink(self, new_byte_len: int) -> None:
        """Truncate the region (creator-only); used by the grow/shrink layout."""
        if self.mode != "creator":
            raise ShmError("only the creator may shrink a region")
        new_byte_len = _round_up(new_byte_len)
        if new_byte_len <= 0 or new_byte_len >= self.byte_len:
            raise ShmError(
                f"shrink target {new_byte_len} not in (0, {self.byte_len})"
            )
        self._resize(new_byte_len)

    def _resize(self, new_byte_len: int) -> None:
        try:
            os.ftruncate(self._fd, new_byte_len)
            self._mm.resize(new_byte_len)
        except BufferError:
            raise ShmError(
                "cannot resize while views of the mapping are alive"
            ) from None
        except OSError as exc:
            raise ShmError(f"cannot resize region {self.name}: {exc}") from exc
        self.byte_len = new_byte_len

    def detach(self) -> None:
        """Unmap and close. The named object persists until unlink."""
        if self._mm is None:
            raise ShmError(f"region {self.name} already detached")
        try:
            self._mm.close()
        except BufferError:
            raise ShmError(
                "cannot detach while views of the mapping are alive"
            ) from None
        os.close(self._fd)
        self._mm = None
        self._fd = -1

    @staticmethod
    def unlink(name: str, backing_dir: str | None = None) -> None:
        """Remove the region name. Existing mappings stay valid until detach."""
        path = region_path(name, backing_dir)
        try:
            os.unlink(path)
        except FileNotFoundError:
            raise ShmError(f"no such region: {name}") from None

    # -- data access -------------------------------------------------------

    @property
    def mm(self) -> mmap.mmap:
        if self._mm is None:
            raise ShmError(f"region {self.name} is detached")
        return self._mm

    def ndarray(self, dtype, count: int, offset: int = 0) -> np.ndarray:
        """A numpy view over the mapping (no copy).

        The view pins the mapping: drop it before grow/shrink/detach.
        """
        return np.frombuffer(self.mm, dtype=dtype, count=count, offset=offset)

    def write_bytes(self, offset: int, data: bytes) -> None:
        self.mm[offset:offset + len(data)] = data

    def read_bytes(self, offset: int, n: int) -> bytes:
        return bytes(self.mm[offset:offset + n])

    def __enter__(self) -> "ShmRegion":
        return self

    def __exit__(self, *exc) -> None:
        if self._mm is not None:
            self.detach()

    def __repr__(self) -> str:
        state = "detached" if self._mm is None else f"{self.byte_len}B"
        return f"ShmRegion({self.name!r}, {self.mode}, {state})"
