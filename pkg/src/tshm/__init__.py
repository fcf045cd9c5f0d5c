"""Zero-copy shared-memory interchange for COO sparse tensors.

A producer process lays a partitioned coordinate-format tensor out in named
shared-memory regions, describes the session in a small metadata file, and
signals readiness through a flag cell; any consumer process (this package's
CP-ALS workload, or the dependency-free C++ verifier) attaches to the same
physical pages, computes, and signals back. A growable sparse-domain layout
covers the single-process case where partition sizes are not known up
front.
"""

from .coo import CooTensor, dense_lookup, emit_tns, parse_tns
from .consumer import ConsumerSession, PartitionView, attach_session, coordhash, valsum
from .cpd import CpResult, KruskalModel, MemoryPart, cp_als, mttkrp, split_parts, whole_part
from .errors import (
    HandshakeTimeout,
    LayoutError,
    MetadataError,
    PeerError,
    ProtocolError,
    ShmError,
    TnsFormatError,
    TshmError,
    ValidationError,
)
from .handshake import DONE, ERROR, INIT, READY, FlagCell
from .layout import SparseDomain, domain_from_tensor
from .partition import (
    BoundingBox,
    PartitionPlan,
    assign,
    assign_all,
    build_plan,
    choose_cuts,
    choose_grid,
    padding_ratio,
    uniform_cuts,
)
from .producer import ProducerSession, new_session_token, publish
from .shm import BACKING_DIR, ShmRegion

__version__ = "0.1.0"

__all__ = [
    "BACKING_DIR",
    "BoundingBox",
    "ConsumerSession",
    "CooTensor",
    "CpResult",
    "DONE",
    "ERROR",
    "FlagCell",
    "HandshakeTimeout",
    "INIT",
    "KruskalModel",
    "LayoutError",
    "MemoryPart",
    "MetadataError",
    "PartitionPlan",
    "PartitionView",
    "PeerError",
    "ProducerSession",
    "ProtocolError",
    "READY",
    "ShmError",
    "ShmRegion",
    "SparseDomain",
    "TnsFormatError",
    "TshmError",
    "ValidationError",
    "assign",
    "assign_all",
    "attach_session",
    "build_plan",
    "choose_cuts",
    "choose_grid",
    "coordhash",
    "cp_als",
    "dense_lookup",
    "domain_from_tensor",
    "emit_tns",
    "mttkrp",
    "new_session_token",
    "padding_ratio",
    "parse_tns",
    "publish",
    "split_parts",
    "uniform_cuts",
    "valsum",
    "whole_part",
]
