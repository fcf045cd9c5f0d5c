"""CP decomposition over partitioned COO data: MTTKRP, ALS, Kruskal model.

The kernels take any sequence of partition-like parts, each exposing a
(count, d) uint64 `coords` array and a (count,) float64 `values` array.
Shared-memory partition views and plain in-memory splits of a CooTensor are
interchangeable here; with a fixed seed and one compute thread the two
substrates produce bit-identical models, since the code path is the same.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .coo import CooTensor
from .errors import ProtocolError
from .partition import PartitionPlan, assign_all
from .shm import ShmRegion

RESULT_MAGIC = 0x54534D52  # "TSMR"
PINV_TOL = 1e-12


class TensorPart(Protocol):
    coords: np.ndarray  # (count, d) uint64
    values: np.ndarray  # (count,) float64


@dataclass
class MemoryPart:
    """A partition's elements held in ordinary memory."""

    coords: np.ndarray
    values: np.ndarray


def split_parts(t: CooTensor, plan: PartitionPlan) -> list[MemoryPart]:
    """Split a tensor into per-partition parts (copies, input order kept)."""
    cells = assign_all(plan, t.coords2d)
    parts = []
    for k in range(plan.P):
        idx = np.flatnonzero(cells == k)
        parts.append(MemoryPart(
            coords=np.ascontiguousarray(t.coords2d[idx]),
            values=np.ascontiguousarray(t.values[idx]),
        ))
    return parts


def whole_part(t: CooTensor) -> list[MemoryPart]:
    """The tensor as a single unpartitioned part."""
    return [MemoryPart(coords=np.ascontiguousarray(t.coords2d),
                       values=np.ascontiguousarray(t.values))]


@dataclass(eq=False)
class KruskalModel:
    """Rank-R CP factors: per-mode dims[m] x R matrices plus R weights."""

    weights: np.ndarray
    factors: list[np.ndarray]

    @property
    def rank(self) -> int:
        return int(self.weights.size)

    @property
    def order(self) -> int:
        return len(self.factors)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)

    def __eq__(self, other) -> bool:
        if not isinstance(other, KruskalModel):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and len(self.factors) == len(other.factors)
            and all(np.array_equal(a, b) for a, b in zip(self.factors, other.factors))
        )


def mttkrp(parts: Sequence[TensorPart], factors: Sequence[np.ndarray],
           mode: int) -> np.ndarray:
    """Matricized-tensor times Khatri-Rao product along `mode`.

    Row i of the result accumulates, over every element with i in position
    `mode`, the element value times the elementwise product of the other
    modes' factor rows. Partitions are reduced in order, each with a single
    unbuffered scatter-add, so the result is deterministic for a given part
    order.
    """
    d = len(factors)
    rank = factors[0].shape[1]
    if any(f.shape[1] != rank for f in factors):
        raise ValueError("factor matrices have inconsistent ranks")
    out = np.zeros((factors[mode].shape[0], rank))
    for part in parts:
        c = part.coords
        v = part.values
        if len(v) == 0:
            continue
        if c.shape[1] != d:
            raise ValueError(f"partition order {c.shape[1]} != {d} factors")
        acc = None
        for q in range(d):
            if q == mode:
                continue
            rows = factors[q][c[:, q]]
            if acc is None:
                acc = rows.copy()
            else:
                acc *= rows
        if acc is None:  # order-1 tensor: empty product
            acc = np.ones((len(v), rank))
        acc *= v[:, None]
        np.add.at(out, c[:, mode], acc)
    return out


@dataclass
class CpResult:
    model: KruskalModel
    fit: float
    fit_trace: list[float]


def cp_als(parts: Sequence[TensorPart], dims: Sequence[int], rank: int,
           iterations: int, seed: int) -> CpResult:
    """Alternating least squares CP decomposition.

    Factors start uniform(0,1) from `seed`. Each mode update solves the
    normal equations against the Hadamard product of the other modes' Gram
    matrices via an SVD pseudo-inverse (cutoff 1e-12 relative; rank
    deficiency warns, never aborts), then column-normalizes into the
    weights. Fit is 1 - |X - model| / |X|, evaluated once per iteration from
    the sparse identities: |X|^2 from the values, <X, model> from the last
    mode's MTTKRP, |model|^2 from the weights and Gram Hadamard product.
    """
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    dims = tuple(int(n) for n in dims)
    d = len(dims)
    rng = np.random.default_rng(seed)
    factors = [rng.uniform(size=(n, rank)) for n in dims]
    weights = np.ones(rank)

    norm_x_sq = sum(float(p.values @ p.values) for p in parts)
    norm_x = float(np.sqrt(norm_x_sq))

    fit = 0.0
    trace: list[float] = []
    last = np.zeros((dims[-1], rank))
    for _ in range(iterations):
        for m in range(d):
            gram = np.ones((rank, rank))
            for q in range(d):
                if q != m:
                    gram *= factors[q].T @ factors[q]
            proj = mttkrp(parts, factors, m)
            updated = proj @ _pinv(gram, m)
            norms = np.linalg.norm(updated, axis=0)
            weights = norms
            factors[m] = updated / np.where(norms > 0, norms, 1.0)
            if m == d - 1:
                last = proj
        gram_all = np.ones((rank, rank))
        for q in range(d):
            gram_all *= factors[q].T @ factors[q]
        norm_model_sq = float(weights @ gram_all @ weights)
        inner = float(weights @ np.einsum("ir,ir->r", factors[d - 1], last))
        residual = float(np.sqrt(max(norm_x_sq + norm_model_sq - 2.0 * inner, 0.0)))
        fit = 1.0 - residual / norm_x if norm_x > 0 else 1.0
        trace.append(fit)

    return CpResult(KruskalModel(weights, factors), fit, trace)


def _pinv(gram: np.ndarray, mode: int) -> np.ndarray:
    u, s, vt = np.linalg.svd(gram)
    cutoff = PINV_TOL * s[0] if s.size and s[0] > 0 else 0.0
    keep = s > cutoff
    if not keep.all():
        warnings.warn(
            f"rank-deficient Gram matrix in mode {mode} "
            f"({int(keep.sum())}/{s.size} singular values kept)",
            RuntimeWarning,
            stacklevel=3,
        )
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (vt.T * inv) @ u.T


# -- result-region wire format ----------------------------------------------
#
# u32 magic "TSMR" | u32 R | u32 d | u32 zero | u64 dims[d]
# | f64 weights[R] | f64 factors, row-major, mode by mode. Little-endian.


def encode_model(model: KruskalModel) -> bytes:
    r, d = model.rank, model.order
    head = struct.pack("<IIII", RESULT_MAGIC, r, d, 0)
    head += struct.pack(f"<{d}Q", *model.dims)
    body = np.asarray(model.weights, dtype="<f8").tobytes()
    for f in model.factors:
        if f.shape != (f.shape[0], r):
            raise ValueError("malformed factor matrix")
        body += np.ascontiguousarray(f, dtype="<f8").tobytes()
    return head + body


def decode_model(buf: bytes) -> KruskalModel:
    if len(buf) < 16:
        raise ProtocolError("result region truncated: no header")
    magic, r, d, _ = struct.unpack_from("<IIII", buf, 0)
    if magic != RESULT_MAGIC:
        raise ProtocolError(f"result region: bad magic {magic:#x}")
    if r < 1 or d < 1:
        raise ProtocolError(f"result region: bad shape R={r} d={d}")
    off = 16
    if len(buf) < off + 8 * d:
        raise ProtocolError("result region truncated: dims")
    dims = struct.unpack_from(f"<{d}Q", buf, off)
    off += 8 * d
    need = off + 8 * r + 8 * r * sum(dims)
    if len(buf) < need:
        raise ProtocolError(
            f"result region truncated: need {need} bytes, have {len(buf)}"
        )
    weights = np.frombuffer(buf, dtype="<f8", count=r, offset=off).copy()
    off += 8 * r
    factors = []
    for n in dims:
        f = np.frombuffer(buf, dtype="<f8", count=n * r, offset=off)
        factors.append(f.reshape(n, r).copy())
        off += 8 * n * r
    return KruskalModel(weights, factors)


def write_model_region(name: str, model: KruskalModel,
                       backing_dir: str | None = None) -> None:
    """Create the result region and serialize `model` into it."""
    payload = encode_model(model)
    region = ShmRegion.create(name, len(payload), backing_dir)
    try:
        region.write_bytes(0, payload)
    finally:
        region.detach()


def read_model_region(name: str, backing_dir: str | None = None) -> KruskalModel:
    region = ShmRegion.attach(name, backing_dir)
    try:
        return decode_model(region.read_bytes(0, region.byte_len))
    finally:
        region.detach()
