"""Benchmark harness: timed publish/attach/compute sessions with a real
consumer process, against an in-process baseline.

Each repeat runs one full session: publish (timed as setup), spawn the
consumer module as a separate process (its attach and compute times come
back over stdout as JSON), await its result, then run the identical CP-ALS
on the same partition split in ordinary memory. With one compute thread and
a fixed seed the two models must be bit-identical: the code path is shared
and only the memory substrate differs, so the comparison isolates handoff
overhead.

Compute timings on both sides follow the same protocol: one untimed warmup,
then the fastest of `timing_runs` identical decompositions (they produce
the same bits, so only the clock differs). The optional file-I/O baseline
(write .tns, re-read) is reported separately and excluded from the standard
table.
"""

from __future__ import annotations

import csv
import io
import json
import os
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from .coo import CooTensor, emit_tns, parse_tns
from .cpd import cp_als, split_parts
from .errors import TshmError
from .partition import build_plan, padding_ratio
from .producer import new_session_token, publish

CSV_HEADER = ("tensor", "P", "repeat", "setup_s", "attach_s",
              "compute_handoff_s", "compute_inprocess_s", "padding_ratio")


@dataclass
class BenchConfig:
    label: str
    parts: int = 4
    cp_rank: int = 16
    iterations: int = 5
    repeats: int = 5
    seed: int = 0
    tensor_path: str | None = None
    synth_dims: tuple[int, ...] = ()
    synth_rank: int = 3
    density: float = 0.01
    noise: float = 0.0
    warmup: bool = True
    keep: bool = False
    file_baseline: bool = False
    consumer_timeout: float = 60.0
    timing_runs: int = 3


@dataclass
class RunSample:
    repeat: int
    setup_s: float
    attach_s: float
    compute_handoff_s: float
    compute_inprocess_s: float
    padding_ratio: float
    handoff_fit: float
    inprocess_fit: float
    models_identical: bool
    file_io_s: float | None = None


@dataclass
class BenchReport:
    label: str
    parts: int
    samples: list[RunSample] = field(default_factory=list)

    def _column(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.samples])

    def mean(self, name: str) -> float:
        return float(self._column(name).mean())

    def stdev(self, name: str) -> float:
        return float(self._column(name).std())  # population; one repeat -> 0

    def median(self, name: str) -> float:
        return float(np.median(self._column(name)))


def gen_synthetic(dims, rank: int, density: float, noise: float,
                  seed: int) -> CooTensor:
    """Low-rank synthetic tensor: uniform(0,1) ground-truth factors,
    reconstructed at ceil(density * prod(dims)) distinct uniformly sampled
    coordinates, plus optional Gaussian noise. Deterministic per seed."""
    dims = tuple(int(n) for n in dims)
    rng = np.random.default_rng(seed)
    factors = [rng.uniform(size=(n, rank)) for n in dims]
    total = 1
    for n in dims:
        total *= n
    nnz = int(np.ceil(density * total))
    if nnz == 0:
        return CooTensor(dims, np.empty(0, dtype=np.uint64),
                         np.empty(0, dtype=np.float64))
    if nnz > total:
        raise ValueError(f"density {density} exceeds the index space")
    flat = rng.choice(total, size=nnz, replace=False)
    coords = np.stack(np.unravel_index(flat, dims), axis=1).astype(np.uint64)
    values = np.sum(
        np.prod([f[coords[:, m]] for m, f in enumerate(factors)], axis=0),
        axis=1,
    )
    if noise:
        values = values + noise * rng.standard_normal(nnz)
    return CooTensor(dims, coords.reshape(-1), values)


def load_tensor(cfg: BenchConfig) -> CooTensor:
    if cfg.tensor_path:
        with open(cfg.tensor_path) as f:
            return parse_tns(f)
    if not cfg.synth_dims:
        raise ValueError("config needs either tensor_path or synth_dims")
    return gen_synthetic(cfg.synth_dims, cfg.synth_rank, cfg.density,
                         cfg.noise, cfg.seed)


def _spawn_consumer(metadata_path: str, cfg: BenchConfig) -> subprocess.Popen:
    cmd = [sys.executable, "-m", "tshm.consumer_main", metadata_path,
           "--cp-rank", str(cfg.cp_rank), "--iters", str(cfg.iterations),
           "--seed", str(cfg.seed), "--timeout", str(cfg.consumer_timeout),
           "--timing-runs", str(cfg.timing_runs)]
    if not cfg.warmup:
        cmd.append("--no-warmup")
    env = dict(os.environ)
    env.setdefault("OMP_NUM_THREADS", "1")  # one compute thread for bit-reproducibility
    env.setdefault("OPENBLAS_NUM_THREADS", "1")
    return subprocess.Popen(cmd, stdout=subprocess.PIPE,
                            stderr=subprocess.PIPE, env=env, text=True)


def _one_session(t: CooTensor, plan, cfg: BenchConfig, repeat: int,
                 workdir: str) -> RunSample:
    session = new_session_token()
    meta_path = os.path.join(workdir, f"session-{session}.meta")

    t0 = time.perf_counter()
    producer = publish(t, plan, session, meta_path)
    setup_s = time.perf_counter() - t0

    keep = False
    try:
        proc = _spawn_consumer(meta_path, cfg)
        # block on the pipe (no CPU) until the consumer is done, then the
        # flag wait returns immediately
        out, err = proc.communicate(timeout=cfg.consumer_timeout)
        if proc.returncode != 0:
            keep = cfg.keep
            raise TshmError(
                f"consumer exited with {proc.returncode}: {err.strip()}")
        stats = json.loads(out.splitlines()[-1])
        try:
            handoff_model = producer.await_done(cfg.consumer_timeout)
        except TshmError:
            keep = cfg.keep
            raise

        parts = split_parts(t, plan)
        if cfg.warmup:
            cp_als(parts, t.dims, cfg.cp_rank, 1, cfg.seed)
        compute_inprocess_s = None
        for _ in range(max(1, cfg.timing_runs)):
            t1 = time.perf_counter()
            local = cp_als(parts, t.dims, cfg.cp_rank, cfg.iterations, cfg.seed)
            elapsed = time.perf_counter() - t1
            compute_inprocess_s = (elapsed if compute_inprocess_s is None
                                   else min(compute_inprocess_s, elapsed))

        identical = (
            np.array_equal(handoff_model.weights, local.model.weights)
            and all(np.array_equal(a, b) for a, b in
                    zip(handoff_model.factors, local.model.factors))
        )
        file_io_s = _file_baseline(t) if cfg.file_baseline else None
        return RunSample(
            repeat=repeat,
            setup_s=setup_s,
            attach_s=float(stats["attach_s"]),
            compute_handoff_s=float(stats["compute_s"]),
            compute_inprocess_s=compute_inprocess_s,
            padding_ratio=padding_ratio(plan),
            handoff_fit=float(stats["fit"]),
            inprocess_fit=local.fit,
            models_identical=identical,
            file_io_s=file_io_s,
        )
    finally:
        if keep:
            print(f"session kept for inspection: {meta_path}", file=sys.stderr)
        else:
            producer.teardown()


def _file_baseline(t: CooTensor) -> float:
    """Transport cost of the file route: write .tns, read it back."""
    with tempfile.NamedTemporaryFile("w+", suffix=".tns", delete=True) as f:
        t0 = time.perf_counter()
        emit_tns(t, f)
        f.flush()
        f.seek(0)
        parse_tns(f, dims=t.dims)
        return time.perf_counter() - t0


def run_bench(cfg: BenchConfig) -> BenchReport:
    """Execute `cfg.repeats` full sessions and collect the samples."""
    t = load_tensor(cfg)
    plan = build_plan(t, cfg.parts)
    report = BenchReport(label=cfg.label, parts=cfg.parts)
    if cfg.keep:
        # sessions must outlive the run: never auto-delete their directory
        workdir = tempfile.mkdtemp(prefix="tshm-bench-")
        if cfg.warmup:
            _one_session(t, plan, cfg, -1, workdir)
        for r in range(cfg.repeats):
            report.samples.append(_one_session(t, plan, cfg, r, workdir))
        return report
    with tempfile.TemporaryDirectory(prefix="tshm-bench-") as workdir:
        if cfg.warmup:  # one untimed session to absorb first-touch costs
            _one_session(t, plan, cfg, -1, workdir)
        for r in range(cfg.repeats):
            report.samples.append(_one_session(t, plan, cfg, r, workdir))
    return report


def write_csv(report: BenchReport, stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for s in report.samples:
        w.writerow([report.label, report.parts, s.repeat,
                    f"{s.setup_s:.9f}", f"{s.attach_s:.9f}",
                    f"{s.compute_handoff_s:.9f}", f"{s.compute_inprocess_s:.9f}",
                    f"{s.padding_ratio:.6f}"])


def format_table(report: BenchReport) -> str:
    cols = ("setup_s", "attach_s", "compute_handoff_s",
            "compute_inprocess_s", "padding_ratio")
    out = io.StringIO()
    header = f"{'repeat':>8}" + "".join(f"{c:>22}" for c in cols)
    out.write(f"tensor={report.label} P={report.parts} "
              f"repeats={len(report.samples)}\n")
    out.write(header + "\n")
    for s in report.samples:
        out.write(f"{s.repeat:>8}" + "".join(
            f"{getattr(s, c):>22.6e}" for c in cols) + "\n")
    out.write(f"{'mean':>8}" + "".join(
        f"{report.mean(c):>22.6e}" for c in cols) + "\n")
    out.write(f"{'stdev':>8}" + "".join(
        f"{report.stdev(c):>22.6e}" for c in cols) + "\n")
    if report.samples and report.samples[0].file_io_s is not None:
        vals = [s.file_io_s for s in report.samples]
        out.write(f"file-I/O baseline (write+read .tns): "
                  f"mean {np.mean(vals):.6e} s\n")
    identical = all(s.models_identical for s in report.samples)
    out.write(f"handoff model identical to in-process model: {identical}\n")
    return out.getvalue()
