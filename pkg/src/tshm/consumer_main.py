"""Standalone consumer process: attach, decompose, reply, report timings.

Run as `python -m tshm.consumer_main METADATA [options]`. Prints a single
JSON line with attach/compute timings and the final fit so the spawning
benchmark can collect consumer-side measurements from stdout.

Exit codes: 0 success, 2 validation failure (already signaled to the
producer), 3 handshake timeout, 4 compute failure (signaled ERROR 4).
"""

from __future__ import annotations

import argparse
import json
import sys
import time

from . import handshake
from .consumer import attach_session
from .errors import HandshakeTimeout, TshmError, ValidationError


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tshm-consume",
        description="Attach to a published tensor session, run CP-ALS, signal DONE.",
    )
    parser.add_argument("metadata", help="path to the session metadata file")
    parser.add_argument("--cp-rank", type=int, default=16)
    parser.add_argument("--iters", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--timeout", type=float, default=30.0)
    parser.add_argument("--timing-runs", type=int, default=3,
                        help="report the fastest of this many identical "
                         "decompositions (they are bit-identical; default 3)")
    parser.add_argument("--no-warmup", action="store_true",
                        help="skip the untimed warmup decomposition")
    args = parser.parse_args(argv)

    t0 = time.perf_counter()
    try:
        session = attach_session(args.metadata, timeout=args.timeout)
    except ValidationError as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return 2
    except HandshakeTimeout as exc:
        print(f"timed out: {exc}", file=sys.stderr)
        return 3
    attach_s = time.perf_counter() - t0

    with session:
        nnz = session.nnz
        try:
            if not args.no_warmup:
                session.cp_als(args.cp_rank, 1, args.seed)
            compute_s = None
            for _ in range(max(1, args.timing_runs)):
                t1 = time.perf_counter()
                result = session.cp_als(args.cp_rank, args.iters, args.seed)
                elapsed = time.perf_counter() - t1
                compute_s = elapsed if compute_s is None else min(compute_s, elapsed)
        except (TshmError, ValueError, FloatingPointError) as exc:
            session.fail(handshake.ERR_COMPUTE)
            print(f"compute failed: {exc}", file=sys.stderr)
            return 4
        session.finish(result.model)

    print(json.dumps({
        "attach_s": attach_s,
        "compute_s": compute_s,
        "fit": result.fit,
        "nnz": nnz,
    }))
    return 0


if __name__ == "__main__":
    sys.exit(main())
