"""tshm-bench command line entry point."""

from __future__ import annotations

import argparse
import os
import sys

from .bench import BenchConfig, format_table, run_bench, write_csv


def _parse_dims(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad dims spec {text!r}, want e.g. 64x64x64")
    if not dims or any(n < 1 for n in dims):
        raise argparse.ArgumentTypeError(f"dims must be positive: {text!r}")
    return dims


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tshm-bench",
        description="Publish a sparse tensor through shared memory, run the "
                    "CP decomposition in a separate consumer process, and "
                    "report setup/attach/compute timings.",
    )
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--tensor", metavar="PATH", help=".tns file to load")
    src.add_argument("--synth", metavar="D0xD1x...", type=_parse_dims,
                     help="generate a synthetic tensor of these mode sizes")
    p.add_argument("--rank", type=int, default=3,
                   help="ground-truth rank of the synthetic tensor (default 3)")
    p.add_argument("--density", type=float, default=0.01,
                   help="synthetic nonzero density (default 0.01)")
    p.add_argument("--noise", type=float, default=0.0,
                   help="synthetic additive noise scale (default 0)")
    p.add_argument("--parts", type=int, default=4, metavar="P",
                   help="partition count (default 4)")
    p.add_argument("--cp-rank", type=int, default=16,
                   help="decomposition rank (default 16)")
    p.add_argument("--iters", type=int, default=5,
                   help="ALS iterations (default 5)")
    p.add_argument("--repeats", type=int, default=5,
                   help="timed repeats (default 5)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", metavar="PATH", help="also write per-repeat CSV")
    p.add_argument("--keep", action="store_true",
                   help="on a protocol error, keep the session regions and "
                        "metadata file for inspection")
    p.add_argument("--file-baseline", action="store_true",
                   help="also time the write/read .tns file route")
    p.add_argument("--no-warmup", action="store_true",
                   help="skip the untimed warmup session and compute warmups")
    p.add_argument("--timing-runs", type=int, default=3,
                   help="per repeat, report the fastest of this many "
                        "identical compute runs (default 3)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.tensor:
        label = os.path.splitext(os.path.basename(args.tensor))[0]
    else:
        label = "synth-" + "x".join(str(n) for n in args.synth)
    cfg = BenchConfig(
        label=label,
        parts=args.parts,
        cp_rank=args.cp_rank,
        iterations=args.iters,
        repeats=args.repeats,
        seed=args.seed,
        tensor_path=args.tensor,
        synth_dims=args.synth or (),
        synth_rank=args.rank,
        density=args.density,
        noise=args.noise,
        warmup=not args.no_warmup,
        keep=args.keep,
        file_baseline=args.file_baseline,
        timing_runs=args.timing_runs,
    )
    report = run_bench(cfg)
    sys.stdout.write(format_table(report))
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            write_csv(report, f)
        print(f"csv written to {args.csv}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
