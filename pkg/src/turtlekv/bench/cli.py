"""``bench`` command line.

    bench --workload a --records 100000 --value-bytes 128 --ops 100000 --chi 4
    bench chi-sweep --chis 1,2,4,8,16 --records 100000

Exit status: 0 on success, 1 if the store failed, 2 on a usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

from ..errors import InvalidParameter, TurtleKVError
from .report import EmptyReport, report
from .runner import chi_sweep, default_config, run_workload
from .workload import WORKLOADS, WorkloadSpec

EXIT_OK, EXIT_STORE, EXIT_USAGE = 0, 1, 2


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _chis(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError("expected a comma-separated list of integers") from e
    if not vals or any(v < 1 for v in vals) or vals != sorted(vals):
        raise argparse.ArgumentTypeError("χ values must be ascending integers >= 1")
    return vals


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-dir", help="parent directory for store files (default: system temp)")
    p.add_argument("--records", type=_positive, default=100_000)
    p.add_argument("--value-bytes", type=_positive, default=128)
    p.add_argument("--ops", type=int, default=100_000)
    p.add_argument("--threads", type=_positive, default=1)
    p.add_argument("--cache-bytes", type=_positive, default=None,
                   help="page cache budget (default: a third of the data size)")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--distribution", choices=("zipfian", "uniform"), default="zipfian")
    p.add_argument("--csv", help="also write the rows as CSV to this path")


def build_parsers() -> tuple[argparse.ArgumentParser, argparse.ArgumentParser]:
    run = argparse.ArgumentParser(prog="bench", description="Run one YCSB-style workload.")
    run.add_argument("--workload", choices=sorted(WORKLOADS), default="load")
    run.add_argument("--chi", type=_positive, default=1)
    _common(run)
    sweep = argparse.ArgumentParser(prog="bench chi-sweep",
                                    description="Load at each χ, retune to 1, measure reads.")
    sweep.add_argument("--chis", type=_chis, default=[1, 2, 4, 8, 16])
    sweep.add_argument("--workload", choices=sorted(WORKLOADS), default="load",
                       help="ignored; the sweep always runs load, c and e")
    sweep.add_argument("--rounds", type=_positive, default=5,
                       help="read slices per χ; each row keeps its fastest slice")
    _common(sweep)
    return run, sweep


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    run_p, sweep_p = build_parsers()
    sweeping = bool(argv) and argv[0] == "chi-sweep"
    parser = sweep_p if sweeping else run_p
    try:
        args = parser.parse_args(argv[1:] if sweeping else argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    if args.ops < 0:
        parser.print_usage(sys.stderr)
        print("bench: --ops must be >= 0", file=sys.stderr)
        return EXIT_USAGE
    if args.data_dir:
        os.makedirs(args.data_dir, exist_ok=True)
    try:
        spec = WorkloadSpec(
            name="load" if sweeping else args.workload,
            record_count=args.records,
            value_bytes=args.value_bytes,
            operation_count=args.ops,
            distribution=args.distribution,
            seed=args.seed,
            threads=args.threads,
        )
        if sweeping:
            config = default_config(spec, args.chis[0], args.cache_bytes)
            rows = chi_sweep(args.chis, spec, config, args.data_dir, rounds=args.rounds)
        else:
            config = default_config(spec, args.chi, args.cache_bytes)
            rows = run_workload(spec, config, args.data_dir, chi=args.chi)
    except InvalidParameter as e:
        print(f"bench: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TurtleKVError as e:
        print(f"bench: store error: {e}", file=sys.stderr)
        return EXIT_STORE
    try:
        sys.stdout.write(report(rows, args.csv))
    except EmptyReport as e:
        print(f"bench: {e}", file=sys.stderr)
        return EXIT_USAGE
    for r in rows:
        if not r.valid:
            print(f"bench: {r.workload} (chi={r.chi}) failed: {r.error}", file=sys.stderr)
    return EXIT_OK if all(r.valid for r in rows) else EXIT_STORE


if __name__ == "__main__":
    raise SystemExit(main())
