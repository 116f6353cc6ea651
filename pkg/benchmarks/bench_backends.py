"""Compare the compiled and numpy LIF backends.

    python benchmarks/bench_backends.py [--shape 8x96x56x56] [--repeats 10]

Prints one row per (op, g, backend) and the native/python speedup. Timings
depend on the machine; nothing here is asserted.
"""
from __future__ import annotations

import argparse
import sys

from lifmixer.bench import format_table, time_op
from lifmixer.lif import available_backends


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--shape", default="8x96x56x56")
    ap.add_argument("--groups", default="2,4,7,56")
    ap.add_argument("--repeats", type=int, default=10)
    ap.add_argument("--warmup", type=int, default=2)
    args = ap.parse_args(argv)
    shape = tuple(int(s) for s in args.shape.split("x"))
    groups = [int(g) for g in args.groups.split(",")]

    backends = available_backends()
    if "native" not in backends:
        print("native extension not built; only the numpy backend is available")
    rows, speedups = [], []
    for op in ("lif_forward", "lif_backward"):
        for g in groups:
            by_backend = {}
            for be in backends:
                t = time_op(op, shape, g, args.repeats, args.warmup, be)
                rows.append(t)
                by_backend[be] = t.median
            if len(by_backend) == 2:
                speedups.append((op, g, by_backend["python"] / by_backend["native"]))
    print(f"shape {args.shape}, repeats {args.repeats}")
    print(format_table(rows))
    if speedups:
        print("\nspeedup native vs python (median)")
        for op, g, s in speedups:
            print(f"  {op:<13} g={g:<3} {s:5.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
