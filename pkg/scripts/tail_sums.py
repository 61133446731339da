"""Weighted tail sums for two polynomial weight sequences.

Prints the sum at powers of ten, together with (a2/a1) i^(d1 - d2), which
describes its decay when the second sequence falls faster than the first.
"""
import argparse

from distest.schedules import WeightSchedule, weighted_tail_sums

from _common import write_json


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--a1", type=float, default=1.0)
    p.add_argument("--d1", type=float, default=0.6)
    p.add_argument("--a2", type=float, default=1.0)
    p.add_argument("--d2", type=float, default=0.9)
    p.add_argument("--start", type=int, default=50)
    p.add_argument("--max-exp", type=int, default=6)
    p.add_argument("--out", help="optional JSON output path")
    args = p.parse_args()

    r1, r2 = WeightSchedule(args.a1, args.d1), WeightSchedule(args.a2, args.d2)
    y = weighted_tail_sums(r1, r2, args.start, 10**args.max_exp)
    rows = {}
    for k in range(2, args.max_exp + 1):
        i = 10**k
        if i >= args.start:
            rows[str(i)] = {"sum": float(y[i - args.start]),
                            "decay_rate": args.a2 / args.a1 * i ** (args.d1 - args.d2)}
    write_json(args.out, rows)


if __name__ == "__main__":
    main()
