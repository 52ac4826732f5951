#!/usr/bin/env python3
"""Compare strategy sets 1-3 on the reference workload and check the directional claims.

    python scripts/run_experiment.py --out /tmp/exp                 # 100 MB generated
    python scripts/run_experiment.py --out /tmp/exp --mb 10         # quicker, same shape
    python scripts/run_experiment.py --out /tmp/exp --corpus DIR    # part1/, part2/, ...
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from artifact.experiment import (REFERENCE_CORPUS, REFERENCE_PARTS, generated_parts,
                                 reference_config, run_experiment)
from artifact.indexer import corpus_parts, split_evenly


def directional_checks(table) -> list[tuple[str, bool, str]]:
    ops = {n: table.total(f"set {n}", "total_ops") for n in (1, 2, 3)}
    nbytes = {n: table.total(f"set {n}", "total_bytes") for n in (1, 2, 3)}
    ratio = ops[2] / max(ops[1], 1)
    spread = nbytes[3] / max(nbytes[2], 1) - 1
    return [
        ("ops: set2 < set1", ops[2] < ops[1], f"{ops[2]} vs {ops[1]}"),
        ("ops: set3 < set2", ops[3] < ops[2], f"{ops[3]} vs {ops[2]}"),
        ("ops: set2 <= 0.8 x set1", ratio <= 0.8, f"ratio {ratio:.3f}"),
        ("bytes: set2 < set1", nbytes[2] < nbytes[1], f"{nbytes[2]} vs {nbytes[1]}"),
        ("bytes: set3 within 10% of set2", abs(spread) <= 0.10, f"{spread:+.2%}"),
    ]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, help="directory for the per-set indexes")
    ap.add_argument("--corpus", help="corpus directory instead of the generated one")
    ap.add_argument("--mb", type=float, help="size of the generated corpus in MiB")
    ap.add_argument("--seed", type=int, default=REFERENCE_CORPUS.seed)
    ap.add_argument("--parts", type=int, default=REFERENCE_PARTS)
    ap.add_argument("--csv", help="write the comparison table as CSV")
    ap.add_argument("--verify", action="store_true", help="verify every index afterwards")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    t0 = time.perf_counter()
    if args.corpus:
        parts = corpus_parts(args.corpus)
        if len(parts) == 1:
            parts = split_evenly(parts[0], args.parts)
    else:
        spec = replace(REFERENCE_CORPUS, seed=args.seed)
        if args.mb is not None:
            spec = replace(spec, total_bytes=int(args.mb * (1 << 20)))
        parts = generated_parts(spec, args.parts)
    print(f"corpus: {len(parts)} parts, {sum(map(len, parts))} documents "
          f"({time.perf_counter() - t0:.1f}s)")

    result = run_experiment(parts, args.out, sets=(1, 2, 3), base=reference_config(),
                            verify=args.verify)
    print(result.table.to_text())
    for n, secs in result.seconds.items():
        print(f"set {n}: {secs:.1f}s")
    if args.csv:
        Path(args.csv).write_text(result.table.to_csv())
    ok = True
    for name, passed, detail in directional_checks(result.table):
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}  ({detail})")
    if args.verify:
        bad = sum(len(v) for per in result.verify.values() for v in per.values())
        print(f"verify: {bad} problems")
        ok &= bad == 0
    print(f"total {time.perf_counter() - t0:.1f}s")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
