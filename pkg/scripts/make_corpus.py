#!/usr/bin/env python3
"""Write the deterministic synthetic corpora used by the demo and the experiment.

    python scripts/make_corpus.py demo /tmp/demo5mb          # 5 MB, two parts
    python scripts/make_corpus.py reference /tmp/ref100mb    # 100 MB, two parts
    python scripts/make_corpus.py custom /tmp/c --mb 20 --parts 3 --seed 9
"""
from __future__ import annotations

import argparse
import logging
from dataclasses import replace

from artifact.corpus import CorpusSpec, write_corpus
from artifact.experiment import REFERENCE_CORPUS, REFERENCE_PARTS

PRESETS = {
    "demo": (CorpusSpec(total_bytes=5 << 20, seed=2024), 2),
    "reference": (REFERENCE_CORPUS, REFERENCE_PARTS),
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("preset", choices=[*PRESETS, "custom"])
    ap.add_argument("out", help="output directory (part1/, part2/, ... are created inside)")
    ap.add_argument("--mb", type=float, help="size in MiB (custom preset)")
    ap.add_argument("--parts", type=int, help="number of parts")
    ap.add_argument("--seed", type=int, help="random seed")
    ap.add_argument("--unknown-vocab", type=int, help="generated words unknown to the lexicon")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    spec, parts = PRESETS.get(args.preset, (CorpusSpec(), 2))
    if args.mb is not None:
        spec = replace(spec, total_bytes=int(args.mb * (1 << 20)))
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.unknown_vocab is not None:
        spec = replace(spec, unknown_vocab=args.unknown_vocab)
    if args.parts is not None:
        parts = args.parts
    dirs = write_corpus(args.out, spec, parts=parts)
    print(f"{len(dirs)} part directories under {args.out}")


if __name__ == "__main__":
    main()
