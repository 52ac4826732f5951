"""Command-line entry point ``updidx``.

Exit codes: 0 success, 1 configuration error, 2 I/O or integrity error,
3 corpus error (missing path, unreadable file, re-ingested document).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .corpus import CorpusSpec
from .dictionary import CorruptEntry
from .experiment import generated_parts, run_experiment
from .indexer import (SUBINDEXES, CorpusError, IndexSet, IngestOrderViolation, corpus_parts,
                      split_evenly, split_parts)
from .postings import CorruptBlock
from .search import PLANS, proximity_search
from .textpipe import Lexicon, LexiconError

log = logging.getLogger("artifact")

EXIT_CONFIG, EXIT_IO, EXIT_CORPUS = 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _lexicon(args) -> Lexicon:
    try:
        return Lexicon.load(args.lexicon)
    except (LexiconError, OSError) as exc:
        raise CliError(f"lexicon: {exc}", EXIT_CONFIG) from None


def _open_index(path, lexicon) -> IndexSet:
    if not (Path(path) / "indexset.json").exists():
        raise CliError(f"{path} is not an index directory", EXIT_IO)
    return IndexSet(path, lexicon)


def _ingest(ix: IndexSet, corpus: str, parts: int) -> list:
    groups = corpus_parts(corpus)
    if len(groups) == 1 and parts > 1:
        groups = split_evenly(groups[0], parts)
    reports = []
    for texts in groups:
        docs = ix.documents(texts)
        for chunk in split_parts(docs, ix.config.part_size_bytes):
            reports.append(ix.index_part(chunk))
    return reports


def _print_reports(reports, out) -> None:
    for i, r in enumerate(reports, 1):
        print(f"part {i}: {r.documents} documents, {r.tokens} tokens, {r.seconds:.1f}s", file=out)
        for name in SUBINDEXES:
            if name in r.keys:
                led = r.ledger[name]
                print(f"  {name:<17} keys {r.keys[name]:>9}  postings {r.postings[name]:>10}"
                      f"  phases {r.phases[name]:>4}  ops {led['read_ops'] + led['write_ops']:>6}",
                      file=out)


def cmd_build(args, out) -> int:
    cfg = load_config(args.config)
    lex = _lexicon(args)
    dest = Path(args.out)
    if (dest / "indexset.json").exists():
        raise CliError(f"{dest} already holds an index; use 'update' to extend it", EXIT_IO)
    ix = IndexSet(dest, lex, cfg)
    ix.save_settings()
    try:
        reports = _ingest(ix, args.corpus, args.parts)
    finally:
        ix.close()
    _print_reports(reports, out)
    return 0


def cmd_update(args, out) -> int:
    lex = _lexicon(args)
    ix = _open_index(args.out, lex)
    try:
        reports = _ingest(ix, args.corpus, args.parts)
    finally:
        ix.close()
    _print_reports(reports, out)
    return 0


def cmd_search(args, out) -> int:
    lex = _lexicon(args)
    ix = _open_index(args.index, lex)
    try:
        results = proximity_search(ix, args.query, args.window, force=args.plan)
        paths = ix.document_paths()
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    finally:
        ix.close()
    shown = results if args.limit <= 0 else results[:args.limit]
    for m in shown:
        pos = " ".join("-".join(map(str, t)) for t in m.positions)
        print(f"{m.doc_id}\t{paths.get(m.doc_id, '?')}\t{pos}", file=out)
    plan = results[0].plan if results else (args.plan or "-")
    print(f"# {len(results)} documents, plan {plan}", file=out)
    return 0


def cmd_stats(args, out) -> int:
    lex = _lexicon(args)
    ix = _open_index(args.index, lex)
    try:
        stats = ix.stats()
    finally:
        ix.close()
    if args.csv:
        head = ["index", "groups", "phases", "keys", "postings", "shared_streams", "clusters",
                "free_clusters", "part_clusters", "fl_clusters_used", "embedded", "tagged",
                "part", "chain", "segments", "bytes_read", "bytes_written", "read_ops",
                "write_ops"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(head)
        for name in SUBINDEXES:
            s = stats.get(name)
            if s is None:
                continue
            st = s["states"]
            w.writerow([name, s["groups"], s["phases"], s["keys"], s["postings"],
                        s["shared_streams"], s["clusters"], s["free_clusters"],
                        s["part_clusters"], s["fl_clusters_used"], st.get("EMBEDDED", 0),
                        st.get("TAGGED", 0), st.get("PART", 0), st.get("CHAIN", 0),
                        st.get("SEGMENTS", 0), *(s["ledger"][k] for k in head[-4:])])
        out.write(buf.getvalue())
    else:
        print(json.dumps(stats, indent=2, sort_keys=True), file=out)
    return 0


def cmd_verify(args, out) -> int:
    lex = _lexicon(args)
    ix = _open_index(args.index, lex)
    try:
        problems = ix.verify()
    finally:
        ix.close()
    bad = 0
    for name, items in problems.items():
        for p in items:
            print(f"{name}: {p}", file=out)
        bad += len(items)
    print(f"# {len(problems)} sub-indexes checked, {bad} problems", file=out)
    return EXIT_IO if bad else 0


def cmd_experiment(args, out) -> int:
    cfg = load_config(args.config)
    lex = _lexicon(args)
    try:
        sets = tuple(int(x) for x in args.sets.split(",") if x.strip())
    except ValueError:
        raise CliError(f"bad --sets {args.sets!r}", EXIT_CONFIG) from None
    if not sets or any(s not in (1, 2, 3) for s in sets):
        raise CliError("--sets takes numbers from 1, 2, 3", EXIT_CONFIG)
    if args.corpus:
        groups = corpus_parts(args.corpus)
        if len(groups) == 1:
            groups = split_evenly(groups[0], args.parts)
    else:
        spec = CorpusSpec(total_bytes=int(args.generate * (1 << 20)), seed=args.seed)
        groups = generated_parts(spec, args.parts, lex)
    result = run_experiment(groups, args.out, sets=sets, base=cfg, lexicon=lex,
                            verify=args.verify)
    print(result.table.to_text(), file=out)
    for number in sets:
        print(f"set {number}: {result.seconds[number]:.1f}s", file=out)
    if args.verify:
        bad = sum(len(v) for per in result.verify.values() for v in per.values())
        print(f"# verify: {bad} problems", file=out)
        if bad:
            return EXIT_IO
    if args.csv:
        Path(args.csv).write_text(result.table.to_csv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="updidx", description="Incrementally updatable "
                                "inverted files with cluster-stream storage strategies.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--lexicon", "--lexicon-dir", dest="lexicon", help="lexicon directory (forms.tsv, stop.txt, frequent.txt); "
                   "default: the bundled one")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="create an index from a corpus")
    b.add_argument("--corpus", required=True, help="directory of .txt files or a manifest")
    b.add_argument("--config", help="key = value configuration file")
    b.add_argument("--out", required=True, help="index directory")
    b.add_argument("--parts", type=int, default=1, help="split the corpus into N updates")
    b.set_defaults(func=cmd_build)

    u = sub.add_parser("update", help="add documents to an existing index")
    u.add_argument("--corpus", required=True)
    u.add_argument("--out", "--index", dest="out", required=True, help="index directory")
    u.add_argument("--parts", type=int, default=1)
    u.set_defaults(func=cmd_update)

    s = sub.add_parser("search", help="proximity search")
    s.add_argument("--index", required=True)
    s.add_argument("--query", required=True)
    s.add_argument("--window", type=int, default=1, help="largest gap between neighbours")
    s.add_argument("--plan", choices=PLANS, help="force an evaluation plan")
    s.add_argument("--limit", type=int, default=20, help="documents to print (0 = all)")
    s.set_defaults(func=cmd_search)

    st = sub.add_parser("stats", help="index statistics")
    st.add_argument("--index", required=True)
    st.add_argument("--csv", action="store_true", help="one CSV row per sub-index")
    st.set_defaults(func=cmd_stats)

    v = sub.add_parser("verify", help="check every stream and the allocator")
    v.add_argument("--index", required=True)
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("experiment", help="compare strategy sets on one corpus")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--corpus", help="corpus directory (part1/, part2/, ... or flat)")
    src.add_argument("--generate", type=float, metavar="MB",
                     help="use a synthetic Zipfian corpus of this size")
    e.add_argument("--seed", type=int, default=1)
    e.add_argument("--parts", type=int, default=2)
    e.add_argument("--sets", default="1,2,3")
    e.add_argument("--config", help="key = value configuration file")
    e.add_argument("--out", required=True, help="directory for the per-set indexes")
    e.add_argument("--csv", help="also write the comparison as CSV")
    e.add_argument("--verify", action="store_true", help="verify every index afterwards")
    e.set_defaults(func=cmd_experiment)
    return p


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, IngestOrderViolation) as exc:
        print(f"corpus error: {exc}", file=sys.stderr)
        return EXIT_CORPUS
    except (OSError, CorruptEntry, CorruptBlock) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
