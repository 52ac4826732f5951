"""Index set construction and merge-free incremental update.

An :class:`IndexSet` holds five sub-indexes, each a separate :class:`SubIndex`
with its own files and I/O ledger:

    ordinary_known     key: one known lemma
    ordinary_unknown   key: one unknown lemma (the word itself)
    pairs_kk           key: (w, v), both known, v within max_distance after w
    pairs_ku           key: (w, v), at least one unknown
    stopseq            key: a sequence of 2..stop_seq_max_len consecutive stop lemmas

A part of the collection is tokenized once; postings are then emitted per
sub-index and per key group, one phase per group. Updating with a new part
appends to the existing posting lists and never merges.
"""
from __future__ import annotations

import functools
import json
import logging
import os
import re
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .cluster_store import StoreConfig
from .dictionary import KeyKind
from .engine import EngineConfig, SubIndex
from .io_layer import IoLedger
from .phase_cache import CacheConfig, plan_phases, stable_hashes
from .postings import encode_runs
from .streams import StrategySet
from .textpipe import BulkTokenizer, Lexicon, TokenArrays, WordClass

log = logging.getLogger(__name__)

SUBINDEXES = ("ordinary_known", "ordinary_unknown", "pairs_kk", "pairs_ku", "stopseq")
ROW_LABELS = {
    "ordinary_known": "Known lemmas ordinary index",
    "ordinary_unknown": "Unknown lemmas ordinary index",
    "pairs_kk": "Extended (w, v) index, w and v known",
    "pairs_ku": "Extended (w, v) index, one lemma unknown",
    "stopseq": "Index of stop lemma sequences",
}
KEY_CLASS = {"ordinary_known": "known", "ordinary_unknown": "unknown", "pairs_kk": "known",
             "pairs_ku": "unknown", "stopseq": "known"}
_KINDS = {"ordinary_known": KeyKind.LEMMA, "ordinary_unknown": KeyKind.LEMMA,
          "pairs_kk": KeyKind.LEMMA_PAIR, "pairs_ku": KeyKind.LEMMA_PAIR,
          "stopseq": KeyKind.STOP_SEQUENCE}
DOC_RECORD = struct.Struct("<QQq230sH")
SETTINGS_FILE = "indexset.json"
ROW_BUDGET = 4_000_000      # posting rows materialized at once while emitting


class IngestOrderViolation(ValueError):
    pass


class CorpusError(ValueError):
    """The corpus path is missing or a listed document cannot be read."""


# -- keys ------------------------------------------------------------------------------------------
def key_canonicalize(kind: int, components: Sequence) -> bytes:
    """kind byte, component count, then per component: 0x00 + u32 lemma id or
    0x01 + u16 length + UTF-8 word (unknown lemma)."""
    out = bytearray((int(kind), len(components)))
    for c in components:
        if isinstance(c, str):
            b = c.encode("utf-8")
            out += b"\x01" + len(b).to_bytes(2, "little") + b
        else:
            out += b"\x00" + int(c).to_bytes(4, "little")
    return bytes(out)


def parse_key(key: bytes) -> tuple[KeyKind, tuple]:
    kind = KeyKind(key[0])
    n = key[1]
    pos = 2
    comps = []
    for _ in range(n):
        if key[pos] == 0:
            comps.append(int.from_bytes(key[pos + 1:pos + 5], "little"))
            pos += 5
        else:
            ln = int.from_bytes(key[pos + 1:pos + 3], "little")
            comps.append(key[pos + 3:pos + 3 + ln].decode("utf-8"))
            pos += 3 + ln
    if pos != len(key):
        raise ValueError("trailing bytes in key")
    return kind, tuple(comps)


def _component_bytes(lemma_id: int, toks: TokenArrays) -> bytes:
    if lemma_id < toks.word_count:
        return b"\x00" + int(lemma_id).to_bytes(4, "little")
    b = toks.unknown[lemma_id - toks.word_count].encode("utf-8")
    return b"\x01" + len(b).to_bytes(2, "little") + b


def _keys_for_rows(kind: int, cols: list, toks: TokenArrays) -> list[bytes]:
    """Canonical keys for rows of lemma-id columns (-1 marks an absent component)."""
    n = len(cols[0])
    top = max((int(c.max()) for c in cols if len(c)), default=-1)
    table = np.empty(top + 2, dtype=object)       # slot -1 (the last) holds b""
    table[-1] = b""
    used = np.unique(np.concatenate(cols))
    for x in used[used >= 0].tolist():
        table[x] = _component_bytes(x, toks)
    width = np.zeros(n, np.int64)
    for c in cols:
        width += c >= 0
    heads = np.array([bytes((int(kind), w)) for w in range(len(cols) + 1)], dtype=object)
    keys = heads[width]
    for c in cols:
        keys = keys + table[c]
    return keys.tolist()


# -- configuration -----------------------------------------------------------------------------------
@dataclass
class BuildConfig:
    engine: EngineConfig = field(default_factory=EngineConfig)
    max_distance: int = 5
    stop_seq_max_len: int = 3
    part_size_bytes: int = 0          # 0: every build/update call is one part
    known_groups: Optional[int] = None
    unknown_groups: Optional[int] = None
    reread_source: bool = True

    def __post_init__(self):
        if self.max_distance < 1:
            raise ValueError("max_distance must be >= 1")
        if self.stop_seq_max_len < 2:
            raise ValueError("stop_seq_max_len must be >= 2")
        for v in (self.known_groups, self.unknown_groups):
            if v is not None and v < 1:
                raise ValueError("group counts must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["engine"]["strategies"]["enabled"] = sorted(self.engine.strategies.enabled)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BuildConfig":
        e = dict(d["engine"])
        st = dict(e["strategies"])
        if st.get("chain_limit_jitter") is not None:
            st["chain_limit_jitter"] = tuple(st["chain_limit_jitter"])
        store = dict(e["store"])
        store["part_divisions"] = tuple(store["part_divisions"])
        engine = EngineConfig(StoreConfig(**store), CacheConfig(**e["cache"]),
                              StrategySet(**st), e["ds_small_threshold"], e["ds_pack_capacity"])
        rest = {k: v for k, v in d.items() if k != "engine"}
        return cls(engine=engine, **rest)


@dataclass
class Document:
    doc_id: int
    path: str
    text: str
    nbytes: int


@dataclass
class PartReport:
    documents: int = 0
    tokens: int = 0
    postings: dict = field(default_factory=dict)
    keys: dict = field(default_factory=dict)
    phases: dict = field(default_factory=dict)
    ledger: dict = field(default_factory=dict)
    seconds: float = 0.0


# -- posting generation ------------------------------------------------------------------------------
@dataclass
class KeyedPostings:
    """Postings of one sub-index for one part, sorted by (key, doc, position)."""

    cols: list            # lemma-id columns, -1 padded
    doc: np.ndarray
    pos: np.ndarray
    small: np.ndarray     # per posting: small-stream hint of its key

    def runs(self) -> np.ndarray:
        n = len(self.doc)
        if n == 0:
            return np.zeros(0, np.int64)
        change = np.zeros(n, bool)
        change[0] = True
        for c in self.cols:
            change[1:] |= c[1:] != c[:-1]
        return np.flatnonzero(change)


def _pack_words(fields: list) -> list:
    """Pack non-negative int columns, most significant first, into as few int64 words as fit."""
    words, word, used = [], None, 0
    for f in fields:
        bits = max(1, int(f.max()).bit_length()) if len(f) else 1
        if word is not None and used + bits > 63:
            words.append(word)
            word, used = None, 0
        f = f.astype(np.int64, copy=False)
        word = f if word is None else (word << bits) | f
        used += bits
    words.append(word)
    return words


def _sorted_unique(cols: list, doc, pos, small) -> KeyedPostings:
    if len(doc) == 0:
        return KeyedPostings([c[:0] for c in cols], doc[:0], pos[:0], small[:0])
    lows = [int(c.min()) for c in cols]
    words = _pack_words([c - lo for c, lo in zip(cols, lows)] + [doc, pos])
    order = np.argsort(words[0], kind="stable") if len(words) == 1 \
        else np.lexsort(tuple(reversed(words)))
    keep = np.ones(len(doc), bool)
    same = np.ones(len(doc) - 1, bool)
    for w in words:
        w = w[order]
        same &= w[1:] == w[:-1]
    keep[1:] = ~same
    order = order[keep]
    return KeyedPostings([c[order] for c in cols], doc[order], pos[order], small[order])


def ordinary_postings(toks: TokenArrays) -> tuple[KeyedPostings, KeyedPostings]:
    return (ordinary_range(toks, (0, toks.word_count)),
            ordinary_range(toks, (toks.word_count, len(toks.unknown) + toks.word_count)))


def ordinary_range(toks: TokenArrays, lemma_range: tuple[int, int]) -> KeyedPostings:
    """Single-lemma postings for lemma ids lo <= id < hi."""
    lem = toks.lemma
    sel = np.flatnonzero((lem >= lemma_range[0]) & (lem < lemma_range[1]))
    tok = toks.entry_token[sel]
    return _sorted_unique([lem[sel]], toks.tok_doc[tok], toks.tok_pos[tok],
                          toks.cls[sel] == WordClass.OTHER)


def lemma_ranges(toks: TokenArrays, lo: int, hi: int, weight: int,
                 budget: int) -> list[tuple[int, int]]:
    """Split [lo, hi) into ranges holding about ``budget / weight`` lemma occurrences each."""
    if hi <= lo:
        return []
    counts = np.bincount(toks.lemma, minlength=hi)[lo:hi].astype(np.int64) * weight
    total = int(counts.sum())
    n = max(1, -(-total // budget))
    if n == 1:
        return [(lo, hi)]
    cum = np.cumsum(counts)
    cuts = np.searchsorted(cum, np.arange(1, n) * (total / n)) + lo
    edges = sorted(set([lo, *cuts.tolist(), hi]))
    return list(zip(edges[:-1], edges[1:]))


def _token_pairs(toks: TokenArrays, d: int,
                 first: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Entry index pairs (a, b) for every lemma combination of tokens t and t+d in one document.

    ``first`` optionally masks the tokens allowed in the t role.
    """
    T = len(toks.tok_doc)
    if T <= d:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    same = toks.tok_doc[:-d] == toks.tok_doc[d:]
    if first is not None:
        same &= first[:-d]
    t = np.flatnonzero(same)
    ca, cb = toks.tok_count[t], toks.tok_count[t + d]
    k = ca * cb
    if np.all(k == 1):
        return toks.tok_start[t], toks.tok_start[t + d]
    idx = np.repeat(np.arange(len(t)), k)
    within = np.arange(int(k.sum())) - np.repeat(np.cumsum(k) - k, k)
    a = toks.tok_start[t][idx] + within // cb[idx]
    b = toks.tok_start[t + d][idx] + within % cb[idx]
    return a, b


def pair_postings(toks: TokenArrays, max_distance: int, unknown: bool,
                  w_range: Optional[tuple[int, int]] = None) -> KeyedPostings:
    """(w, v) postings at w's position for v within max_distance after w; one member must
    be a stop or frequent lemma. ``unknown`` selects pairs with an unknown member, otherwise
    pairs of two lexicon lemmas. ``w_range`` keeps only lemma ids lo <= w < hi."""
    A, B = [], []
    wc = toks.word_count
    first = None
    if w_range is not None:
        lem = toks.lemma
        first = np.zeros(len(toks.tok_doc), bool)
        first[toks.entry_token[(lem >= w_range[0]) & (lem < w_range[1])]] = True
    for d in range(1, max_distance + 1):
        a, b = _token_pairs(toks, d, first)
        ok = (toks.cls[a] > 0) | (toks.cls[b] > 0)
        has_unknown = (toks.lemma[a] >= wc) | (toks.lemma[b] >= wc)
        ok &= has_unknown if unknown else ~has_unknown
        if w_range is not None:
            w = toks.lemma[a]
            ok &= (w >= w_range[0]) & (w < w_range[1])
        A.append(a[ok])
        B.append(b[ok])
    a = np.concatenate(A) if A else np.zeros(0, np.int64)
    b = np.concatenate(B) if B else np.zeros(0, np.int64)
    small = (toks.cls[a] == WordClass.OTHER) | (toks.cls[b] == WordClass.OTHER)
    return _sorted_unique([toks.lemma[a], toks.lemma[b]], toks.entry_doc[a],
                          toks.entry_pos[a], small)


def stop_sequence_postings(toks: TokenArrays, max_len: int) -> KeyedPostings:
    """Every sequence of 2..max_len consecutive stop lemmas, anchored at its first word."""
    is_stop = toks.cls == WordClass.STOP
    stop_entries = np.flatnonzero(is_stop)
    entry_tok = toks.entry_token[stop_entries]
    T = len(toks.tok_doc)
    s_count = np.bincount(entry_tok, minlength=T).astype(np.int64)
    s_start = np.zeros(T, np.int64)
    if T:
        np.cumsum(s_count[:-1], out=s_start[1:])
    s_lemma = toks.lemma[stop_entries]
    cols_all = [[] for _ in range(max_len)]
    docs, poss = [], []
    for L in range(2, max_len + 1):
        if T < L:
            break
        n = T - L + 1
        t = np.arange(n)
        ok = np.ones(n, bool)
        for j in range(L):
            ok &= s_count[t + j] > 0
            if j:
                ok &= toks.tok_doc[t + j] == toks.tok_doc[t]
        t = t[ok]
        # cartesian product of the stop lemmas at t, t+1, ..., t+L-1
        rows = np.arange(len(t))
        combo: list = []
        for j in range(L):
            cnt = s_count[t[rows] + j]
            idx = np.repeat(np.arange(len(rows)), cnt)
            within = np.arange(int(cnt.sum())) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            combo = [c[idx] for c in combo] + [s_start[t[rows[idx]] + j] + within]
            rows = rows[idx]
        for j in range(max_len):
            cols_all[j].append(s_lemma[combo[j]] if j < L else np.full(len(rows), -1, np.int64))
        docs.append(toks.tok_doc[t][rows])
        poss.append(toks.tok_pos[t][rows])
    if not docs:
        z = np.zeros(0, np.int64)
        return KeyedPostings([z] * max_len, z, z, np.zeros(0, bool))
    cols = [np.concatenate(c) for c in cols_all]
    doc, pos = np.concatenate(docs), np.concatenate(poss)
    small = cols[2] >= 0 if max_len >= 3 else np.zeros(len(doc), bool)
    return _sorted_unique(cols, doc, pos, small)


@dataclass
class PreparedRuns:
    """Per-key columns of one part of one sub-index, ready for appending.

    Key ``i`` has ``counts[i]`` postings encoded in ``blob[starts[i]:ends[i]]``
    (context-free, first posting absolute).
    """

    keys: np.ndarray          # object array of canonical keys
    hashes: np.ndarray        # uint64
    blob: bytes
    starts: np.ndarray
    ends: np.ndarray
    counts: np.ndarray
    first_doc: np.ndarray
    first_pos: np.ndarray
    last_doc: np.ndarray
    last_pos: np.ndarray
    small: np.ndarray

    @classmethod
    def of(cls, kind: int, kp: KeyedPostings, toks: TokenArrays) -> "PreparedRuns":
        starts = kp.runs()
        n = len(kp.doc)
        blob, offsets = encode_runs(kp.doc, kp.pos, starts)
        ends = np.append(starts[1:], n).astype(np.int64)[:len(starts)]
        keys = np.empty(len(starts), dtype=object)
        if n:
            keys[:] = _keys_for_rows(kind, [c[starts] for c in kp.cols], toks)
        hashes = stable_hashes(keys.tolist())
        return cls(keys, hashes, blob, offsets[:-1], offsets[1:], ends - starts,
                   kp.doc[starts], kp.pos[starts], kp.doc[ends - 1], kp.pos[ends - 1],
                   kp.small[starts])

    @classmethod
    def empty(cls) -> "PreparedRuns":
        z = np.zeros(0, np.int64)
        return cls(np.empty(0, dtype=object), np.zeros(0, np.uint64), b"", z, z, z, z, z, z, z,
                   np.zeros(0, bool))

    @classmethod
    def join(cls, pieces: list["PreparedRuns"]) -> "PreparedRuns":
        if not pieces:
            return cls.empty()
        if len(pieces) == 1:
            return pieces[0]
        shift = np.cumsum([0] + [len(p.blob) for p in pieces[:-1]])

        def cat(name):
            return np.concatenate([getattr(p, name) for p in pieces])

        return cls(cat("keys"), cat("hashes"), b"".join(p.blob for p in pieces),
                   np.concatenate([p.starts + s for p, s in zip(pieces, shift)]),
                   np.concatenate([p.ends + s for p, s in zip(pieces, shift)]),
                   cat("counts"), cat("first_doc"), cat("first_pos"), cat("last_doc"),
                   cat("last_pos"), cat("small"))

    def groups(self, G: int) -> np.ndarray:
        """``(h * G) >> 64`` per key, computed exactly in 64-bit pieces."""
        g = np.uint64(G)
        hi, lo = self.hashes >> np.uint64(32), self.hashes & np.uint64(0xFFFFFFFF)
        return (hi * g + ((lo * g) >> np.uint64(32))) >> np.uint64(32)


# -- the index set -------------------------------------------------------------------------------------
class IndexSet:
    def __init__(self, directory, lexicon: Optional[Lexicon] = None,
                 config: Optional[BuildConfig] = None, audit=None):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        settings_path = self.dir / SETTINGS_FILE
        self.lexicon = lexicon or Lexicon.load()
        if settings_path.exists():
            settings = json.loads(settings_path.read_text())
            if config is not None and config.to_dict() != settings["config"]:
                log.info("index exists; keeping its stored configuration")
            self.config = BuildConfig.from_dict(settings["config"])
            if settings.get("lexicon") != self.lexicon.fingerprint():
                raise ValueError("index was built with a different lexicon")
            self.groups = settings["groups"]
        else:
            self.config = config or BuildConfig()
            self.groups = {}
        self.audit = audit
        self.subs: dict[str, SubIndex] = {}
        for name in self.groups:
            self.subs[name] = SubIndex(self.dir, name, self.config.engine, self.groups[name],
                                       self._sub_audit(name))
        self.docs_path = self.dir / "index.docs"
        self.next_doc_id, self.known_paths = self._load_docs()
        self.source_ledger = IoLedger()
        self._tokenizer = BulkTokenizer(self.lexicon)

    def _sub_audit(self, name: str):
        """Stream events of one sub-index, reported as ``audit(name, *event)``."""
        return None if self.audit is None else functools.partial(self.audit, name)

    # -- documents ------------------------------------------------------------------------------
    def _load_docs(self) -> tuple[int, set]:
        if not self.docs_path.exists():
            return 1, set()
        raw = self.docs_path.read_bytes()
        last, paths = 0, set()
        for doc_id, _, _, path, plen in DOC_RECORD.iter_unpack(raw):
            last = doc_id
            paths.add(path[:plen].decode("utf-8", "replace"))
        return last + 1, paths

    def document_paths(self) -> dict[int, str]:
        if not self.docs_path.exists():
            return {}
        return {doc_id: path[:plen].decode("utf-8", "replace")
                for doc_id, _, _, path, plen in DOC_RECORD.iter_unpack(self.docs_path.read_bytes())}

    def _record_docs(self, docs: Sequence[Document]) -> None:
        now = time.time_ns()
        with open(self.docs_path, "ab") as f:
            for d in docs:
                p = d.path.encode("utf-8")[:230]
                f.write(DOC_RECORD.pack(d.doc_id, d.nbytes, now, p, len(p)))
        self.known_paths.update(d.path for d in docs)

    def documents(self, texts: Iterable[tuple[str, str]]) -> list[Document]:
        """Assign doc ids to (path, text) pairs in order."""
        out = []
        seen = set()
        doc_id = self.next_doc_id
        for path, text in texts:
            if path in self.known_paths or path in seen:
                raise IngestOrderViolation(f"{path} was already ingested")
            seen.add(path)
            out.append(Document(doc_id, path, text, len(text.encode("utf-8"))))
            doc_id += 1
        return out

    # -- settings -----------------------------------------------------------------------------
    def save_settings(self) -> None:
        data = {"config": self.config.to_dict(), "groups": self.groups,
                "lexicon": self.lexicon.fingerprint()}
        (self.dir / SETTINGS_FILE).write_text(json.dumps(data, indent=1, sort_keys=True))

    def _open_subindex(self, name: str, counts: np.ndarray) -> SubIndex:
        """The named sub-index, created on first ingest with its phase-group count."""
        sub = self.subs.get(name)
        if sub is not None:
            return sub
        cfg = self.config
        cs = cfg.engine.store.cluster_size
        cls = KEY_CLASS[name]
        override = cfg.known_groups if cls == "known" else cfg.unknown_groups
        if override is not None:
            g = override
        else:
            # active streams: keys whose data in this part exceeds half a cluster
            g = plan_phases({cls: int(np.sum(counts * 3 > cs // 2))}, cfg.engine.cache,
                            cs).group_count(cls)
        self.groups[name] = g
        sub = self.subs[name] = SubIndex(self.dir, name, cfg.engine, g, self._sub_audit(name))
        return sub

    # -- indexing ---------------------------------------------------------------------------------
    def _emit_one(self, name: str, toks: TokenArrays) -> KeyedPostings:
        if name == "ordinary_known":
            return ordinary_postings(toks)[0]
        if name == "ordinary_unknown":
            return ordinary_postings(toks)[1]
        if name == "pairs_kk":
            return pair_postings(toks, self.config.max_distance, unknown=False)
        if name == "pairs_ku":
            return pair_postings(toks, self.config.max_distance, unknown=True)
        return stop_sequence_postings(toks, self.config.stop_seq_max_len)

    def emit(self, toks: TokenArrays) -> dict[str, KeyedPostings]:
        return {name: self._emit_one(name, toks) for name in SUBINDEXES}

    def _emit_chunks(self, name: str, toks: TokenArrays) -> Iterator[KeyedPostings]:
        """Postings of one sub-index in pieces with disjoint key sets."""
        wc, top = toks.word_count, toks.word_count + len(toks.unknown)
        md = self.config.max_distance
        if name == "ordinary_known":
            for r in lemma_ranges(toks, 0, wc, 1, ROW_BUDGET):
                yield ordinary_range(toks, r)
        elif name == "ordinary_unknown":
            for r in lemma_ranges(toks, wc, top, 1, ROW_BUDGET):
                yield ordinary_range(toks, r)
        elif name in ("pairs_kk", "pairs_ku"):
            for r in lemma_ranges(toks, 0, top, 2 * md, ROW_BUDGET):
                yield pair_postings(toks, md, unknown=name == "pairs_ku", w_range=r)
        else:
            yield stop_sequence_postings(toks, self.config.stop_seq_max_len)

    def index_part(self, docs: Sequence[Document]) -> PartReport:
        """Index one part; sub-indexes are filled one after another to bound memory."""
        t0 = time.perf_counter()
        report = PartReport(documents=len(docs))
        if not docs:
            return report
        ids = [d.doc_id for d in docs]
        if ids[0] < self.next_doc_id or any(b <= a for a, b in zip(ids, ids[1:])):
            raise IngestOrderViolation("document ids must increase across and within parts")
        toks = self._tokenizer.tokenize((d.doc_id, d.text) for d in docs)
        report.tokens = len(toks.tok_doc)
        for name in SUBINDEXES:
            runs = PreparedRuns.join([PreparedRuns.of(_KINDS[name], kp, toks)
                                      for kp in self._emit_chunks(name, toks)])
            sub = self._open_subindex(name, runs.counts)
            before = sub.ledger
            self._append_subindex(sub, runs, docs)
            report.postings[name] = int(runs.counts.sum())
            report.keys[name] = len(runs.keys)
            report.phases[name] = sub.group_count
            report.ledger[name] = (sub.ledger - before).to_dict()
            del runs
        self.save_settings()
        self._record_docs(docs)
        self.next_doc_id = ids[-1] + 1
        report.seconds = time.perf_counter() - t0
        return report

    def _append_subindex(self, sub: SubIndex, runs: "PreparedRuns",
                         docs: Sequence[Document]) -> None:
        if len(runs.keys) == 0:
            return
        G = sub.group_count
        groups = runs.groups(G)
        order = np.argsort(groups, kind="stable")
        bounds = np.searchsorted(groups[order], np.arange(G + 1))
        append_runs = sub.streams.append_runs
        for g in range(G):
            if self.config.reread_source:
                self._reread(docs)
            sub.begin_phase(g)
            sel = order[bounds[g]:bounds[g + 1]]
            append_runs(runs.keys[sel].tolist(), runs.hashes[sel], runs.blob,
                        *(col[sel] for col in (runs.starts, runs.ends, runs.counts,
                                               runs.first_doc, runs.first_pos,
                                               runs.last_doc, runs.last_pos, runs.small)))
            sub.end_phase()

    def _reread(self, docs: Sequence[Document]) -> None:
        """Phases read the part's source text again; charged to the source ledger."""
        for d in docs:
            if os.path.isfile(d.path):
                with open(d.path, "rb") as f:
                    n = len(f.read())
            else:
                n = d.nbytes
            self.source_ledger.read_ops += 1
            self.source_ledger.bytes_read += n

    # -- queries ------------------------------------------------------------------------------------
    def subindex_for(self, kind: int, components: Sequence) -> Optional[str]:
        unknown = any(isinstance(c, str) for c in components)
        if kind == KeyKind.LEMMA:
            return "ordinary_unknown" if unknown else "ordinary_known"
        if kind == KeyKind.LEMMA_PAIR:
            return "pairs_ku" if unknown else "pairs_kk"
        return "stopseq"

    def lookup(self, kind: int, components: Sequence):
        name = self.subindex_for(kind, components)
        sub = self.subs.get(name)
        if sub is None:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        return sub.lookup_arrays(key_canonicalize(kind, components))

    def lookup_list(self, kind: int, components: Sequence) -> list[tuple[int, int]]:
        name = self.subindex_for(kind, components)
        sub = self.subs.get(name)
        if sub is None:
            return []
        return [tuple(p) for p in sub.lookup(key_canonicalize(kind, components))]

    # -- reporting -------------------------------------------------------------------------------------
    def ledgers(self) -> dict[str, IoLedger]:
        return {name: (self.subs[name].ledger if name in self.subs else IoLedger())
                for name in SUBINDEXES}

    def build_report(self) -> "LedgerTable":
        return LedgerTable({self.config.engine.strategies.label(): self.ledgers()})

    def verify(self) -> dict[str, list[str]]:
        return {name: sub.verify() for name, sub in self.subs.items()}

    def stats(self) -> dict:
        return {name: sub.stats() for name, sub in self.subs.items()}

    def close(self) -> None:
        for sub in self.subs.values():
            sub.close()
        self.subs = {}


@dataclass
class LedgerTable:
    """Per sub-index I/O totals for one or more strategy sets (columns)."""

    columns: dict      # label -> {subindex: IoLedger}

    def rows(self) -> list[dict]:
        out = []
        for name in SUBINDEXES:
            for label, ledgers in self.columns.items():
                led = ledgers.get(name, IoLedger())
                out.append({"index": name, "set": label, **led.to_dict(),
                            "total_bytes": led.total_bytes, "total_ops": led.total_ops})
        return out

    def to_csv(self) -> str:
        head = ["index", "set", "bytes_read", "bytes_written", "read_ops", "write_ops",
                "total_bytes", "total_ops"]
        lines = [",".join(head)]
        for r in self.rows():
            lines.append(",".join(str(r[h]) for h in head))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        labels = list(self.columns)
        width = max(len(v) for v in ROW_LABELS.values()) + 2
        out = []
        for metric, title, fmt in (("total_bytes", "Bytes written or read", "{:>16,}"),
                                   ("total_ops", "I/O operations", "{:>16,}")):
            out.append(title)
            out.append("".ljust(width) + "".join(f"{lab:>16}" if len(lab) <= 15 else
                                                 f"{'set ' + str(i + 1):>16}"
                                                 for i, lab in enumerate(labels)))
            for name in SUBINDEXES:
                vals = [getattr(self.columns[lab].get(name, IoLedger()), metric) for lab in labels]
                out.append(ROW_LABELS[name].ljust(width) + "".join(fmt.format(v) for v in vals))
            totals = [sum(getattr(self.columns[lab].get(n, IoLedger()), metric)
                          for n in SUBINDEXES) for lab in labels]
            out.append("Total".ljust(width) + "".join(fmt.format(v) for v in totals))
            out.append("")
        return "\n".join(out)

    def total(self, label: str, metric: str = "total_ops") -> int:
        return sum(getattr(led, metric) for led in self.columns[label].values())


def read_corpus(path: Union[str, Path]) -> list[tuple[str, str]]:
    """(path, text) of every ``.txt`` file under a directory (sorted), or of every path
    listed in a manifest file (one per line)."""
    p = Path(path)
    if p.is_dir():
        files = sorted(str(f) for f in p.rglob("*.txt") if f.is_file())
    elif p.is_file():
        base = p.parent
        files = []
        for line in p.read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                f = Path(line)
                files.append(str(f if f.is_absolute() else base / f))
    else:
        raise CorpusError(f"corpus {p} does not exist")
    out = []
    for f in files:
        try:
            with open(f, "r", encoding="utf-8", errors="replace") as fh:
                out.append((f, fh.read()))
        except OSError as exc:
            raise CorpusError(f"cannot read {f}: {exc}") from None
    return out


def corpus_parts(path: Union[str, Path]) -> list[list[tuple[str, str]]]:
    """A corpus directory with ``part1/``, ``part2/``, ... subdirectories yields one
    list per part (in numeric order); anything else is a single part."""
    p = Path(path)
    if p.is_dir():
        subs = [d for d in p.iterdir() if d.is_dir() and re.fullmatch(r"part\d+", d.name)]
        if subs:
            return [read_corpus(d) for d in sorted(subs, key=lambda d: int(d.name[4:]))]
    return [read_corpus(p)]


def split_evenly(texts: Sequence[tuple[str, str]], parts: int) -> list[list[tuple[str, str]]]:
    """Consecutive runs of documents with roughly equal byte totals."""
    if parts <= 1 or not texts:
        return [list(texts)]
    sizes = np.cumsum([len(t.encode("utf-8")) for _, t in texts])
    total = int(sizes[-1]) or 1
    out: list[list] = [[] for _ in range(parts)]
    for i, item in enumerate(texts):
        out[min(parts - 1, max(0, int(sizes[i]) - 1) * parts // total)].append(item)
    return [x for x in out if x]


def split_parts(docs: Sequence[Document], part_size_bytes: int) -> list[list[Document]]:
    if part_size_bytes <= 0 or not docs:
        return [list(docs)] if docs else []
    parts, cur, size = [], [], 0
    for d in docs:
        cur.append(d)
        size += d.nbytes
        if size >= part_size_bytes:
            parts.append(cur)
            cur, size = [], 0
    if cur:
        parts.append(cur)
    return parts
