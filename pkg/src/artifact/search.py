"""Proximity queries over an :class:`~artifact.indexer.IndexSet`.

A query is a sequence of words; word ``i`` matches a token whose lemma set
meets the word's lemma set (ambiguous forms act as OR-groups). A match is a
tuple of positions ``p1 < p2 < ... < pk`` in one document with every gap
``p[i+1] - p[i]`` between 1 and ``window``.

Three plans produce the same answer:

``stopseq``
    window 1, two or three words whose lemmas are all stop lemmas: the
    stop-sequence index lists the first position of every match directly.
``pairs``
    a word followed by a word it forms eligible (w, v) keys with (every lemma
    combination contains a stop or frequent lemma) takes its positions from the
    pair index instead of its own, usually long, ordinary list. Needs
    ``window <= max_distance``.
``ordinary``
    ordinary postings for every word, joined position by position.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .dictionary import KeyKind
from .postings import Posting
from .textpipe import Lexicon, WordClass, words_of

PLANS = ("ordinary", "pairs", "stopseq")
_SHIFT = 32


@dataclass(frozen=True)
class QueryTerm:
    word: str
    lemmas: tuple            # lemma keys: lexicon ids, or the word itself when unknown
    classes: tuple           # WordClass per lemma

    @property
    def all_stop(self) -> bool:
        return all(c == WordClass.STOP for c in self.classes)


@dataclass(frozen=True)
class Query:
    text: str
    terms: tuple
    window: int = 1

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if not self.terms:
            raise ValueError("query has no words")


@dataclass(frozen=True)
class MatchResult:
    doc_id: int
    positions: tuple         # one tuple of k positions per match, ascending
    plan: str


def parse_query(text: str, lexicon: Lexicon, window: int = 1) -> Query:
    terms = []
    for w in words_of(text):
        lemmas = tuple(lexicon.lemmas_of(w))
        terms.append(QueryTerm(w, lemmas, tuple(lexicon.classify(x) for x in lemmas)))
    return Query(text, tuple(terms), window)


def lookup(index, kind: int, components: Sequence) -> Iterator[Posting]:
    """Postings of one key; an unknown key yields nothing."""
    docs, poss = index.lookup(kind, tuple(components))
    for d, p in zip(docs.tolist(), poss.tolist()):
        yield Posting(d, p)


def _codes(docs: np.ndarray, poss: np.ndarray) -> np.ndarray:
    return (docs.astype(np.int64) << _SHIFT) | poss.astype(np.int64)


def _union(index, kind: int, combos) -> np.ndarray:
    parts = [_codes(*index.lookup(kind, c)) for c in combos]
    return np.unique(np.concatenate(parts)) if parts else np.zeros(0, np.int64)


def _pair_eligible(a: QueryTerm, b: QueryTerm) -> bool:
    return all(ca != WordClass.OTHER or cb != WordClass.OTHER
               for ca, cb in itertools.product(a.classes, b.classes))


def choose_plan(query: Query, max_distance: int, stop_seq_max_len: int) -> str:
    k = len(query.terms)
    if query.window == 1 and 2 <= k <= stop_seq_max_len and all(t.all_stop for t in query.terms):
        return "stopseq"
    if query.window <= max_distance and any(
            _pair_eligible(a, b) for a, b in zip(query.terms, query.terms[1:])):
        return "pairs"
    return "ordinary"


def _join(sources: list[np.ndarray], window: int) -> np.ndarray:
    """Rows of position codes, one column per term, for all chained matches."""
    rows = sources[0].reshape(-1, 1)
    for nxt in sources[1:]:
        if len(rows) == 0:
            break
        grown = []
        for gap in range(1, window + 1):
            cand = rows[:, -1] + gap
            ok = np.isin(cand, nxt)
            if ok.any():
                grown.append(np.column_stack((rows[ok], cand[ok])))
        rows = np.concatenate(grown) if grown else np.zeros((0, rows.shape[1] + 1), np.int64)
    return rows


def proximity_search(index, query, window: Optional[int] = None,
                     force: Optional[str] = None) -> list[MatchResult]:
    """Evaluate ``query`` (text or :class:`Query`) on ``index``; ``force`` picks a plan."""
    if isinstance(query, str):
        query = parse_query(query, index.lexicon, window or 1)
    elif window is not None and window != query.window:
        query = Query(query.text, query.terms, window)
    cfg = index.config
    plan = force or choose_plan(query, cfg.max_distance, cfg.stop_seq_max_len)
    if plan not in PLANS:
        raise ValueError(f"unknown plan {plan!r}")
    terms, k = query.terms, len(query.terms)
    if plan == "stopseq":
        if not (query.window == 1 and 2 <= k <= cfg.stop_seq_max_len
                and all(t.all_stop for t in terms)):
            raise ValueError("the stop-sequence plan needs 2..max stop words at window 1")
        starts = _union(index, KeyKind.STOP_SEQUENCE,
                        itertools.product(*(t.lemmas for t in terms)))
        rows = starts.reshape(-1, 1) + np.arange(k, dtype=np.int64)
    else:
        use_pairs = plan == "pairs"
        if use_pairs and query.window > cfg.max_distance:
            raise ValueError("the pair plan needs window <= max_distance")
        sources = []
        for i, t in enumerate(terms):
            if use_pairs and i + 1 < k and _pair_eligible(t, terms[i + 1]):
                sources.append(_union(index, KeyKind.LEMMA_PAIR,
                                      itertools.product(t.lemmas, terms[i + 1].lemmas)))
            else:
                sources.append(_union(index, KeyKind.LEMMA, ((x,) for x in t.lemmas)))
        rows = _join(sources, query.window)
    return _group_rows(rows, plan)


def _group_rows(rows: np.ndarray, plan: str) -> list[MatchResult]:
    if len(rows) == 0:
        return []
    order = np.lexsort(rows.T[::-1])
    rows = rows[order]
    docs = rows[:, 0] >> _SHIFT
    pos = rows & ((1 << _SHIFT) - 1)
    out = []
    bounds = np.flatnonzero(np.diff(docs)) + 1
    for chunk_docs, chunk_pos in zip(np.split(docs, bounds), np.split(pos, bounds)):
        out.append(MatchResult(int(chunk_docs[0]), tuple(map(tuple, chunk_pos.tolist())), plan))
    return out
