"""Tokenization and three-way word classification.

A :class:`Lexicon` maps surface forms to lemma ids in ``0..word_count-1`` and
marks some lemmas as stop or frequent words. Words missing from the lexicon
are their own lemma (an "unknown" lemma, represented by the lowercase string).
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import IntEnum
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

TOKEN_RE = re.compile(r"[^\W\d_]+")
LemmaKey = Union[int, str]


class WordClass(IntEnum):
    OTHER = 0
    FREQUENT = 1
    STOP = 2


class LexiconError(ValueError):
    pass


@dataclass(frozen=True)
class TokenOccurrence:
    doc_id: int
    position: int
    lemmas: tuple            # ((lemma key, WordClass), ...)
    known: bool

    @property
    def lemma_keys(self) -> tuple:
        return tuple(k for k, _ in self.lemmas)


@dataclass
class Lexicon:
    forms: dict = field(default_factory=dict)         # form -> tuple of lemma ids
    lemma_names: list = field(default_factory=list)   # lemma id -> base form
    stop: frozenset = frozenset()
    frequent: frozenset = frozenset()

    def __post_init__(self):
        self.stop = frozenset(self.stop)
        self.frequent = frozenset(self.frequent)
        if self.stop & self.frequent:
            raise LexiconError("a lemma cannot be both stop and frequent")
        wc = len(self.lemma_names)
        for form, ids in self.forms.items():
            if any(not 0 <= i < wc for i in ids):
                raise LexiconError(f"form {form!r} refers to an unknown lemma id")
        self._ids = {name: i for i, name in enumerate(self.lemma_names)}
        self._class = np.zeros(wc, dtype=np.int8)
        for i in self.frequent:
            self._class[i] = WordClass.FREQUENT
        for i in self.stop:
            self._class[i] = WordClass.STOP

    @property
    def word_count(self) -> int:
        return len(self.lemma_names)

    @property
    def class_array(self) -> np.ndarray:
        return self._class

    def lemma_id(self, name: str) -> Optional[int]:
        return self._ids.get(name)

    def lemma_name(self, key: LemmaKey) -> str:
        return self.lemma_names[key] if isinstance(key, int) else key

    def lemmas_of(self, word: str) -> tuple:
        """Lemma keys of a lowercase word: lexicon ids, or the word itself when unknown."""
        ids = self.forms.get(word)
        return ids if ids is not None else (word,)

    def classify(self, lemma: LemmaKey) -> WordClass:
        if isinstance(lemma, str):
            i = self._ids.get(lemma)
            if i is None:
                return WordClass.OTHER
            lemma = i
        return WordClass(int(self._class[lemma]))

    # -- loading -----------------------------------------------------------------------------
    @classmethod
    def from_lists(cls, forms: dict[str, Iterable[str]], stop: Iterable[str] = (),
                   frequent: Iterable[str] = ()) -> "Lexicon":
        """Build from form -> lemma-name lists; lemma ids follow sorted lemma names."""
        stop, frequent = list(stop), list(frequent)
        names = set(stop) | set(frequent)
        for lems in forms.values():
            names.update(lems)
        lemma_names = sorted(names)
        ids = {n: i for i, n in enumerate(lemma_names)}
        form_ids = {}
        for form, lems in forms.items():
            seen = []
            for n in lems:
                if ids[n] not in seen:
                    seen.append(ids[n])
            form_ids[form.lower()] = tuple(seen)
        for n in lemma_names:
            form_ids.setdefault(n, (ids[n],))
        return cls(form_ids, lemma_names, {ids[n] for n in stop}, {ids[n] for n in frequent})

    @classmethod
    def load(cls, directory: Union[str, Path, None] = None) -> "Lexicon":
        """Read ``forms.tsv``, ``stop.txt`` and ``frequent.txt``; None loads the bundled demo."""
        if directory is None:
            root = resources.files("artifact") / "data" / "lexicon"
            read = lambda name: (root / name).read_text(encoding="utf-8")  # noqa: E731
        else:
            root = Path(directory)
            read = lambda name: (root / name).read_text(encoding="utf-8") \
                if (root / name).exists() else ""  # noqa: E731
            if not (root / "forms.tsv").exists():
                raise LexiconError(f"{root}/forms.tsv not found")
        forms: dict[str, list[str]] = {}
        for lineno, line in enumerate(read("forms.tsv").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[1]:
                raise LexiconError(f"forms.tsv:{lineno}: expected form<TAB>lemma[,lemma...]")
            forms.setdefault(parts[0].lower(), []).extend(
                x.strip().lower() for x in parts[1].split(",") if x.strip())
        words = lambda text: [w.strip().lower() for w in text.splitlines()  # noqa: E731
                              if w.strip() and not w.startswith("#")]
        return cls.from_lists(forms, words(read("stop.txt")), words(read("frequent.txt")))

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.blake2b(digest_size=8)
        for f in sorted(self.forms):
            h.update(f.encode() + b"\t" + ",".join(map(str, self.forms[f])).encode() + b"\n")
        h.update(repr((sorted(self.stop), sorted(self.frequent), len(self.lemma_names))).encode())
        return h.hexdigest()


def words_of(text: str) -> list[str]:
    """Lowercase letter runs; digits and punctuation separate words."""
    return TOKEN_RE.findall(text.lower())


def tokenize(text: str, lexicon: Lexicon, doc_id: int = 0) -> list[TokenOccurrence]:
    out = []
    for pos, w in enumerate(words_of(text)):
        ids = lexicon.forms.get(w)
        if ids is None:
            out.append(TokenOccurrence(doc_id, pos, ((w, WordClass.OTHER),), False))
        else:
            out.append(TokenOccurrence(doc_id, pos,
                                       tuple((i, lexicon.classify(i)) for i in ids), True))
    return out


def classify(lemma: LemmaKey, lexicon: Lexicon) -> WordClass:
    return lexicon.classify(lemma)


@dataclass
class TokenArrays:
    """Flattened lemma occurrences of a batch of documents.

    Token ``t`` (one word) is at (tok_doc[t], tok_pos[t]) and owns entries
    ``tok_start[t] .. tok_start[t]+tok_count[t]-1``. Entry lemma ids are lexicon
    ids below ``word_count``; unknown lemmas get ``word_count + u`` where
    ``unknown[u]`` is the word.
    """

    tok_doc: np.ndarray
    tok_pos: np.ndarray
    tok_start: np.ndarray
    tok_count: np.ndarray
    lemma: np.ndarray
    cls: np.ndarray
    unknown: list
    word_count: int

    @property
    def entry_token(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.tok_doc)), self.tok_count)

    @property
    def entry_doc(self) -> np.ndarray:
        return np.repeat(self.tok_doc, self.tok_count)

    @property
    def entry_pos(self) -> np.ndarray:
        return np.repeat(self.tok_pos, self.tok_count)

    def lemma_key(self, lemma_id: int) -> LemmaKey:
        return int(lemma_id) if lemma_id < self.word_count else self.unknown[lemma_id - self.word_count]


class BulkTokenizer:
    """Tokenizes many documents into :class:`TokenArrays` with memoized word lookups."""

    def __init__(self, lexicon: Lexicon):
        self.lex = lexicon
        self._word_ids: dict[str, int] = {}
        self._word_lemmas: list[tuple] = []
        self._unknown: dict[str, int] = {}
        self._unknown_list: list[str] = []

    def _word_id(self, w: str) -> int:
        wid = len(self._word_lemmas)
        ids = self.lex.forms.get(w)
        if ids is None:
            u = self._unknown.get(w)
            if u is None:
                u = self._unknown[w] = len(self._unknown_list)
                self._unknown_list.append(w)
            ids = (self.lex.word_count + u,)
        self._word_ids[w] = wid
        self._word_lemmas.append(ids)
        return wid

    def tokenize(self, docs: Iterable[tuple[int, str]]) -> TokenArrays:
        word_ids, get, new = self._word_ids, self._word_ids.get, self._word_id
        all_ids, doc_of, lens = [], [], []
        for doc_id, text in docs:
            words = TOKEN_RE.findall(text.lower())
            ids = [get(w) if w in word_ids else new(w) for w in words]
            all_ids.append(np.asarray(ids, dtype=np.int64))
            doc_of.append(doc_id)
            lens.append(len(ids))
        wc = self.lex.word_count
        nwords = len(self._word_lemmas)
        w_count = np.fromiter((len(x) for x in self._word_lemmas), np.int64, nwords)
        w_start = np.zeros(nwords + 1, np.int64)
        np.cumsum(w_count, out=w_start[1:])
        w_flat = np.fromiter((i for x in self._word_lemmas for i in x), np.int64,
                             int(w_start[-1]))
        tok_word = np.concatenate(all_ids) if all_ids else np.zeros(0, np.int64)
        lens_arr = np.asarray(lens, np.int64)
        tok_doc = np.repeat(np.asarray(doc_of, np.int64), lens_arr)
        starts = np.cumsum(lens_arr) - lens_arr
        tok_pos = np.arange(len(tok_word), dtype=np.int64) - np.repeat(starts, lens_arr)
        tok_count = w_count[tok_word] if len(tok_word) else np.zeros(0, np.int64)
        tok_start = np.zeros(len(tok_word), np.int64)
        if len(tok_word):
            np.cumsum(tok_count[:-1], out=tok_start[1:])
        # entries: lemmas of each token in lexicon order
        n_entries = int(tok_count.sum())
        entry_tok = np.repeat(np.arange(len(tok_word)), tok_count)
        within = np.arange(n_entries) - tok_start[entry_tok]
        lemma = w_flat[w_start[tok_word[entry_tok]] + within] if n_entries else np.zeros(0, np.int64)
        cls = np.zeros(n_entries, np.int8)
        known = lemma < wc
        cls[known] = self.lex.class_array[lemma[known]]
        return TokenArrays(tok_doc, tok_pos, tok_start, tok_count, lemma, cls,
                           list(self._unknown_list), wc)
