"""Deterministic synthetic text collections with a Zipfian word distribution.

Vocabulary ranks: stop-word forms first, then frequent forms, then the rest of
the lexicon interleaved with generated pseudo-words that the lexicon does not
know (they become unknown lemmas). Word ``rank r`` is drawn with probability
proportional to ``1 / (r + 1) ** s``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .textpipe import Lexicon, WordClass

log = logging.getLogger(__name__)

_ONSETS = ["b", "br", "c", "ch", "d", "dr", "f", "g", "gl", "h", "j", "k", "kl", "l", "m",
           "n", "p", "pl", "qu", "r", "s", "sk", "st", "t", "tr", "v", "w", "z"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ee", "y"]
_CODAS = ["", "", "n", "r", "s", "x", "l", "m", "th", "nd"]


@dataclass
class CorpusSpec:
    total_bytes: int = 1 << 20
    seed: int = 0
    zipf_s: float = 1.05
    unknown_vocab: int = 2000
    min_doc_words: int = 150
    max_doc_words: int = 1500

    def __post_init__(self):
        if self.total_bytes < 0 or self.min_doc_words < 1 or self.max_doc_words < self.min_doc_words:
            raise ValueError("invalid corpus spec")


def pseudo_words(n: int, rng: np.random.Generator, exclude: set) -> list[str]:
    out, seen = [], set(exclude)
    while len(out) < n:
        syl = int(rng.integers(2, 5))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(syl)) + _CODAS[rng.integers(len(_CODAS))]
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def ranked_vocabulary(lexicon: Lexicon, spec: CorpusSpec) -> list[str]:
    rng = np.random.default_rng(spec.seed + 7919)
    by_class: dict[WordClass, list[str]] = {c: [] for c in WordClass}
    for form in sorted(lexicon.forms):
        ids = lexicon.forms[form]
        cls = max(lexicon.classify(i) for i in ids)
        by_class[cls].append(form)
    for forms in by_class.values():
        rng.shuffle(forms)
    unknown = pseudo_words(spec.unknown_vocab, rng, set(lexicon.forms))
    rest = by_class[WordClass.OTHER]
    tail: list[str] = []
    # known "other" forms are spread through the head of the unknown tail
    step = max(1, len(unknown) // max(1, 4 * len(rest))) if rest else 1
    ui = 0
    for form in rest:
        tail.extend(unknown[ui:ui + step])
        ui += step
        tail.append(form)
    tail.extend(unknown[ui:])
    return by_class[WordClass.STOP] + by_class[WordClass.FREQUENT] + tail


def generate_documents(spec: CorpusSpec, lexicon: Optional[Lexicon] = None) -> Iterator[str]:
    """Yield document texts until ``spec.total_bytes`` bytes have been produced."""
    lexicon = lexicon or Lexicon.load()
    vocab = np.array(ranked_vocabulary(lexicon, spec), dtype=object)
    weights = 1.0 / np.power(np.arange(1, len(vocab) + 1, dtype=np.float64), spec.zipf_s)
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    rng = np.random.default_rng(spec.seed)
    produced = 0
    while produced < spec.total_bytes:
        n = int(rng.integers(spec.min_doc_words, spec.max_doc_words + 1))
        ranks = np.minimum(np.searchsorted(cdf, rng.random(n)), len(vocab) - 1)
        words = vocab[ranks]
        # sentences of 6..20 words
        sent_lens = rng.integers(6, 21, size=n // 6 + 2)
        out, i = [], 0
        for ln in sent_lens:
            if i >= n:
                break
            chunk = list(words[i:i + ln])
            chunk[0] = chunk[0].capitalize()
            out.append(" ".join(chunk) + ("," if rng.random() < 0.1 else "."))
            i += ln
        text = " ".join(out) + "\n"
        produced += len(text.encode("utf-8"))
        yield text


def write_corpus(directory, spec: CorpusSpec, lexicon: Optional[Lexicon] = None,
                 parts: int = 1) -> list[Path]:
    """Write documents as numbered ``.txt`` files; with ``parts`` > 1 they are spread over
    ``part1/ .. partN/`` subdirectories holding consecutive, equally sized byte ranges."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    docs = list(generate_documents(spec, lexicon))
    sizes = np.cumsum([len(d.encode("utf-8")) for d in docs])
    dirs = []
    for p in range(parts):
        d = root / f"part{p + 1}" if parts > 1 else root
        d.mkdir(parents=True, exist_ok=True)
        dirs.append(d)
    total = sizes[-1] if len(sizes) else 0
    for i, text in enumerate(docs):
        p = min(parts - 1, int(max(0, sizes[i] - 1) * parts // max(total, 1))) if parts > 1 else 0
        (dirs[p] / f"doc{i:07d}.txt").write_text(text, encoding="utf-8")
    log.info("wrote %d documents (%d bytes) to %s", len(docs), total, root)
    return dirs


def demo_corpus_dir() -> Path:
    """Directory of the small corpus bundled with the package."""
    return Path(str(resources.files("artifact") / "data" / "demo_corpus"))
