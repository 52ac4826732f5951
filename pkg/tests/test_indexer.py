from __future__ import annotations

import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.cluster_store import StoreConfig
from artifact.dictionary import KeyKind
from artifact.engine import EngineConfig
from artifact.indexer import (ROW_LABELS, SUBINDEXES, BuildConfig, CorpusError, IndexSet,
                              IngestOrderViolation, corpus_parts, key_canonicalize, parse_key,
                              read_corpus, split_evenly, split_parts)
from artifact.phase_cache import CacheConfig
from artifact.streams import StrategySet
from artifact.textpipe import Lexicon

from oracle import check_index, expected_postings

WORDS = ["who", "is", "and", "the", "see", "saw", "cat", "dog", "runs", "far", "zork", "blip"]


@pytest.fixture(scope="module")
def lex() -> Lexicon:
    return Lexicon.from_lists(
        {"who": ["who"], "is": ["is"], "and": ["and"], "the": ["the"], "see": ["see"],
         "saw": ["see", "saw"], "cat": ["cat"], "dog": ["dog"], "runs": ["run"],
         "far": ["far"]},
        stop=["who", "is", "and", "the"], frequent=["see"])


def small_config(number: int = 3, groups: int | None = None) -> BuildConfig:
    engine = EngineConfig(store=StoreConfig(cluster_size=4096, fl_area_clusters=8),
                          cache=CacheConfig(per_stream=4, total_bytes=256 * 4096),
                          strategies=StrategySet.experiment(number, sr_memory_budget=1 << 15),
                          ds_small_threshold=4096)
    return BuildConfig(engine=engine, known_groups=groups, unknown_groups=groups,
                       reread_source=False)


def random_texts(seed: int, n: int, prefix: str = "d") -> list[tuple[str, str]]:
    rng = random.Random(seed)
    return [(f"{prefix}{i:05d}", " ".join(rng.choices(WORDS, k=rng.randint(0, 40))))
            for i in range(n)]


def test_who_is_who_stop_sequences(tmp_path, lex):
    ix = IndexSet(tmp_path, lex, small_config())
    ix.index_part(ix.documents([("a", "who is who")]))
    who, is_ = lex.lemma_id("who"), lex.lemma_id("is")
    S = KeyKind.STOP_SEQUENCE
    assert ix.lookup_list(S, (who, is_)) == [(1, 0)]
    assert ix.lookup_list(S, (is_, who)) == [(1, 1)]
    assert ix.lookup_list(S, (who, is_, who)) == [(1, 0)]
    assert sum(1 for _ in ix.subs["stopseq"].all_keys()) == 3
    ix.close()


def test_pair_eligibility(tmp_path, lex):
    ix = IndexSet(tmp_path, lex, small_config())
    ix.index_part(ix.documents([("a", "cat dog see far zork")]))
    P = KeyKind.LEMMA_PAIR
    cat, dog, see, far = (lex.lemma_id(w) for w in ("cat", "dog", "see", "far"))
    assert ix.lookup_list(P, (cat, dog)) == []          # both ordinary
    assert ix.lookup_list(P, (cat, see)) == [(1, 0)]
    assert ix.lookup_list(P, (see, far)) == [(1, 2)]
    assert ix.lookup_list(P, (see, "zork")) == [(1, 2)]
    assert ix.lookup_list(P, (far, "zork")) == []
    ix.close()


def test_empty_part_is_a_no_op(tmp_path, lex):
    ix = IndexSet(tmp_path, lex, small_config())
    report = ix.index_part([])
    assert report.documents == 0 and not report.keys
    ix.close()


@given(st.sampled_from(list(KeyKind)[:3]),
       st.lists(st.one_of(st.integers(0, 2**32 - 1), st.text(min_size=1, max_size=8)),
                min_size=1, max_size=3))
def test_key_canonicalization_round_trip(kind, comps):
    key = key_canonicalize(kind, comps)
    assert parse_key(key) == (kind, tuple(comps))


def test_keys_are_distinct_per_kind():
    assert key_canonicalize(KeyKind.LEMMA, (5,)) != key_canonicalize(KeyKind.LEMMA, ("5",))
    assert key_canonicalize(KeyKind.LEMMA, (1,)) != key_canonicalize(KeyKind.LEMMA_PAIR, (1,))


@pytest.mark.parametrize("number", [1, 2, 3])
def test_incremental_equals_one_pass(tmp_path, lex, number):
    texts = random_texts(number, 150)
    expected = expected_postings([(i, t) for i, (_, t) in enumerate(texts, 1)], lex)
    one = IndexSet(tmp_path / "one", lex, small_config(number))
    one.index_part(one.documents(texts))
    inc = IndexSet(tmp_path / "inc", lex, small_config(number))
    for chunk in split_evenly(texts, 3):
        inc.index_part(inc.documents(chunk))
    inc.close()
    inc = IndexSet(tmp_path / "inc", lex)
    assert check_index(inc, expected) == []
    assert check_index(one, expected) == []
    for key_kind, comps in list(expected)[:300]:
        assert inc.lookup_list(key_kind, comps) == one.lookup_list(key_kind, comps)
    assert all(not p for p in inc.verify().values())
    one.close()
    inc.close()


def test_forced_groups_and_reopen(tmp_path, lex):
    texts = random_texts(9, 80)
    ix = IndexSet(tmp_path, lex, small_config(2, groups=5))
    for chunk in split_evenly(texts, 2):
        ix.index_part(ix.documents(chunk))
    assert set(ix.groups.values()) == {5}
    ix.close()
    ix = IndexSet(tmp_path, lex)
    assert ix.groups and set(ix.groups.values()) == {5}
    assert check_index(ix, expected_postings(
        [(i, t) for i, (_, t) in enumerate(texts, 1)], lex)) == []
    ix.close()


def test_ingest_order_is_enforced(tmp_path, lex):
    ix = IndexSet(tmp_path, lex, small_config())
    docs = ix.documents([("a", "cat"), ("b", "dog")])
    ix.index_part(docs)
    with pytest.raises(IngestOrderViolation):
        ix.documents([("a", "cat again")])
    with pytest.raises(IngestOrderViolation):
        ix.documents([("c", "x"), ("c", "y")])
    with pytest.raises(IngestOrderViolation):
        ix.index_part(docs)
    ix.close()
    ix = IndexSet(tmp_path, lex)
    assert ix.next_doc_id == 3
    assert ix.document_paths() == {1: "a", 2: "b"}
    ix.close()


def test_lexicon_mismatch_is_refused(tmp_path, lex):
    IndexSet(tmp_path, lex, small_config()).save_settings()
    with pytest.raises(ValueError):
        IndexSet(tmp_path, Lexicon.from_lists({"x": ["x"]}))


def test_build_config_round_trip():
    cfg = small_config(2, groups=3)
    assert BuildConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        BuildConfig(max_distance=0)
    with pytest.raises(ValueError):
        BuildConfig(stop_seq_max_len=1)


def test_report_and_ledger_table(tmp_path, lex):
    ix = IndexSet(tmp_path, lex, small_config())
    report = ix.index_part(ix.documents(random_texts(2, 30)))
    assert report.documents == 30 and report.tokens > 0
    assert set(report.keys) == set(SUBINDEXES)
    table = ix.build_report()
    text = table.to_text()
    for label in ROW_LABELS.values():
        assert label in text
    csv_lines = table.to_csv().splitlines()
    assert csv_lines[0].startswith("index,set,") and len(csv_lines) == 1 + len(SUBINDEXES)
    label = next(iter(table.columns))
    assert table.total(label) == sum(led.total_ops for led in ix.ledgers().values())
    ix.close()


def test_corpus_reading(tmp_path):
    (tmp_path / "part2").mkdir()
    (tmp_path / "part10").mkdir()
    (tmp_path / "part2" / "a.txt").write_text("two")
    (tmp_path / "part10" / "b.txt").write_text("ten")
    parts = corpus_parts(tmp_path)
    assert [[t for _, t in p] for p in parts] == [["two"], ["ten"]]
    manifest = tmp_path / "list.txt"
    manifest.write_text("# docs\npart2/a.txt\n")
    assert [t for _, t in read_corpus(manifest)] == ["two"]
    with pytest.raises(CorpusError):
        read_corpus(tmp_path / "nope")
    manifest.write_text("missing.txt\n")
    with pytest.raises(CorpusError):
        read_corpus(manifest)


@settings(max_examples=50)
@given(st.lists(st.text(max_size=30), max_size=30), st.integers(1, 6))
def test_split_evenly_keeps_order(texts, parts):
    items = [(str(i), t) for i, t in enumerate(texts)]
    out = split_evenly(items, parts)
    assert [x for chunk in out for x in chunk] == items
    assert len(out) <= max(1, parts)


def test_split_parts_by_size(lex, tmp_path):
    ix = IndexSet(tmp_path, lex)
    docs = ix.documents([(str(i), "x" * 10) for i in range(7)])
    sizes = [len(p) for p in split_parts(docs, 25)]
    assert sizes == [3, 3, 1]
    assert split_parts(docs, 0) == [docs]


def test_bulk_emission_in_small_chunks(tmp_path, lex, monkeypatch):
    import artifact.indexer as indexer
    monkeypatch.setattr(indexer, "ROW_BUDGET", 50)
    texts = random_texts(11, 60)
    ix = IndexSet(tmp_path, lex, small_config(3))
    ix.index_part(ix.documents(texts))
    expected = expected_postings([(i, t) for i, (_, t) in enumerate(texts, 1)], lex)
    assert check_index(ix, expected) == []
    assert np.all([not p for p in ix.verify().values()])
    ix.close()
