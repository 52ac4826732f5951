from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.cluster_store import StoreConfig
from artifact.dictionary import KeyKind
from artifact.engine import EngineConfig
from artifact.indexer import BuildConfig, IndexSet
from artifact.search import PLANS, choose_plan, lookup, parse_query, proximity_search
from artifact.streams import StrategySet
from artifact.textpipe import Lexicon

from oracle import scan_matches

WORDS = ["tell", "me", "who", "is", "your", "friend", "and", "the", "saw", "cat", "zork"]


@pytest.fixture(scope="module")
def lex() -> Lexicon:
    return Lexicon.from_lists(
        {w: [w] for w in ["tell", "me", "who", "is", "your", "friend", "and", "the", "cat"]}
        | {"saw": ["see", "saw"]},
        stop=["who", "is", "and", "the", "me", "your"], frequent=["see", "tell"])


@pytest.fixture(scope="module")
def corpus():
    rng = random.Random(8)
    docs = [" ".join(rng.choices(WORDS, k=rng.randint(0, 60))) for _ in range(120)]
    docs[0] = "Tell me, who is your friend"
    return list(enumerate(docs, 1))


@pytest.fixture(scope="module")
def index(tmp_path_factory, lex, corpus):
    cfg = BuildConfig(engine=EngineConfig(store=StoreConfig(cluster_size=4096,
                                                            fl_area_clusters=4),
                                          strategies=StrategySet.experiment(2)),
                      reread_source=False)
    ix = IndexSet(tmp_path_factory.mktemp("search"), lex, cfg)
    ix.index_part(ix.documents([(f"doc{i}", t) for i, t in corpus]))
    yield ix
    ix.close()


def as_dict(results):
    return {m.doc_id: list(m.positions) for m in results}


def test_friend_query(index):
    got = proximity_search(index, "who is your friend")
    assert got[0].doc_id == 1 and got[0].positions[0] == (2, 3, 4, 5)


def test_plan_choice(lex):
    assert choose_plan(parse_query("who is", lex), 5, 3) == "stopseq"
    assert choose_plan(parse_query("who is the and", lex), 5, 3) == "pairs"
    assert choose_plan(parse_query("cat zork", lex), 5, 3) == "ordinary"
    assert choose_plan(parse_query("who is", lex, window=2), 5, 3) == "pairs"
    assert choose_plan(parse_query("saw cat", lex, window=9), 5, 3) == "ordinary"


@pytest.mark.parametrize("text", ["who is", "the and who", "saw cat", "tell me who",
                                  "cat zork", "friend", "is the", "zork saw the"])
@pytest.mark.parametrize("window", [1, 2, 4])
def test_every_plan_matches_a_scan(index, lex, corpus, text, window):
    expect = scan_matches(corpus, lex, text.split(), window)
    assert as_dict(proximity_search(index, text, window)) == expect
    for plan in PLANS:
        try:
            got = proximity_search(index, text, window, force=plan)
        except ValueError:
            continue
        assert as_dict(got) == expect, plan


def test_plan_preconditions(index):
    with pytest.raises(ValueError):
        proximity_search(index, "cat saw", 1, force="stopseq")
    with pytest.raises(ValueError):
        proximity_search(index, "who is", 9, force="pairs")
    with pytest.raises(ValueError):
        proximity_search(index, "who is", force="bogus")
    with pytest.raises(ValueError):
        proximity_search(index, "  ,, ")
    with pytest.raises(ValueError):
        parse_query("cat", index.lexicon, window=0)


def test_lookup_of_absent_key(index):
    assert list(lookup(index, KeyKind.LEMMA, ("nothing",))) == []
    cat = index.lexicon.lemma_id("cat")
    assert list(lookup(index, KeyKind.LEMMA, (cat,))) == index.lookup_list(KeyKind.LEMMA, (cat,))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(WORDS), min_size=1, max_size=3), st.integers(1, 5))
def test_random_queries(index, lex, corpus, words, window):
    expect = scan_matches(corpus, lex, words, window)
    assert as_dict(proximity_search(index, " ".join(words), window)) == expect
