from __future__ import annotations

import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.cluster_store import StoreConfig
from artifact.dictionary import State
from artifact.engine import EngineConfig, SubIndex
from artifact.phase_cache import CacheConfig, PhaseViolation, group_of, stable_hashes
from artifact.postings import OrderViolation, encode_runs
from artifact.streams import EXPERIMENT_SETS, Audit, StrategySet

from oracle import StreamOracle

CS = 4096


def config(strategies: StrategySet, fl: int = 16) -> EngineConfig:
    return EngineConfig(store=StoreConfig(cluster_size=CS, max_segment_len=8,
                                          fl_area_clusters=fl),
                        cache=CacheConfig(per_stream=8, total_bytes=1 << 20),
                        strategies=strategies, ds_small_threshold=CS)


def zipf_batches(seed: int, keys: int, parts: int, docs_per_part: int = 120):
    rng = random.Random(seed)
    names = [b"\x01" + i.to_bytes(4, "little") for i in range(keys)]
    weights = [1 / (i + 1) for i in range(keys)]
    doc = 0
    for _ in range(parts):
        batch: dict = {}
        for _ in range(docs_per_part):
            doc += 1
            for pos in range(rng.randint(5, 150)):
                batch.setdefault(rng.choices(names, weights)[0], []).append((doc, pos))
        yield names, batch


def run_parts(tmp_path, strategies, G=3, keys=200, parts=3, seed=1, audit=None, fl=16):
    cfg = config(strategies, fl)
    oracle = StreamOracle()
    idx = SubIndex(tmp_path, "t", cfg, group_count=G, audit=audit)
    for names, batch in zipf_batches(seed, keys, parts):
        for g in range(idx.group_count):
            idx.begin_phase(g)
            for k, ps in batch.items():
                if idx.group_count == 1 or group_of(k, idx.group_count) == g:
                    idx.append(k, ps)
                    oracle.append(k, ps)
            idx.end_phase()
        idx.close()
        idx = SubIndex(tmp_path, "t", cfg, group_count=G, audit=audit)
        for k in names:
            assert idx.lookup(k) == oracle.lists.get(k, [])
        keys, docs, poss, counts = idx.read_all()
        assert sorted(keys) == sorted(oracle.lists)
        rows = list(zip(docs.tolist(), poss.tolist()))
        starts = np.cumsum(counts) - counts
        for k, a, n in zip(keys, starts.tolist(), counts.tolist()):
            assert rows[a:a + n] == oracle.lists[k]
        assert idx.verify() == []
    return idx, oracle


@pytest.mark.parametrize("number", sorted(EXPERIMENT_SETS))
def test_experiment_sets_match_oracle(tmp_path, number):
    idx, oracle = run_parts(tmp_path, StrategySet.experiment(number, sr_memory_budget=1 << 16))
    st_ = idx.stats()
    assert st_["keys"] == len(oracle.lists)
    assert st_["postings"] == sum(map(len, oracle.lists.values()))
    idx.close()


@pytest.mark.parametrize("names", [
    (), ("EM",), ("PART",), ("S",), ("C1",), ("C1", "FL"), ("TAG", "EM"), ("S", "CH"),
    ("C1", "SR"), ("DS",), ("C1", "EM", "PART", "S", "CH", "SR", "DS"),
])
def test_single_strategies_match_oracle(tmp_path, names):
    idx, _ = run_parts(tmp_path, StrategySet.from_names(names, sr_memory_budget=1 << 15),
                       keys=120, parts=2)
    idx.close()


def test_state_progression_is_recorded(tmp_path):
    audit = Audit()
    idx, oracle = run_parts(tmp_path, StrategySet.experiment(2), audit=audit)
    states = idx.stats()["states"]
    # the Zipf head outgrows parts, the tail stays embedded
    assert states.get("EMBEDDED", 0) > 0 and states.get("CHAIN", 0) + states.get("SEGMENTS", 0) > 0
    transitions = {(e[2], e[3]) for e in audit.of("state")}
    assert any(State.PART in t for t in transitions)
    assert all(old != new for old, new in transitions)
    for _, _, count, limit, *_ in audit.of("chain"):
        assert count <= limit
    idx.close()


def test_segments_double_up_to_the_limit(tmp_path):
    audit = Audit()
    idx, _ = run_parts(tmp_path, StrategySet.from_names(["S"]), keys=5, audit=audit)
    lengths = [e[2] for e in audit.of("segment")]
    assert max(lengths) <= 8
    grown = [e[2] for e in audit.of("segment") if e[3] == "grow"]
    assert all(ln & (ln - 1) == 0 for ln in grown)
    idx.close()


def test_phase_rules(tmp_path):
    idx = SubIndex(tmp_path, "t", config(StrategySet.experiment(1)), group_count=4)
    key = b"\x01abc"
    with pytest.raises(PhaseViolation):
        idx.append(key, [(1, 0)])
    g = group_of(key, 4)
    idx.begin_phase((g + 1) % 4)
    with pytest.raises(PhaseViolation):
        idx.append(key, [(1, 0)])
    with pytest.raises(PhaseViolation):
        idx.begin_phase(g)
    idx.end_phase()
    with pytest.raises(ValueError):
        idx.begin_phase(4)
    idx.begin_phase(g)
    idx.append(key, [(3, 1)])
    with pytest.raises(OrderViolation):
        idx.append(key, [(3, 1)])
    with pytest.raises(OrderViolation):
        idx.append(key, [(2, 9)])
    idx.end_phase()
    assert idx.lookup(key) == [(3, 1)]
    idx.close()


def test_without_c1_there_is_one_group(tmp_path):
    idx = SubIndex(tmp_path, "t", config(StrategySet.from_names(["EM"])), group_count=9)
    assert idx.group_count == 1
    idx.close()


def bulk_columns(batch: dict):
    keys = sorted(batch)
    docs = np.array([d for k in keys for d, _ in batch[k]], np.int64)
    poss = np.array([p for k in keys for _, p in batch[k]], np.int64)
    counts = np.array([len(batch[k]) for k in keys], np.int64)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    blob, offs = encode_runs(docs, poss, starts)
    last = starts + counts - 1
    return (keys, stable_hashes(keys), blob, offs[:-1], offs[1:], counts, docs[starts],
            poss[starts], docs[last], poss[last], np.ones(len(keys), bool))


@pytest.mark.parametrize("number", sorted(EXPERIMENT_SETS))
def test_bulk_append_matches_single_appends(tmp_path, number):
    strategies = StrategySet.experiment(number, sr_memory_budget=1 << 16)
    one = SubIndex(tmp_path / "one", "t", config(strategies), group_count=2)
    bulk = SubIndex(tmp_path / "bulk", "t", config(strategies), group_count=2)
    names = []
    for names, batch in zipf_batches(4, 150, 3):
        for g in range(2):
            part = {k: v for k, v in batch.items() if group_of(k, 2) == g}
            one.begin_phase(g)
            for k in sorted(part):
                one.append(k, part[k])
            one.end_phase()
            bulk.begin_phase(g)
            bulk.streams.append_runs(*bulk_columns(part))
            bulk.end_phase()
    for k in names:
        assert bulk.lookup(k) == one.lookup(k)
    assert bulk.verify() == []
    assert bulk.stats()["states"] == one.stats()["states"]
    one.close()
    bulk.close()


def test_bulk_append_checks_groups(tmp_path):
    idx = SubIndex(tmp_path, "t", config(StrategySet.experiment(1)), group_count=4)
    batch = {b"\x01k%d" % i: [(1, i)] for i in range(20)}
    idx.begin_phase(0)
    with pytest.raises(PhaseViolation):
        idx.streams.append_runs(*bulk_columns(batch))


def test_verify_reports_damaged_stream(tmp_path):
    idx, oracle = run_parts(tmp_path, StrategySet.experiment(1), keys=30, parts=1)
    key = max(oracle.lists, key=lambda k: len(oracle.lists[k]))
    desc = idx.descriptor(key)
    desc.total_postings += 1
    idx.dict.put(key, desc)
    idx.dict.commit()
    problems = idx.verify()
    assert any("postings, descriptor says" in p for p in problems)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(0, 10_000), st.integers(1, 4))
def test_random_workloads(tmp_path_factory, number, seed, groups):
    idx, _ = run_parts(tmp_path_factory.mktemp("w"),
                       StrategySet.experiment(number, sr_memory_budget=1 << 14),
                       G=groups, keys=60, parts=2, seed=seed)
    idx.close()
