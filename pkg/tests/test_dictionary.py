from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.cluster_store import NULL_LINK
from artifact.dictionary import (PAGE_SIZE, CorruptEntry, Dictionary, KeyKind, State,
                                 StreamDescriptor, parse_plain_embedded, plain_embedded,
                                 shared_key)
from artifact.io_layer import DsConfig, IoStore
from artifact.phase_cache import stable_hash, stable_hashes

u32 = st.integers(0, (1 << 32) - 1)
big = st.integers(0, (1 << 63) - 1)


@st.composite
def descriptors(draw):
    state = draw(st.sampled_from(list(State)))
    d = StreamDescriptor(state, draw(u32), draw(big), draw(u32), draw(u32), draw(u32))
    if draw(st.booleans()):
        d.fl_slot, d.fl_used = draw(st.integers(0, 500)), draw(u32)
    if draw(st.booleans()):
        d.shared, d.next_tag, d.last_tag = True, draw(u32), draw(u32)
    d.sr = draw(st.booleans())
    if state == State.EMBEDDED:
        d.embedded = draw(st.binary(max_size=300))
    elif state == State.TAGGED:
        d.shared_id, d.tag = draw(u32), draw(u32)
    elif state == State.PART:
        d.part_cluster, d.part_div, d.part_index = draw(u32), draw(st.sampled_from([2, 16])), 1
    else:
        d.first = draw(st.one_of(st.just(NULL_LINK), big))
        d.last = draw(st.one_of(st.just(NULL_LINK), big))
        d.segment_count, d.tail_used, d.chain_limit = draw(u32), draw(u32), draw(st.integers(0, 9))
    return d


@settings(max_examples=300)
@given(descriptors())
def test_descriptor_round_trip(d):
    assert StreamDescriptor.from_bytes(d.to_bytes()) == d


@given(descriptors(), st.data())
def test_truncated_descriptor_is_rejected(d, data):
    raw = d.to_bytes()
    cut = data.draw(st.integers(0, len(raw) - 1))
    with pytest.raises(CorruptEntry):
        StreamDescriptor.from_bytes(raw[:cut])
    with pytest.raises(CorruptEntry):
        StreamDescriptor.from_bytes(raw + b"\x00")


def test_absent_links_cost_one_byte():
    d = StreamDescriptor(State.SEGMENTS)
    raw = d.to_bytes()
    assert len(raw) == 2 + 5 + 5
    assert StreamDescriptor.from_bytes(raw).first == NULL_LINK


@given(u32, big, u32, u32, st.binary(max_size=200))
def test_plain_embedded_matches_general_encoder(sid, total, ld, lp, data):
    raw = plain_embedded(sid, total, ld, lp, data)
    d = StreamDescriptor(State.EMBEDDED, sid, total, ld, lp, len(data), embedded=data)
    assert raw == d.to_bytes()
    assert parse_plain_embedded(raw) == (sid, total, ld, lp, data)


def test_parse_plain_rejects_other_states():
    d = StreamDescriptor(State.EMBEDDED, sr=True)
    assert parse_plain_embedded(d.to_bytes()) is None


def test_shared_key_kind():
    assert shared_key(5)[0] == KeyKind.SHARED and len(shared_key(5)) == 9


def desc(i: int) -> StreamDescriptor:
    return StreamDescriptor(State.EMBEDDED, i, i + 1, i, 0, 3, embedded=b"abc")


def test_split_and_reload(tmp_path):
    d = Dictionary(tmp_path / "x.dic")
    keys = [bytes([1]) + i.to_bytes(4, "little") for i in range(5000)]
    for i, k in enumerate(keys):
        d.put(k, desc(i))
    d.commit()
    assert len(d) == 5000 and d.global_depth > 0
    assert d.size_on_disk() % PAGE_SIZE == 0
    e = Dictionary(tmp_path / "x.dic")
    assert len(e) == 5000
    for i in random.Random(0).sample(range(5000), 200):
        assert e.get(keys[i]) == desc(i)
    assert e.get(b"\x01missing") is None


def test_delete_then_reload(tmp_path):
    d = Dictionary(tmp_path / "x.dic")
    for i in range(100):
        d.put(bytes([i]), desc(i))
    d.commit()
    for i in range(0, 100, 2):
        d.delete(bytes([i]))
    d.commit()
    e = Dictionary(tmp_path / "x.dic")
    assert sorted(e.keys()) == [bytes([i]) for i in range(1, 100, 2)]


def test_bulk_set_matches_put(tmp_path):
    keys = [b"\x02" + i.to_bytes(3, "little") for i in range(3000)]
    a = Dictionary(tmp_path / "a.dic")
    b = Dictionary(tmp_path / "b.dic")
    for i, k in enumerate(keys[:1000]):
        a.put(k, desc(i))
        b.put(k, desc(i))
    a.commit()
    b.commit()
    for i, k in enumerate(keys):
        a.put(k, desc(i + 7))
    bi = b.bucket_indices(stable_hashes(keys))
    olds = [b.buckets[x].entries.get(k) for x, k in zip(bi, keys)]
    b.bulk_set(bi, keys, [desc(i + 7).to_bytes() for i in range(len(keys))], olds)
    a.commit()
    b.commit()
    assert dict(a.raw_items()) == dict(b.raw_items())
    assert len(b) == 3000
    assert (tmp_path / "a.dic").read_bytes() != b"" and Dictionary(tmp_path / "b.dic").get(
        keys[2999]) == desc(3006)


def test_pages_go_through_io_store(tmp_path):
    io = IoStore(tmp_path, "ix", DsConfig(enabled=False))
    d = Dictionary(tmp_path, io=io)
    d.put(b"\x01a", desc(1))
    d.commit()
    led = io.snapshot_ledger()
    # header page and first bucket page are contiguous
    assert led.write_ops == 1 and led.bytes_written == 2 * PAGE_SIZE
    e = Dictionary(tmp_path, io=io)
    assert e.get(b"\x01a") == desc(1)


def test_corrupt_file_is_reported(tmp_path):
    p = tmp_path / "bad.dic"
    p.write_bytes(b"garbage" * 1000)
    with pytest.raises(CorruptEntry):
        Dictionary(p)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.binary(min_size=1, max_size=12), st.booleans()), max_size=400))
def test_dictionary_matches_a_dict(tmp_path_factory, script):
    path = tmp_path_factory.mktemp("d") / "m.dic"
    d = Dictionary(path)
    model = {}
    for n, (key, delete) in enumerate(script):
        if delete:
            d.delete(key)
            model.pop(key, None)
        else:
            d.put(key, desc(n), h=stable_hash(key))
            model[key] = desc(n)
        if n % 97 == 0:
            d.commit()
    d.commit()
    reloaded = Dictionary(path)
    assert dict(reloaded.items()) == model
    assert len(reloaded) == len(model)
