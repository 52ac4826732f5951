from __future__ import annotations

import random
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.postings import (CorruptBlock, OrderViolation, Posting, TaggedPosting,
                               constant_segment, decode_postings, decode_postings_array,
                               decode_postings_batch,
                               decode_tagged, decode_tagged_array, decode_varint,
                               encode_postings, encode_runs, encode_tagged,
                               encode_tagged_array, encode_varint, gather_rows, merge_tagged,
                               project_tag, read_varints, varint_segment, varint_size)

GOLDEN = Path(__file__).parent / "golden" / "postings.hex"


def reference_varint(v: int) -> bytes:
    """Independent byte-level encoder: 7-bit groups, least significant first."""
    groups = []
    while True:
        groups.append(v % 128)
        v //= 128
        if v == 0:
            break
    return bytes(g + 128 if i < len(groups) - 1 else g for i, g in enumerate(groups))


def golden_lines():
    return [ln for ln in GOLDEN.read_text().splitlines() if ln and not ln.startswith("#")]


def varint(v: int) -> bytes:
    out = bytearray()
    encode_varint(v, out)
    return bytes(out)


posting_lists = st.lists(st.tuples(st.integers(1, 2**40), st.integers(0, 2**32 - 1)),
                         max_size=60, unique=True).map(sorted)


def test_varint_small_values():
    assert varint(0) == b"\x00"
    assert varint(127) == b"\x7f"
    assert varint(300) == bytes([0xAC, 0x02])
    assert reference_varint(300) == bytes([0xAC, 0x02])


@given(st.integers(0, 2**64 - 1))
def test_varint_matches_reference(v):
    assert varint(v) == reference_varint(v)
    assert varint_size(v) == len(reference_varint(v))
    assert decode_varint(varint(v), 0) == (v, len(varint(v)))


def test_golden_block():
    plain, tagged = golden_lines()
    assert encode_postings([(1, 5), (1, 9), (2, 3)]).hex() == plain
    assert encode_tagged([(1, 5, 1), (1, 5, 2), (3, 0, 1)]).hex() == tagged


def test_empty():
    assert encode_postings([]) == b""
    assert decode_postings(b"") == []
    assert decode_tagged(b"") == []


def test_dangling_varint_is_corrupt():
    data = encode_postings([(1, 5), (2, 300)])
    with pytest.raises(CorruptBlock):
        decode_postings(data[:-1])
    with pytest.raises(CorruptBlock):
        decode_postings_array(data[:-1])


def test_order_violations():
    with pytest.raises(OrderViolation):
        encode_postings([(2, 1), (1, 5)])
    with pytest.raises(OrderViolation):
        encode_postings([(1, 5), (1, 5)])
    with pytest.raises(OrderViolation):
        encode_postings([(3, 1)], prev_context=(3, 1))
    with pytest.raises(OrderViolation):
        encode_tagged([(1, 1, 2), (1, 1, 1)])
    with pytest.raises(OrderViolation):
        encode_tagged([(1, 1, 0)])


@given(posting_lists)
def test_round_trip(lst):
    data = encode_postings(lst)
    assert decode_postings(data) == [Posting(*p) for p in lst]
    docs, pos = decode_postings_array(data)
    assert list(zip(docs.tolist(), pos.tolist())) == lst


@given(st.lists(posting_lists, max_size=8))
def test_batch_decode_matches_single(lists):
    docs, pos, counts = decode_postings_batch([encode_postings(lst) for lst in lists])
    assert counts.tolist() == [len(lst) for lst in lists]
    assert list(zip(docs.tolist(), pos.tolist())) == [p for lst in lists for p in lst]


def test_batch_decode_rejects_a_varint_split_across_buffers():
    with pytest.raises(CorruptBlock):
        decode_postings_batch([b"\x81", b"\x01\x05"])
    with pytest.raises(CorruptBlock):
        decode_postings_batch([b"\x01", b"\x05"])


def test_round_trip_ten_thousand_lists():
    rng = random.Random(11)
    for _ in range(10_000):
        n = rng.randint(0, 12)
        lst = sorted({(rng.randint(1, 50), rng.randint(0, 300)) for _ in range(n)})
        assert decode_postings(encode_postings(lst)) == lst


@given(posting_lists, st.integers(0, 60))
def test_chained_blocks_concatenate(lst, cut):
    cut = min(cut, len(lst))
    head, tail = lst[:cut], lst[cut:]
    ctx = head[-1] if head else None
    joined = encode_postings(head) + encode_postings(tail, ctx)
    assert joined == encode_postings(lst)
    assert decode_postings(joined) == lst


def test_merge_example_from_two_keys():
    k1 = [(10, 3), (40, 7)]
    k2 = [(20, 1), (30, 2)]
    merged = merge_tagged({1: k1, 2: k2})
    assert merged == [(10, 3, 1), (20, 1, 2), (30, 2, 2), (40, 7, 1)]
    assert decode_tagged(encode_tagged(merged)) == merged
    assert project_tag(merged, 1) == k1 and project_tag(merged, 2) == k2


@settings(max_examples=150)
@given(st.dictionaries(st.integers(1, 40), posting_lists, max_size=6))
def test_tagged_projection(lists):
    merged = merge_tagged(lists)
    data = encode_tagged(merged)
    back = decode_tagged(data)
    assert back == merged
    for tag, lst in lists.items():
        assert project_tag(back, tag) == lst
    docs, pos, tags = decode_tagged_array(data)
    assert list(zip(docs.tolist(), pos.tolist(), tags.tolist())) == [tuple(t) for t in merged]
    if merged:
        m = np.array(merged, dtype=np.int64)
        assert encode_tagged_array(m[:, 0], m[:, 1], m[:, 2]) == data


def test_tagged_posting_projection_field():
    assert TaggedPosting(3, 4, 1).posting == Posting(3, 4)


@given(st.lists(posting_lists, max_size=8))
def test_encode_runs_matches_scalar(lists):
    lists = [lst for lst in lists if lst]
    docs = np.array([p[0] for lst in lists for p in lst], dtype=np.int64)
    pos = np.array([p[1] for lst in lists for p in lst], dtype=np.int64)
    starts = np.cumsum([0] + [len(lst) for lst in lists[:-1]]).astype(np.int64) \
        if lists else np.zeros(0, np.int64)
    blob, offsets = encode_runs(docs, pos, starts)
    for i, lst in enumerate(lists):
        assert blob[offsets[i]:offsets[i + 1]] == encode_postings(lst)


@given(st.lists(st.integers(0, 2**62), max_size=40))
def test_row_assembly(values):
    n = len(values)
    arr = np.array(values, dtype=np.uint64)
    raw, offs = gather_rows([constant_segment(b"\x07", n), varint_segment(arr),
                             varint_segment(arr)], n)
    for i, v in enumerate(values):
        assert raw[offs[i]:offs[i + 1]] == b"\x07" + varint(v) * 2
    if n:
        (a, b), end = read_varints(np.frombuffer(raw, np.uint8), offs[:-1] + 1, 2)
        assert a.tolist() == values and b.tolist() == values
        assert end.tolist() == offs[1:].tolist()
