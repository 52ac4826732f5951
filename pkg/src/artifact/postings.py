"""Posting model and the delta/varint byte codec used everywhere on disk.

Byte format (one posting)::

    varint(doc_delta) varint(position_field) [varint(tag)]

``doc_delta`` is the difference to the previous posting's document id. When
``doc_delta > 0`` (or for the very first posting of an uncontexted block) the
position field is the absolute position, otherwise it is the position delta.
Varints are little-endian base-128 groups with the high bit as continuation.

Because every block is encoded against the last posting of the block before
it, concatenating correctly chained blocks yields a valid encoding of the
concatenated list. The stream layer relies on this: a stream is one logical
byte string split across whatever storage currently holds it.
"""
from __future__ import annotations

from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

MAX_DOC_ID = (1 << 64) - 1
MAX_POSITION = (1 << 32) - 1
MAX_TAG = (1 << 16) - 1


class OrderViolation(ValueError):
    """Postings are not strictly increasing."""


class CorruptBlock(ValueError):
    """A byte block cannot be decoded into a valid posting list."""


class Posting(NamedTuple):
    doc_id: int
    position: int


class TaggedPosting(NamedTuple):
    doc_id: int
    position: int
    tag: int

    @property
    def posting(self) -> Posting:
        return Posting(self.doc_id, self.position)


def encode_varint(value: int, out: bytearray) -> None:
    if value < 0:
        raise ValueError("varint value must be non-negative")
    while value >= 0x80:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    out.append(value)


def decode_varint(data, pos: int) -> tuple[int, int]:
    """Return ``(value, next_pos)``; raise CorruptBlock on truncation."""
    result = 0
    shift = 0
    n = len(data)
    while True:
        if pos >= n:
            raise CorruptBlock("truncated varint")
        b = data[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if b < 0x80:
            return result, pos
        shift += 7
        if shift > 70:
            raise CorruptBlock("varint too long")


def varint_size(value: int) -> int:
    n = 1
    while value >= 0x80:
        value >>= 7
        n += 1
    return n


def _check_posting(doc: int, pos: int) -> None:
    if not (0 <= doc <= MAX_DOC_ID) or not (0 <= pos <= MAX_POSITION):
        raise OrderViolation(f"posting out of range: ({doc}, {pos})")


def encode_postings(postings: Iterable[Sequence[int]],
                    prev_context: Optional[Sequence[int]] = None) -> bytes:
    out = bytearray()
    if prev_context is None:
        prev_doc, prev_pos, first = 0, 0, True
    else:
        prev_doc, prev_pos, first = prev_context[0], prev_context[1], False
    for p in postings:
        doc, pos = p[0], p[1]
        _check_posting(doc, pos)
        dd = doc - prev_doc
        if dd > 0 or first:
            if dd < 0:
                raise OrderViolation(f"({doc}, {pos}) after ({prev_doc}, {prev_pos})")
            encode_varint(dd, out)
            encode_varint(pos if dd > 0 else pos - prev_pos, out)
        else:
            if dd < 0 or pos <= prev_pos:
                raise OrderViolation(f"({doc}, {pos}) after ({prev_doc}, {prev_pos})")
            out.append(0)
            encode_varint(pos - prev_pos, out)
        prev_doc, prev_pos, first = doc, pos, False
    return bytes(out)


def _varints(data) -> list[int]:
    """All varints of ``data``; one pass over the bytes, no per-value calls."""
    vals = []
    v = shift = 0
    for b in data:
        if b < 0x80:
            vals.append(v | (b << shift))
            v = shift = 0
        else:
            v |= (b & 0x7F) << shift
            shift += 7
            if shift > 70:
                raise CorruptBlock("varint too long")
    if shift:
        raise CorruptBlock("truncated varint")
    return vals


def decode_postings(data, prev_context: Optional[Sequence[int]] = None) -> list[Posting]:
    if prev_context is None:
        doc, pos, first = 0, 0, True
    else:
        doc, pos, first = prev_context[0], prev_context[1], False
    vals = _varints(data)
    if len(vals) & 1:
        raise CorruptBlock("truncated varint")
    out = []
    it = iter(vals)
    for dd, pf in zip(it, it):
        if dd:
            doc += dd
            pos = pf
        else:
            if pf == 0 and not first:
                raise CorruptBlock(f"duplicate posting ({doc}, {pos})")
            pos += pf
        first = False
        out.append(Posting(doc, pos))
    return out


def encode_tagged(postings: Iterable[Sequence[int]],
                  prev_context: Optional[Sequence[int]] = None) -> bytes:
    """Encode (doc, position, tag) triples ordered by (doc, position, tag).

    Two keys may post at the same (doc, position); the tag breaks the tie, so
    a zero position delta is legal here as long as the tag increases.
    """
    out = bytearray()
    if prev_context is None:
        prev = None
        prev_doc = prev_pos = 0
    else:
        prev = tuple(prev_context[:3])
        prev_doc, prev_pos = prev[0], prev[1]
    for p in postings:
        doc, pos, tag = p[0], p[1], p[2]
        _check_posting(doc, pos)
        if not (1 <= tag <= MAX_TAG):
            raise OrderViolation(f"tag out of range: {tag}")
        cur = (doc, pos, tag)
        if prev is not None and cur <= prev:
            raise OrderViolation(f"{cur} after {prev}")
        dd = doc - prev_doc
        encode_varint(dd, out)
        encode_varint(pos if dd > 0 else pos - prev_pos, out)
        encode_varint(tag, out)
        prev, prev_doc, prev_pos = cur, doc, pos
    return bytes(out)


def decode_tagged(data, prev_context: Optional[Sequence[int]] = None) -> list[TaggedPosting]:
    if prev_context is None:
        prev = None
        doc = pos = 0
    else:
        prev = tuple(prev_context[:3])
        doc, pos = prev[0], prev[1]
    out = []
    i, n = 0, len(data)
    while i < n:
        dd, i = decode_varint(data, i)
        pf, i = decode_varint(data, i)
        tag, i = decode_varint(data, i)
        if dd:
            doc += dd
            pos = pf
        else:
            pos += pf
        cur = TaggedPosting(doc, pos, tag)
        if tag == 0 or (prev is not None and cur <= prev):
            raise CorruptBlock(f"tagged posting out of order: {cur}")
        out.append(cur)
        prev = cur
    return out


def merge_tagged(lists: dict[int, Sequence[Sequence[int]]]) -> list[TaggedPosting]:
    """Combine per-tag posting lists into one list ordered by (doc, pos, tag)."""
    merged = [TaggedPosting(p[0], p[1], tag) for tag, lst in lists.items() for p in lst]
    merged.sort()
    return merged


def project_tag(tagged: Iterable[TaggedPosting], tag: int) -> list[Posting]:
    return [Posting(t[0], t[1]) for t in tagged if t[2] == tag]


# -- vectorised paths ---------------------------------------------------------

def _varint_bytes(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Encode a uint64 array as concatenated varints; returns (bytes, lengths)."""
    values = values.astype(np.uint64, copy=False)
    lengths = np.ones(len(values), dtype=np.int64)
    for k in range(1, 10):
        lengths += values >= np.uint64(1 << (7 * k))
    maxlen = int(lengths.max()) if len(lengths) else 0
    k = np.arange(maxlen, dtype=np.uint64)
    mat = ((values[:, None] >> (np.uint64(7) * k)) & np.uint64(0x7F)).astype(np.uint8)
    live = k[None, :] < lengths[:, None].astype(np.uint64)
    mat[:, :-1] |= (live[:, 1:].astype(np.uint8) << 7)
    out = mat[live]
    return out, lengths


def encode_runs(docs: np.ndarray, positions: np.ndarray,
                run_starts: np.ndarray) -> tuple[bytes, np.ndarray]:
    """Encode many independent posting lists at once.

    ``docs``/``positions`` hold the concatenation of the lists, each strictly
    ordered; ``run_starts`` gives the row index where each list begins. Every
    list is encoded without context. Returns the byte buffer and the byte
    offset of each run (length ``len(run_starts) + 1``).
    """
    n = len(docs)
    if n == 0:
        return b"", np.zeros(len(run_starts) + 1, dtype=np.int64)
    docs = docs.astype(np.int64, copy=False)
    positions = positions.astype(np.int64, copy=False)
    is_start = np.zeros(n, dtype=bool)
    is_start[run_starts] = True
    prev_doc = np.empty(n, dtype=np.int64)
    prev_doc[0] = 0
    prev_doc[1:] = docs[:-1]
    prev_doc[is_start] = 0
    prev_pos = np.empty(n, dtype=np.int64)
    prev_pos[0] = 0
    prev_pos[1:] = positions[:-1]
    prev_pos[is_start] = 0
    dd = docs - prev_doc
    pf = np.where((dd > 0) | is_start, positions, positions - prev_pos)
    if (dd < 0).any() or ((dd == 0) & (pf <= 0) & ~is_start).any():
        raise OrderViolation("runs are not strictly ordered")
    fields = np.empty(2 * n, dtype=np.uint64)
    fields[0::2] = dd
    fields[1::2] = pf
    buf, lengths = _varint_bytes(fields)
    per_posting = lengths[0::2] + lengths[1::2]
    offsets = np.concatenate(([0], np.cumsum(per_posting)))
    run_offsets = np.append(offsets[run_starts], offsets[-1])
    return buf.tobytes(), run_offsets


def _varint_values(data) -> np.ndarray:
    """Decode a buffer of concatenated varints into a uint64 array."""
    b = np.frombuffer(bytes(data), dtype=np.uint8)
    if len(b) == 0:
        return np.zeros(0, np.uint64)
    if b[-1] >= 0x80:
        raise CorruptBlock("truncated varint")
    ends = np.flatnonzero(b < 0x80)
    starts = np.empty_like(ends)
    starts[0] = 0
    starts[1:] = ends[:-1] + 1
    lens = ends - starts + 1
    if lens.max() > 10:
        raise CorruptBlock("varint too long")
    vals = np.zeros(len(ends), dtype=np.uint64)
    for k in range(int(lens.max())):
        m = lens > k
        vals[m] |= (b[starts[m] + k].astype(np.uint64) & np.uint64(0x7F)) << np.uint64(7 * k)
    return vals


def decode_postings_array(data, prev_context: Optional[Sequence[int]] = None
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised decode_postings; returns (docs, positions) int64 arrays."""
    vals = _varint_values(data)
    if len(vals) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    if len(vals) % 2:
        raise CorruptBlock("odd number of varints")
    dd = vals[0::2].astype(np.int64)
    pf = vals[1::2].astype(np.int64)
    if prev_context is None:
        doc0, pos0, first_free = 0, 0, True
    else:
        doc0, pos0, first_free = int(prev_context[0]), int(prev_context[1]), False
    docs = doc0 + np.cumsum(dd)
    bad = (dd == 0) & (pf == 0)
    if first_free:
        bad[0] = False
    if bad.any():
        raise CorruptBlock("duplicate posting")
    positions = _restarting_positions(dd, pf, pos0)
    return docs, positions


def decode_postings_batch(buffers: Sequence[bytes]
                          ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decode many independent posting buffers in one vectorised pass.

    Returns (docs, positions, counts): the postings of all buffers concatenated,
    and the number of postings each buffer contributed.
    """
    sizes = np.fromiter(map(len, buffers), np.int64, len(buffers))
    data = np.frombuffer(b"".join(buffers), dtype=np.uint8)
    byte_end = np.cumsum(sizes)
    nonempty = sizes > 0
    if nonempty.any() and (data[byte_end[nonempty] - 1] >= 0x80).any():
        raise CorruptBlock("truncated varint")
    terminal = np.concatenate(([0], np.cumsum(data < 0x80)))
    varints = terminal[byte_end] - terminal[byte_end - sizes]
    if (varints % 2).any():
        raise CorruptBlock("odd number of varints")
    counts = varints // 2
    vals = _varint_values(data)
    dd = vals[0::2].astype(np.int64)
    pf = vals[1::2].astype(np.int64)
    starts = (np.cumsum(counts) - counts)[counts > 0]
    reset = dd > 0
    reset[starts] = True
    if ((dd == 0) & (pf == 0) & ~reset).any():
        raise CorruptBlock("duplicate posting")
    csum = np.cumsum(dd)
    docs = csum - np.repeat(csum[starts] - dd[starts], counts[counts > 0])
    pcsum = np.cumsum(pf)
    base = np.maximum.accumulate(np.where(reset, pcsum - pf, -1))
    return docs, pcsum - base, counts


def _restarting_positions(dd: np.ndarray, pf: np.ndarray, pos0: int) -> np.ndarray:
    csum = np.cumsum(pf)
    reset = dd > 0
    base = np.maximum.accumulate(np.where(reset, csum - pf, -1))
    last_reset = np.maximum.accumulate(np.where(reset, np.arange(len(pf)), -1))
    return np.where(last_reset >= 0, csum - base, pos0 + csum)


def decode_tagged_array(data, prev_context: Optional[Sequence[int]] = None
                        ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised decode_tagged; returns (docs, positions, tags) int64 arrays."""
    vals = _varint_values(data)
    if len(vals) % 3:
        raise CorruptBlock("tagged varint count is not a multiple of three")
    if len(vals) == 0:
        z = np.zeros(0, np.int64)
        return z, z.copy(), z.copy()
    dd = vals[0::3].astype(np.int64)
    pf = vals[1::3].astype(np.int64)
    tags = vals[2::3].astype(np.int64)
    doc0, pos0 = (0, 0) if prev_context is None else (int(prev_context[0]), int(prev_context[1]))
    docs = doc0 + np.cumsum(dd)
    positions = _restarting_positions(dd, pf, pos0)
    bad = tags == 0
    n = len(docs)
    if n > 1:
        bad[1:] |= (dd[1:] == 0) & ((pf[1:] < 0) | ((pf[1:] == 0) & (tags[1:] <= tags[:-1])))
    if prev_context is not None and dd[0] == 0:
        bad[0] |= pf[0] == 0 and tags[0] <= int(prev_context[2])
    if bad.any():
        raise CorruptBlock("tagged posting out of order")
    return docs, positions, tags


def encode_tagged_array(docs: np.ndarray, positions: np.ndarray, tags: np.ndarray,
                        prev_context: Optional[Sequence[int]] = None) -> bytes:
    """Vectorised encode_tagged for rows already ordered by (doc, position, tag)."""
    n = len(docs)
    if n == 0:
        return b""
    docs = np.asarray(docs, np.int64)
    positions = np.asarray(positions, np.int64)
    tags = np.asarray(tags, np.int64)
    if prev_context is None:
        d0, p0, t0 = 0, 0, None
    else:
        d0, p0, t0 = int(prev_context[0]), int(prev_context[1]), int(prev_context[2])
    prev_doc = np.concatenate(([d0], docs[:-1]))
    prev_pos = np.concatenate(([p0], positions[:-1]))
    dd = docs - prev_doc
    pf = np.where(dd > 0, positions, positions - prev_pos)
    bad = (dd < 0) | (tags < 1) | (tags > MAX_TAG) | ((dd == 0) & (pf < 0))
    if n > 1:
        bad[1:] |= (dd[1:] == 0) & (pf[1:] == 0) & (tags[1:] <= tags[:-1])
    if t0 is not None:
        bad[0] |= bool(dd[0] == 0 and pf[0] == 0 and tags[0] <= t0)
    if bad.any():
        raise OrderViolation("tagged postings are not strictly ordered")
    fields = np.empty(3 * n, dtype=np.uint64)
    fields[0::3] = dd
    fields[1::3] = pf
    fields[2::3] = tags
    return _varint_bytes(fields)[0].tobytes()


# -- per-row byte assembly ------------------------------------------------------

def varint_lengths(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values).astype(np.uint64, copy=False)
    lengths = np.ones(len(values), dtype=np.int64)
    for k in range(1, 10):
        lengths += values >= np.uint64(1 << (7 * k))
    return lengths


def varint_segment(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One varint per row as a (buffer, starts, ends) segment for ``gather_rows``."""
    buf, lengths = _varint_bytes(np.asarray(values))
    ends = np.cumsum(lengths)
    return buf, ends - lengths, ends


def constant_segment(data: bytes, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (np.frombuffer(data, np.uint8), np.zeros(n, np.int64),
            np.full(n, len(data), np.int64))


def gather_rows(segments, n: int) -> tuple[bytes, np.ndarray]:
    """Concatenate, row by row, the byte ranges ``buf[starts[i]:ends[i]]`` of each segment.

    Returns the joined bytes and ``n + 1`` row offsets.
    """
    lens = [np.asarray(e, np.int64) - np.asarray(s, np.int64) for _, s, e in segments]
    row_len = np.sum(lens, axis=0) if lens else np.zeros(n, np.int64)
    offsets = np.zeros(n + 1, np.int64)
    np.cumsum(row_len, out=offsets[1:])
    out = np.empty(int(offsets[-1]), np.uint8)
    cur = offsets[:-1].copy()
    for (buf, s, _), ln in zip(segments, lens):
        m = int(ln.sum())
        if m:
            before = np.cumsum(ln) - ln
            step = np.arange(m, dtype=np.int64)
            src = np.repeat(np.asarray(s, np.int64) - before, ln) + step
            dst = np.repeat(cur - before, ln) + step
            out[dst] = buf[src]
        cur += ln
    return out.tobytes(), offsets


def read_varints(buf: np.ndarray, ptr: np.ndarray, count: int) -> tuple[list, np.ndarray]:
    """Read ``count`` consecutive varints at each offset in ``ptr``; returns values, new ptr."""
    last = len(buf) - 1
    values = []
    ptr = np.asarray(ptr, np.int64).copy()
    for _ in range(count):
        v = np.zeros(len(ptr), np.uint64)
        done = np.zeros(len(ptr), bool)
        size = np.zeros(len(ptr), np.int64)
        for k in range(10):
            byte = buf[np.minimum(ptr + k, last)].astype(np.uint64)
            live = ~done
            v[live] |= (byte[live] & np.uint64(0x7F)) << np.uint64(7 * k)
            end = live & (byte < 0x80)
            size[end] = k + 1
            done |= end
            if done.all():
                break
        if len(ptr) and (not done.all() or (ptr + size - 1).max() > last):
            raise CorruptBlock("truncated varint")
        values.append(v.astype(np.int64))
        ptr += size
    return values, ptr
