"""Key -> stream descriptor map, persisted as an extendible-hash file.

The whole dictionary is resident in memory as serialized entries; descriptors
handed out by :meth:`Dictionary.get` are decoded copies and must be stored
back with :meth:`Dictionary.put`. On commit only the buckets holding changed
keys are rewritten.

Buckets are addressed by the high bits of a stable 64-bit key hash. Phase
groups are ranges of the same hash (see ``group_of``), so one phase touches
only the buckets of its own hash range.
"""
from __future__ import annotations

import os
import struct
from bisect import bisect_left
from dataclasses import dataclass, fields
from enum import IntEnum
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .cluster_store import NULL_LINK
from .phase_cache import group_of, stable_hash, stable_hashes

PAGE_SIZE = 4096
DIC_HEADER = struct.Struct("<8sIII")
DIC_MAGIC = b"UPDDIC01"
BUCKET_HEADER = struct.Struct("<4sBHQ")
BUCKET_MAGIC = b"DBKT"
ENTRY_LEN = struct.Struct("<HH")
MAX_DEPTH = 40


class CorruptEntry(ValueError):
    pass


class KeyKind(IntEnum):
    LEMMA = 1
    LEMMA_PAIR = 2
    STOP_SEQUENCE = 3
    SHARED = 0x7F


class State(IntEnum):
    EMBEDDED = 1
    TAGGED = 2
    PART = 3
    CHAIN = 4
    SEGMENTS = 5


def shared_key(shared_id: int) -> bytes:
    return bytes([KeyKind.SHARED]) + shared_id.to_bytes(8, "little")


F_SR, F_FL, F_SHARED = 1, 2, 4
_STATES = {int(s): s for s in State}
# varint fields after the common five, per state
_STATE_FIELDS = {State.EMBEDDED: 1, State.TAGGED: 2, State.PART: 3, State.CHAIN: 5,
                 State.SEGMENTS: 5}
_LINK_BIAS = 1 << 64          # NULL_LINK + 1 wraps to 0, so absent links cost one byte


def _put_varint(v: int, out: bytearray) -> None:
    while v >= 0x80:
        out.append((v & 0x7F) | 0x80)
        v >>= 7
    out.append(v)


def _varint_table(limit: int) -> list[bytes]:
    out = []
    for v in range(limit):
        b = bytearray()
        _put_varint(v, b)
        out.append(bytes(b))
    return out


_SMALL_VARINTS = _varint_table(1 << 14)


_PLAIN_HEAD = bytes((1, 0))


def varint_bytes(v: int) -> bytes:
    if v < 16384:
        return _SMALL_VARINTS[v]
    b = bytearray()
    _put_varint(v, b)
    return bytes(b)


def plain_embedded(stream_id: int, total: int, last_doc: int, last_pos: int,
                   data: bytes) -> bytes:
    """Serialized descriptor of an EMBEDDED stream without staging or sharing flags."""
    n = varint_bytes(len(data))
    return b"".join((_PLAIN_HEAD, varint_bytes(stream_id), varint_bytes(total),
                     varint_bytes(last_doc), varint_bytes(last_pos), n, n, data))


def parse_plain_embedded(raw: bytes):
    """(stream id, total, last doc, last pos, data) of a ``plain_embedded`` entry, else None."""
    if raw[:2] != _PLAIN_HEAD:
        return None
    vals = []
    i = 2
    for _ in range(6):
        v = shift = 0
        while True:
            byte = raw[i]
            i += 1
            v |= (byte & 0x7F) << shift
            if byte < 0x80:
                break
            shift += 7
        vals.append(v)
    return vals[0], vals[1], vals[2], vals[3], raw[i:]


@dataclass(slots=True)
class StreamDescriptor:
    """Where one key's posting list lives; only the active state's fields are meaningful."""

    state: State = State.EMBEDDED
    stream_id: int = 0
    total_postings: int = 0
    last_doc: int = 0
    last_pos: int = 0
    main_bytes: int = 0
    embedded: bytes = b""
    shared_id: int = 0
    tag: int = 0
    part_cluster: int = 0
    part_div: int = 0
    part_index: int = 0
    first: int = NULL_LINK
    last: int = NULL_LINK
    segment_count: int = 0
    tail_used: int = 0
    chain_limit: int = 0
    fl_slot: int = -1
    fl_used: int = 0
    sr: bool = False
    shared: bool = False
    next_tag: int = 0
    last_tag: int = 0

    @property
    def last_posting(self):
        return (self.last_doc, self.last_pos) if self.total_postings else None

    def clear_storage(self) -> None:
        """Reset every state-specific field (used on state transitions)."""
        self.main_bytes = 0
        self.embedded = b""
        self.shared_id = self.tag = 0
        self.part_cluster = self.part_div = self.part_index = 0
        self.first = self.last = NULL_LINK
        self.segment_count = self.tail_used = self.chain_limit = 0

    def copy(self) -> "StreamDescriptor":
        return StreamDescriptor(**{f.name: getattr(self, f.name) for f in fields(self)})

    # -- serialization -----------------------------------------------------------------------
    def to_bytes(self) -> bytes:
        """state byte, flag byte, then unsigned varints (state-dependent tail)."""
        flags = (F_SR if self.sr else 0) | (F_FL if self.fl_slot >= 0 else 0) \
            | (F_SHARED if self.shared else 0)
        st = self.state
        if st == State.EMBEDDED and not flags:
            # the common case: a small stream kept inside the dictionary
            emb = self.embedded
            return b"".join((bytes((st, 0)), varint_bytes(self.stream_id), varint_bytes(self.total_postings),
                             varint_bytes(self.last_doc), varint_bytes(self.last_pos), varint_bytes(self.main_bytes),
                             varint_bytes(len(emb)), emb))
        out = bytearray((st, flags))
        for v in (self.stream_id, self.total_postings, self.last_doc, self.last_pos,
                  self.main_bytes):
            _put_varint(v, out)
        if flags & F_FL:
            _put_varint(self.fl_slot, out)
            _put_varint(self.fl_used, out)
        if flags & F_SHARED:
            _put_varint(self.next_tag, out)
            _put_varint(self.last_tag, out)
        if st == State.EMBEDDED:
            _put_varint(len(self.embedded), out)
            out += self.embedded
        elif st == State.TAGGED:
            _put_varint(self.shared_id, out)
            _put_varint(self.tag, out)
        elif st == State.PART:
            _put_varint(self.part_cluster, out)
            _put_varint(self.part_div, out)
            _put_varint(self.part_index, out)
        else:
            _put_varint((self.first + 1) % _LINK_BIAS, out)
            _put_varint((self.last + 1) % _LINK_BIAS, out)
            _put_varint(self.segment_count, out)
            _put_varint(self.tail_used, out)
            _put_varint(self.chain_limit, out)
        return bytes(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "StreamDescriptor":
        try:
            if len(raw) < 2:
                raise CorruptEntry("descriptor too short")
            st, flags = raw[0], raw[1]
            state = _STATES.get(st)
            if state is None:
                raise CorruptEntry(f"unknown state {st}")
            vals = []
            i, n = 2, len(raw)
            need = 5 + (2 if flags & F_FL else 0) + (2 if flags & F_SHARED else 0)
            need += _STATE_FIELDS[state]
            v = shift = 0
            while len(vals) < need:
                if i >= n:
                    raise CorruptEntry("descriptor truncated")
                byte = raw[i]
                i += 1
                if byte < 0x80:
                    vals.append(v | (byte << shift))
                    v = shift = 0
                else:
                    v |= (byte & 0x7F) << shift
                    shift += 7
                    if shift > 63:
                        raise CorruptEntry("varint too long")
            d = cls(state, vals[0], vals[1], vals[2], vals[3], vals[4])
            k = 5
            if flags & F_FL:
                d.fl_slot, d.fl_used = vals[5], vals[6]
                k = 7
            if flags & F_SHARED:
                d.shared = True
                d.next_tag, d.last_tag = vals[k], vals[k + 1]
                k += 2
            d.sr = bool(flags & F_SR)
            if d.state == State.EMBEDDED:
                ln = vals[k]
                d.embedded = bytes(raw[i:i + ln])
                if len(d.embedded) != ln:
                    raise CorruptEntry("embedded data truncated")
                i += ln
            elif d.state == State.TAGGED:
                d.shared_id, d.tag = vals[k], vals[k + 1]
            elif d.state == State.PART:
                d.part_cluster, d.part_div, d.part_index = vals[k:k + 3]
            else:
                first, last, d.segment_count, d.tail_used, d.chain_limit = vals[k:k + 5]
                d.first = (first - 1) % _LINK_BIAS
                d.last = (last - 1) % _LINK_BIAS
        except ValueError as exc:
            if isinstance(exc, CorruptEntry):
                raise
            raise CorruptEntry(str(exc)) from exc
        if i != len(raw):
            raise CorruptEntry("trailing bytes after descriptor")
        return d


class _Bucket:
    __slots__ = ("depth", "prefix", "page", "entries", "size")

    def __init__(self, depth: int, prefix: int, page: int):
        self.depth = depth
        self.prefix = prefix
        self.page = page
        self.entries: dict[bytes, bytes] = {}
        self.size = BUCKET_HEADER.size      # serialized page payload, kept current

    def set(self, key: bytes, raw: bytes) -> bool:
        old = self.entries.get(key)
        self.entries[key] = raw
        if old is None:
            self.size += ENTRY_LEN.size + len(key) + len(raw)
            return True
        self.size += len(raw) - len(old)
        return False

    def remove(self, key: bytes) -> bool:
        old = self.entries.pop(key, None)
        if old is None:
            return False
        self.size -= ENTRY_LEN.size + len(key) + len(old)
        return True


class Dictionary:
    """Persistent key -> StreamDescriptor map in ``<path>`` (extendible hashing).

    ``get``/``put``/``delete`` accept the key's ``stable_hash`` when the caller
    already has it.
    """

    def __init__(self, path, io=None, fid: int = 2, load: Optional[bool] = None):
        """``io``: optional IoStore; when given, pages are read and written through it
        (file ``<name>.dic``, counted in its ledger) and ``path`` is informational."""
        self.path = Path(path)
        self.io = io
        self.fid = fid
        if io is not None:
            io.register_file(fid, ".dic")
            self.path = io.path(".dic")
        self.global_depth = 0
        self.buckets: list[_Bucket] = [_Bucket(0, 0, 1)]
        self.directory: list[int] = [0]
        self._dirty: dict[bytes, tuple[int, StreamDescriptor]] = {}
        self._deleted: dict[bytes, int] = {}
        self._dirty_buckets: set[int] = {0}
        self._grown: set[int] = set()
        self._dir_array: Optional[np.ndarray] = None
        self._count = 0
        self._written = False
        if load is None:
            load = self.path.exists() and self.path.stat().st_size > 0
        if load:
            self._load()

    # -- addressing -----------------------------------------------------------------------
    def _bucket_index(self, h: int) -> int:
        return self.directory[h >> (64 - self.global_depth)] if self.global_depth else 0

    def bucket_indices(self, hashes: np.ndarray) -> np.ndarray:
        """Vectorised ``_bucket_index`` for a uint64 hash array."""
        if not self.global_depth:
            return np.zeros(len(hashes), np.int64)
        if self._dir_array is None or len(self._dir_array) != len(self.directory):
            self._dir_array = np.asarray(self.directory, np.int64)
        return self._dir_array[(hashes >> np.uint64(64 - self.global_depth)).astype(np.int64)]

    def bulk_set(self, bucket_ids, keys, raws, olds) -> None:
        """Write serialized entries straight into their buckets.

        ``olds`` holds each key's current entry (None when absent). The keys must
        not be pending in ``put``/``delete`` and ``bucket_ids`` must be current.
        """
        buckets = self.buckets
        added = 0
        overhead = ENTRY_LEN.size
        for bi, key, raw, old in zip(bucket_ids, keys, raws, olds):
            b = buckets[bi]
            b.entries[key] = raw
            if old is None:
                b.size += overhead + len(key) + len(raw)
                added += 1
            else:
                b.size += len(raw) - len(old)
        self._count += added
        touched = set(bucket_ids)
        self._dirty_buckets |= touched
        self._grown.update(bi for bi in touched if buckets[bi].size > PAGE_SIZE)

    # -- map API ------------------------------------------------------------------------------
    def get(self, key: bytes, h: Optional[int] = None) -> Optional[StreamDescriptor]:
        hit = self._dirty.get(key)
        if hit is not None:
            d = hit[1]
            if d.__class__ is bytes:
                d = StreamDescriptor.from_bytes(d)
                self._dirty[key] = (hit[0], d)
            return d
        if key in self._deleted:
            return None
        if h is None:
            h = stable_hash(key)
        raw = self.buckets[self._bucket_index(h)].entries.get(key)
        if raw is None:
            return None
        return StreamDescriptor.from_bytes(raw)

    def put(self, key: bytes, desc: StreamDescriptor, h: Optional[int] = None) -> None:
        if len(key) > 1024:
            raise ValueError("key too long")
        hit = self._dirty.get(key)
        if hit is not None:
            if hit[1] is not desc:
                self._dirty[key] = (hit[0], desc)
            return
        self._dirty[key] = (stable_hash(key) if h is None else h, desc)
        self._deleted.pop(key, None)

    def put_raw(self, key: bytes, raw: bytes, h: int) -> None:
        """Store an already serialized descriptor for a key that is not pending."""
        self._dirty[key] = (h, raw)
        self._deleted.pop(key, None)

    def delete(self, key: bytes, h: Optional[int] = None) -> None:
        self._dirty.pop(key, None)
        self._deleted[key] = stable_hash(key) if h is None else h

    def __contains__(self, key: bytes) -> bool:
        return self.get(key) is not None

    def __len__(self) -> int:
        self._apply()
        return self._count

    def keys(self) -> Iterator[bytes]:
        self._apply()
        for b in self.buckets:
            yield from b.entries

    def items(self) -> Iterator[tuple[bytes, StreamDescriptor]]:
        self._apply()
        for b in self.buckets:
            for k, raw in b.entries.items():
                yield k, StreamDescriptor.from_bytes(raw)

    def raw_items(self) -> Iterator[tuple[bytes, bytes]]:
        """Serialized entries, without decoding (for integrity checks)."""
        self._apply()
        for b in self.buckets:
            yield from b.entries.items()

    def iterate(self, kind: Optional[int] = None, group: Optional[int] = None,
                group_count: int = 1) -> Iterator[tuple[bytes, StreamDescriptor]]:
        for k, d in self.items():
            if kind is not None and k[0] != kind:
                continue
            if group is not None and group_of(k, group_count) != group:
                continue
            yield k, d

    # -- write-back ----------------------------------------------------------------------------
    def _apply(self) -> None:
        buckets, dirty = self.buckets, self._dirty_buckets
        for key, h in self._deleted.items():
            bi = self._bucket_index(h)
            if buckets[bi].remove(key):
                self._count -= 1
                dirty.add(bi)
        self._deleted.clear()
        grown, self._grown = self._grown, set()
        for key, (h, desc) in self._dirty.items():
            bi = self._bucket_index(h)
            b = buckets[bi]
            if b.set(key, desc if desc.__class__ is bytes else desc.to_bytes()):
                self._count += 1
            dirty.add(bi)
            if b.size > PAGE_SIZE:
                grown.add(bi)
        self._dirty.clear()
        if not grown:
            return
        grown = sorted(grown)
        members = [list(buckets[bi].entries.items()) for bi in grown]
        all_hashes = stable_hashes([k for m in members for k, _ in m])
        at = 0
        for bi, m in zip(grown, members):
            b = buckets[bi]
            hs = all_hashes[at:at + len(m)]
            at += len(m)
            order = np.argsort(hs, kind="stable").tolist()
            rows = [m[i] for i in order]
            hashes = hs[order].tolist()
            cum = [0]
            for r in rows:
                cum.append(cum[-1] + ENTRY_LEN.size + len(r[0]) + len(r[1]))
            self._place(bi, b.depth, b.prefix, b.page, rows, hashes, cum, 0, len(rows))

    def _place(self, bi: int, depth: int, prefix: int, page: int, rows: list, hashes: list,
               cum: list, lo: int, hi: int) -> None:
        """Store ``rows[lo:hi]`` ((key, raw) sorted by ``hashes``) as bucket ``bi``,
        splitting by further hash bits until every resulting page fits."""
        size = BUCKET_HEADER.size + cum[hi] - cum[lo]
        if size <= PAGE_SIZE:
            b = _Bucket(depth, prefix, page)
            b.entries = dict(rows[lo:hi])
            b.size = size
            self.buckets[bi] = b
            self._dirty_buckets.add(bi)
            return
        if depth >= MAX_DEPTH:
            raise CorruptEntry("bucket cannot be split further")
        if depth == self.global_depth:
            self.directory = [x for x in self.directory for _ in (0, 1)]
            self.global_depth += 1
            self._dir_array = None
        nd = depth + 1
        mid = bisect_left(hashes, ((prefix << 1) | 1) << (64 - nd), lo, hi)
        hi_index = len(self.buckets)
        self.buckets.append(None)
        span = 1 << (self.global_depth - nd)
        start = ((prefix << 1) | 1) * span
        self.directory[start:start + span] = [hi_index] * span
        self._dir_array = None
        self._place(bi, nd, prefix << 1, page, rows, hashes, cum, lo, mid)
        self._place(hi_index, nd, (prefix << 1) | 1, hi_index + 1, rows, hashes, cum, mid, hi)

    def _page(self, b: _Bucket) -> bytes:
        pieces = [BUCKET_HEADER.pack(BUCKET_MAGIC, b.depth, len(b.entries), b.prefix)]
        pack = ENTRY_LEN.pack
        for k, v in b.entries.items():
            pieces += (pack(len(k), len(v)), k, v)
        body = b"".join(pieces)
        return body + bytes(PAGE_SIZE - len(body))

    def commit(self) -> None:
        """Write changed bucket pages (contiguous pages in one request) and the header page."""
        self._apply()
        if not self._dirty_buckets and self._written:
            return
        pages = {self.buckets[bi].page: self._page(self.buckets[bi]) for bi in self._dirty_buckets}
        header = bytearray(PAGE_SIZE)
        DIC_HEADER.pack_into(header, 0, DIC_MAGIC, 1, self.global_depth, len(self.buckets))
        pages[0] = header
        runs = []
        for p in sorted(pages):
            if runs and runs[-1][0] + len(runs[-1][1]) // PAGE_SIZE == p:
                runs[-1][1].extend(pages[p])
            else:
                runs.append([p, bytearray(pages[p])])
        if self.io is not None:
            for p, data in runs:
                self.io.write(self.fid, p * PAGE_SIZE, data)
        else:
            mode = "r+b" if self.path.exists() else "w+b"
            with open(self.path, mode) as f:
                for p, data in runs:
                    f.seek(p * PAGE_SIZE)
                    f.write(data)
        self._dirty_buckets.clear()
        self._written = True

    def _read_pages(self) -> bytes:
        if self.io is None:
            with open(self.path, "rb") as f:
                return f.read()
        head = self.io.read(self.fid, 0, PAGE_SIZE)
        nb = DIC_HEADER.unpack_from(head, 0)[3]
        return head + self.io.read(self.fid, PAGE_SIZE, nb * PAGE_SIZE)

    def _load(self) -> None:
        raw = self._read_pages()
        magic, version, gd, nb = DIC_HEADER.unpack_from(raw, 0)
        if magic != DIC_MAGIC or version != 1:
            raise CorruptEntry("not a dictionary file")
        self.global_depth = gd
        self.directory = [-1] * (1 << gd)
        self.buckets = []
        count = 0
        for page in range(1, nb + 1):
            off = page * PAGE_SIZE
            magic, depth, n, prefix = BUCKET_HEADER.unpack_from(raw, off)
            if magic != BUCKET_MAGIC:
                raise CorruptEntry(f"bad bucket page {page}")
            b = _Bucket(depth, prefix, page)
            pos = off + BUCKET_HEADER.size
            for _ in range(n):
                kl, vl = ENTRY_LEN.unpack_from(raw, pos)
                pos += ENTRY_LEN.size
                k = raw[pos:pos + kl]
                pos += kl
                b.set(bytes(k), bytes(raw[pos:pos + vl]))
                pos += vl
            count += n
            bi = len(self.buckets)
            self.buckets.append(b)
            span = 1 << (gd - depth)
            for i in range(prefix * span, (prefix + 1) * span):
                self.directory[i] = bi
        if -1 in self.directory:
            raise CorruptEntry("dictionary directory has holes")
        self._count = count
        self._dirty_buckets = set()
        self._written = True

    def close(self) -> None:
        self.commit()

    def size_on_disk(self) -> int:
        return os.path.getsize(self.path) if self.path.exists() else 0
