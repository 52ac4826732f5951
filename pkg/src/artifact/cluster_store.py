"""The data file as an array of fixed-size clusters.

Physical layout of ``<name>.dat``::

    cluster 0                  store header
    clusters 1 .. F            FL area (F = fl_area_clusters)
    clusters F+1 ..            general clusters, ordinal k at physical F+1+k

Every cluster keeps its final 8 bytes for a link field, so a cluster carries
``cluster_size - 8`` payload bytes. A segment of ``2**k`` consecutive clusters
stripes its payload across those clusters in order. A PART-cluster instead
uses its final 64 bytes as a metadata area (division count and occupancy
bitmap) and splits the rest into equal parts.

Links are 64-bit: ``ordinal << 8 | log2(segment length)``; all ones means
"no link".
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

from .io_layer import IoStore
from .phase_cache import ClusterCache

LINK_BYTES = 8
PART_META_BYTES = 64
NULL_LINK = (1 << 64) - 1
HEADER = struct.Struct("<8sIIIIQI")
HEADER_MAGIC = b"UPDIDX01"
FORMAT_VERSION = 1
PART_META = struct.Struct("<2sBBQ")
PART_MAGIC = b"PC"
LINK = struct.Struct("<Q")
_NULL_LINK_BYTES = LINK.pack(NULL_LINK)


class DoubleFree(RuntimeError):
    pass


class FlAreaExhausted(RuntimeError):
    pass


def is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def make_link(ordinal: int, length: int) -> int:
    return (ordinal << 8) | (length.bit_length() - 1)


def split_link(link: int) -> tuple[int, int]:
    return link >> 8, 1 << (link & 0xFF)


@dataclass
class StoreConfig:
    cluster_size: int = 32768
    max_segment_len: int = 8
    fl_area_clusters: int = 64
    part_divisions: tuple = (2, 4, 8, 16)

    def __post_init__(self):
        self.part_divisions = tuple(self.part_divisions)
        if self.cluster_size < 4096:
            raise ValueError("cluster_size must be >= 4096")
        if not is_pow2(self.max_segment_len):
            raise ValueError("max_segment_len must be a power of 2")
        if self.fl_area_clusters < 0:
            raise ValueError("fl_area_clusters must be >= 0")
        divs = self.part_divisions
        if any(not is_pow2(d) or d < 2 or d > 64 for d in divs) or list(divs) != sorted(set(divs)):
            raise ValueError("part_divisions must be strictly increasing powers of 2 in 2..64")

    @property
    def payload(self) -> int:
        return self.cluster_size - LINK_BYTES


@dataclass
class Segment:
    first: int
    length: int
    used_bytes: int = 0
    link: int = NULL_LINK

    @property
    def ref(self) -> int:
        return make_link(self.first, self.length)


@dataclass
class FreeLists:
    free_clusters: list = field(default_factory=list)
    free_segments: dict = field(default_factory=dict)      # length -> [first ordinals]
    free_parts: dict = field(default_factory=dict)         # divisions -> {ordinal: None}


class ClusterStore:
    def __init__(self, io: IoStore, cache: ClusterCache, config: StoreConfig,
                 fl_groups: int = 1):
        self.io = io
        self.cache = cache
        self.config = config
        self.cs = config.cluster_size
        self.payload = config.payload
        self.base = 1 + config.fl_area_clusters
        self.total = 0
        self.free = FreeLists()
        self._free_set: set[int] = set()
        self._free_seg_set: set[tuple[int, int]] = set()
        self.parts: dict[int, list] = {}                     # ordinal -> [divisions, mask]
        self.fl_groups = max(1, fl_groups)
        self.fl_owner: dict[int, int] = {}
        self._header_dirty = True
        io.reserve(0, self.base * self.cs)

    # -- geometry ------------------------------------------------------------------
    def phys(self, ordinal: int) -> int:
        return self.base + ordinal

    def fl_phys(self, slot: int) -> int:
        return 1 + slot

    def part_size(self, divisions: int) -> int:
        return (self.cs - PART_META_BYTES) // divisions

    @property
    def max_part_size(self) -> int:
        return self.part_size(self.config.part_divisions[0])

    # -- persistence -------------------------------------------------------------------
    def header_bytes(self) -> bytes:
        c = self.config
        return HEADER.pack(HEADER_MAGIC, FORMAT_VERSION, c.cluster_size, c.max_segment_len,
                           c.fl_area_clusters, self.total, self.fl_groups)

    def write_header(self) -> None:
        if self._header_dirty:
            self.io.write(0, 0, self.header_bytes())
            self._header_dirty = False

    @staticmethod
    def read_header(io: IoStore) -> Optional[dict]:
        if io.file_size(0) < HEADER.size and not io.extent_map(0).starts:
            return None
        raw = io.read(0, 0, HEADER.size)
        magic, version, cs, n, fl, total, fl_groups = HEADER.unpack(raw)
        if magic != HEADER_MAGIC:
            return None
        if version != FORMAT_VERSION:
            raise IOError(f"unsupported store format version {version}")
        return {"cluster_size": cs, "max_segment_len": n, "fl_area_clusters": fl,
                "total": total, "fl_groups": fl_groups}

    def state(self) -> dict:
        return {
            "total": self.total,
            "free_clusters": self.free.free_clusters,
            "free_segments": {str(k): v for k, v in self.free.free_segments.items()},
            "parts": {str(k): v for k, v in self.parts.items()},
            "fl_owner": {str(k): v for k, v in self.fl_owner.items()},
            "fl_groups": self.fl_groups,
        }

    def load_state(self, st: dict) -> None:
        self.total = st["total"]
        self.free.free_clusters = list(st["free_clusters"])
        self.free.free_segments = {int(k): list(v) for k, v in st["free_segments"].items()}
        self.parts = {int(k): list(v) for k, v in st["parts"].items()}
        self.fl_owner = {int(k): v for k, v in st["fl_owner"].items()}
        self.fl_groups = st.get("fl_groups", 1)
        self._free_set = set(self.free.free_clusters)
        self._free_seg_set = {(s, ln) for ln, lst in self.free.free_segments.items() for s in lst}
        self.free.free_parts = {}
        for ordinal, (div, mask) in self.parts.items():
            if mask != (1 << div) - 1:
                self.free.free_parts.setdefault(div, {})[ordinal] = None
        self._header_dirty = False

    def mark_header_dirty(self) -> None:
        self._header_dirty = True

    # -- clusters --------------------------------------------------------------------------
    def _extend(self, count: int) -> int:
        first = self.total
        self.total += count
        self._header_dirty = True
        return first

    def alloc_cluster(self) -> int:
        if self.free.free_clusters:
            c = self.free.free_clusters.pop()
            self._free_set.discard(c)
            return c
        return self._extend(1)

    def free_cluster(self, c: int) -> None:
        if c in self._free_set or not (0 <= c < self.total):
            raise DoubleFree(f"cluster {c} is already free")
        self.cache.discard(self.phys(c))
        self.free.free_clusters.append(c)
        self._free_set.add(c)

    # -- segments ----------------------------------------------------------------------------
    def alloc_segment(self, length: int) -> Segment:
        if not is_pow2(length) or length > self.config.max_segment_len:
            raise ValueError(f"segment length {length} is not a power of 2 <= N")
        if length == 1:
            return Segment(self.alloc_cluster(), 1)
        bucket = self.free.free_segments.get(length)
        if bucket:
            first = bucket.pop()
            self._free_seg_set.discard((first, length))
            return Segment(first, length)
        return Segment(self._extend(length), length)

    def free_segment(self, seg: Segment) -> None:
        if seg.length == 1:
            self.free_cluster(seg.first)
            return
        key = (seg.first, seg.length)
        if key in self._free_seg_set:
            raise DoubleFree(f"segment {key} is already free")
        for i in range(seg.length):
            self.cache.discard(self.phys(seg.first + i))
        self.free.free_segments.setdefault(seg.length, []).append(seg.first)
        self._free_seg_set.add(key)

    def write_payload(self, first: int, offset: int, data, owner=None) -> None:
        """Write payload bytes into a segment starting at payload ``offset``.

        Clusters that already hold payload before ``offset`` are loaded first
        (read-modify-write); clusters written from their start are not read.
        """
        P = self.payload
        pos = 0
        n = len(data)
        while pos < n:
            ci, co = divmod(offset + pos, P)
            take = min(P - co, n - pos)
            phys = self.phys(first + ci)
            fresh = co == 0 and not self.cache.resident(phys)
            buf = self.cache.get(phys, owner, load=co > 0)
            if fresh:
                buf[P:] = _NULL_LINK_BYTES
            buf[co:co + take] = data[pos:pos + take]
            self.cache.mark_dirty(phys)
            pos += take

    def read_payload(self, first: int, nbytes: int, owner=None, keep: bool = False) -> bytes:
        """Payload of the first ``nbytes`` of a segment (one op per uncached stretch)."""
        if nbytes == 0:
            return b""
        P = self.payload
        count = -(-nbytes // P)
        raw = self.cache.read_run(self.phys(first), count, owner, keep=keep)
        out = b"".join(raw[i * self.cs:i * self.cs + P] for i in range(count))
        return out[:nbytes]

    def read_segment_with_link(self, first: int, length: int, nbytes: int, link_cluster: int,
                               owner=None, keep: bool = False) -> tuple[bytes, int]:
        """Read payload and the link stored in cluster ``link_cluster`` of the segment."""
        P = self.payload
        count = max(-(-nbytes // P), link_cluster + 1)
        raw = self.cache.read_run(self.phys(first), count, owner, keep=keep)
        payload = b"".join(raw[i * self.cs:i * self.cs + P] for i in range(count))[:nbytes]
        lo = link_cluster * self.cs + P
        return payload, LINK.unpack_from(raw, lo)[0]

    def get_link(self, ordinal: int, owner=None) -> int:
        buf = self.cache.get(self.phys(ordinal), owner, load=True)
        return LINK.unpack_from(buf, self.payload)[0]

    def set_link(self, ordinal: int, link: int, owner=None, load: bool = True) -> None:
        phys = self.phys(ordinal)
        buf = self.cache.get(phys, owner, load=load)
        LINK.pack_into(buf, self.payload, link)
        self.cache.mark_dirty(phys)

    def segment_cached(self, first: int, count: int) -> bool:
        return all(self.cache.resident(self.phys(first + i)) for i in range(count))

    def grow_segment(self, current: Segment, owner=None) -> Segment:
        """Double a full segment: copy its payload into the first half of a new one."""
        if current.length >= self.config.max_segment_len:
            raise ValueError("segment already has the maximum length; link a new one instead")
        data = self.read_payload(current.first, current.used_bytes, owner)
        new = self.alloc_segment(current.length * 2)
        self.free_segment(current)
        self.write_payload(new.first, 0, data, owner)
        new.used_bytes = len(data)
        new.link = current.link
        return new

    # -- PART clusters ------------------------------------------------------------------------------
    def division_for(self, required: int) -> int:
        for div in reversed(self.config.part_divisions):
            if self.part_size(div) >= required:
                return div
        raise ValueError(f"{required} bytes do not fit any part")

    def _write_part_meta(self, ordinal: int, owner=None, load: bool = True) -> None:
        div, mask = self.parts[ordinal]
        phys = self.phys(ordinal)
        buf = self.cache.get(phys, owner, load=load)
        PART_META.pack_into(buf, self.cs - PART_META_BYTES, PART_MAGIC, div, 0, mask)
        self.cache.mark_dirty(phys)

    def alloc_part(self, required: int) -> tuple[int, int, int]:
        """Returns (cluster ordinal, divisions, part index)."""
        if required >= self.cs // 2:
            raise ValueError("PART holds less than half a cluster")
        div = self.division_for(required)
        bucket = self.free.free_parts.setdefault(div, {})
        fresh = False
        if bucket:
            ordinal = next(iter(bucket))
        else:
            ordinal = self.alloc_cluster()
            self.parts[ordinal] = [div, 0]
            bucket[ordinal] = None
            fresh = True
        mask = self.parts[ordinal][1]
        index = (~mask & (mask + 1)).bit_length() - 1
        mask |= 1 << index
        self.parts[ordinal][1] = mask
        if mask == (1 << div) - 1:
            del bucket[ordinal]
        self._write_part_meta(ordinal, load=not fresh)
        return ordinal, div, index

    def free_part(self, ordinal: int, index: int) -> None:
        div, mask = self.parts[ordinal]
        if not mask & (1 << index):
            raise DoubleFree(f"part {index} of cluster {ordinal} is already free")
        mask &= ~(1 << index)
        if mask == 0:
            del self.parts[ordinal]
            self.free.free_parts.get(div, {}).pop(ordinal, None)
            self.free_cluster(ordinal)
            return
        self.parts[ordinal][1] = mask
        self.free.free_parts.setdefault(div, {})[ordinal] = None
        self._write_part_meta(ordinal)

    def write_part(self, ordinal: int, index: int, offset: int, data) -> None:
        div = self.parts[ordinal][0]
        if offset + len(data) > self.part_size(div):
            raise ValueError("part overflow")
        phys = self.phys(ordinal)
        buf = self.cache.get(phys, None, load=True)
        start = index * self.part_size(div) + offset
        buf[start:start + len(data)] = data
        self.cache.mark_dirty(phys)

    def read_part(self, ordinal: int, index: int, length: int) -> bytes:
        div = self.parts[ordinal][0]
        raw = self.cache.get(self.phys(ordinal), None, load=True)
        start = index * self.part_size(div)
        return bytes(raw[start:start + length])

    def read_part_meta(self, ordinal: int) -> tuple[int, int]:
        raw = self.cache.read_run(self.phys(ordinal), 1, None, keep=False)
        magic, div, _, mask = PART_META.unpack_from(raw, self.cs - PART_META_BYTES)
        if magic != PART_MAGIC:
            raise IOError(f"cluster {ordinal} has no PART metadata")
        return div, mask

    def promote_part(self, ordinal: int, index: int, used: int, extra=b"") -> tuple[int, int, int]:
        """Move a part's data (plus ``extra``) into the smallest part that fits it."""
        data = self.read_part(ordinal, index, used) + bytes(extra)
        new = self.alloc_part(len(data))
        self.free_part(ordinal, index)
        self.write_part(new[0], new[2], 0, data)
        return new

    # -- FL area -------------------------------------------------------------------------------------
    def fl_range(self, group: int) -> range:
        F = self.config.fl_area_clusters
        per = F // self.fl_groups
        g = group % self.fl_groups
        return range(g * per, (g + 1) * per)

    def fl_alloc(self, owner: int, group: int = 0) -> int:
        if self.config.fl_area_clusters <= 0:
            raise FlAreaExhausted("no FL area configured")
        for slot in self.fl_range(group):
            if slot not in self.fl_owner:
                self.fl_owner[slot] = owner
                return slot
        raise FlAreaExhausted(f"FL area of group {group} is full")

    def fl_release(self, slot: int) -> None:
        if slot not in self.fl_owner:
            raise DoubleFree(f"FL cluster {slot} is not allocated")
        del self.fl_owner[slot]
        self.cache.discard(self.fl_phys(slot))

    def fl_load_all(self) -> list[bytes]:
        F = self.config.fl_area_clusters
        if F == 0:
            return []
        raw = self.cache.read_run(self.fl_phys(0), F, None, keep=False)
        return [raw[i * self.cs:(i + 1) * self.cs] for i in range(F)]

    def fl_load_group(self, group: int) -> None:
        """Bring the group's used FL clusters into the cache with one sequential read."""
        used = [s for s in self.fl_range(group) if s in self.fl_owner]
        if not used:
            return
        lo, hi = min(used), max(used)
        raw = self.cache.read_run(self.fl_phys(lo), hi - lo + 1, None, keep=False)
        for s in used:
            i = s - lo
            phys = self.fl_phys(s)
            if not self.cache.resident(phys):
                self.cache.get(phys, ("fl", s), load=False)[:] = raw[i * self.cs:(i + 1) * self.cs]

    def fl_buffer(self, slot: int) -> bytearray:
        return self.cache.get(self.fl_phys(slot), ("fl", slot), load=True)

    def fl_touch(self, slot: int) -> None:
        self.cache.mark_dirty(self.fl_phys(slot))

    # -- verification ------------------------------------------------------------------------------------
    def verify(self, owned: dict[int, object]) -> list[str]:
        """Check that allocated and free clusters partition the data file."""
        problems = []
        seen: dict[int, str] = {}

        def claim(c: int, what: str):
            if not (0 <= c < self.total):
                problems.append(f"{what}: cluster {c} outside data file")
            elif c in seen:
                problems.append(f"cluster {c} claimed by {seen[c]} and {what}")
            else:
                seen[c] = what

        for c in self.free.free_clusters:
            claim(c, "free list")
        for ln, firsts in self.free.free_segments.items():
            for f in firsts:
                for i in range(ln):
                    claim(f + i, f"free segment {f}/{ln}")
        for c, (div, mask) in self.parts.items():
            if mask == 0:
                problems.append(f"part cluster {c} is empty but not freed")
            claim(c, "part cluster")
        for c, owner in owned.items():
            claim(c, f"stream {owner}")
        missing = [c for c in range(self.total) if c not in seen]
        if missing:
            problems.append(f"{len(missing)} clusters neither free nor allocated: {missing[:10]}")
        if len(self.free.free_clusters) != len(self._free_set):
            problems.append("duplicate entries in free cluster list")
        return problems
