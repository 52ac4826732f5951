"""Phased construction support: key groups, the cluster cache and SR-records.

Indexing runs in phases. Each phase handles one group of keys, so every
stream touched in the phase can keep its newest clusters in memory. The
cluster cache is write-back: dirty clusters reach the disk when evicted or
when the phase ends, and contiguous dirty clusters are written with a single
operation.

SR-records hold the newest, not yet cluster-sized tail of a stream in small
blocks. A group's records are stored contiguously in the SR file and are
loaded and saved with one sequential operation per phase.
"""
from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .io_layer import IoStore


class CacheOvercommit(RuntimeError):
    pass


class PhaseViolation(RuntimeError):
    pass


_HASH_MOD = (1 << 55) - 55
_MASK = (1 << 64) - 1
_MIX = (0x9E3779B97F4A7C15, 0xBF58476D1CE4E5B9, 0x94D049BB133111EB)


def stable_hash(key: bytes) -> int:
    """64-bit key hash: the key read as a little-endian integer modulo 2**55 - 55,
    then the splitmix64 finalizer."""
    z = (int.from_bytes(key, "little") % _HASH_MOD + _MIX[0]) & _MASK
    z = ((z ^ (z >> 30)) * _MIX[1]) & _MASK
    z = ((z ^ (z >> 27)) * _MIX[2]) & _MASK
    return z ^ (z >> 31)


def stable_hashes(keys) -> np.ndarray:
    """``stable_hash`` of every key as a uint64 array."""
    n = len(keys)
    if n == 0:
        return np.zeros(0, np.uint64)
    lens = np.fromiter((len(k) for k in keys), np.int64, n)
    buf = np.frombuffer(b"".join(keys), np.uint8).astype(np.int64)
    ends = np.cumsum(lens)
    h = np.zeros(n, np.int64)
    for j in range(int(lens.max())):
        live = np.flatnonzero(lens > j)
        h[live] = (h[live] * 256 + buf[ends[live] - 1 - j]) % _HASH_MOD
    with np.errstate(over="ignore"):
        z = h.astype(np.uint64) + np.uint64(_MIX[0])
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX[1])
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX[2])
        return z ^ (z >> np.uint64(31))


def group_of(key: bytes, group_count: int) -> int:
    """Range partition of the key hash into ``group_count`` groups."""
    return (stable_hash(key) * group_count) >> 64


@dataclass
class CacheConfig:
    per_stream: int = 45
    total_bytes: int = 256 << 20

    def __post_init__(self):
        if self.per_stream < 1:
            raise ValueError("cache.per_stream must be >= 1")
        if self.total_bytes <= 0:
            raise ValueError("cache.total must be positive")


@dataclass(frozen=True)
class PhasePlan:
    """Partition of the key space into numbered groups, one per key class."""

    groups: dict = field(default_factory=lambda: {"known": 1})

    def group_count(self, key_class: str = "known") -> int:
        return self.groups[key_class]

    def group_of(self, key: bytes, key_class: str = "known") -> int:
        return group_of(key, self.groups[key_class])


def streams_per_group(cache: CacheConfig, cluster_size: int) -> int:
    return max(1, cache.total_bytes // (cache.per_stream * cluster_size))


def plan_phases(key_classes: dict, cache: CacheConfig, cluster_size: int) -> PhasePlan:
    """Group counts from an estimate of active streams per key class.

    group_count = ceil(streams * per_stream * cluster_size / cache_total), at
    least 1: every active stream of a phase must fit its per-stream share of
    clusters into the cache at the same time.
    """
    if cache.total_bytes <= 0:
        raise ValueError("cache budget must be positive")
    groups = {}
    for cls, streams in key_classes.items():
        need = streams * cache.per_stream * cluster_size
        groups[cls] = max(1, math.ceil(need / cache.total_bytes))
    return PhasePlan(groups)


class ClusterCache:
    """Write-back cache of whole clusters keyed by physical cluster number.

    Each stream keeps at most ``per_stream`` resident clusters; the most
    recently used ones stay. When the global budget is exceeded the least
    recently used cluster is evicted, skipping the last resident cluster of
    any stream.
    """

    def __init__(self, io: IoStore, cluster_size: int, config: Optional[CacheConfig] = None,
                 fid: int = 0):
        self.io = io
        self.cs = cluster_size
        self.config = config or CacheConfig()
        self.fid = fid
        self.max_clusters = max(1, self.config.total_bytes // cluster_size)
        # phys -> [data, dirty, owner]
        self._entries: dict[int, list] = {}
        self._lru: OrderedDict[int, None] = OrderedDict()
        self._owned: dict[object, OrderedDict] = {}
        self.evictions = 0

    def __len__(self):
        return len(self._entries)

    def __contains__(self, phys: int) -> bool:
        return phys in self._entries

    def resident(self, phys: int) -> bool:
        return phys in self._entries

    def resident_bytes(self) -> int:
        return len(self._entries) * self.cs

    def owner_count(self, owner) -> int:
        od = self._owned.get(owner)
        return len(od) if od else 0

    def is_dirty(self, phys: int) -> bool:
        e = self._entries.get(phys)
        return bool(e and e[1])

    # -- bookkeeping ------------------------------------------------------------------
    def _touch(self, phys: int, entry: list) -> None:
        self._lru.move_to_end(phys)
        od = self._owned.get(entry[2])
        if od is not None:
            od.move_to_end(phys)

    def _insert(self, phys: int, data: bytearray, dirty: bool, owner) -> list:
        entry = [data, dirty, owner]
        self._entries[phys] = entry
        self._lru[phys] = None
        od = self._owned.get(owner)
        if od is None:
            od = self._owned[owner] = OrderedDict()
        od[phys] = None
        if owner is not None and len(od) > self.config.per_stream:
            self._evict(next(iter(od)))
        while len(self._entries) > self.max_clusters:
            self._evict_global(protect=phys)
        return entry

    def _drop(self, phys: int) -> list:
        entry = self._entries.pop(phys)
        del self._lru[phys]
        od = self._owned.get(entry[2])
        if od is not None:
            od.pop(phys, None)
            if not od:
                del self._owned[entry[2]]
        return entry

    def _evict_global(self, protect: int) -> None:
        for phys in self._lru:
            if phys == protect:
                continue
            owner = self._entries[phys][2]
            if owner is None or len(self._owned[owner]) > 1:
                self._evict(phys)
                return
        raise CacheOvercommit("cache budget cannot hold one cluster per active stream")

    def _evict(self, phys: int) -> None:
        entry = self._entries[phys]
        if entry[1]:
            # write the victim together with its contiguous dirty neighbours
            lo = phys
            while self.is_dirty(lo - 1):
                lo -= 1
            hi = phys
            while self.is_dirty(hi + 1):
                hi += 1
            self._write_run(lo, hi - lo + 1)
        self._drop(phys)
        self.evictions += 1

    def _write_run(self, lo: int, count: int) -> None:
        if count == 1:
            entry = self._entries[lo]
            self.io.write(self.fid, lo * self.cs, entry[0])
            entry[1] = False
            return
        buf = bytearray()
        for p in range(lo, lo + count):
            entry = self._entries[p]
            buf += entry[0]
            entry[1] = False
        self.io.write(self.fid, lo * self.cs, buf)

    # -- public API ---------------------------------------------------------------------
    def get(self, phys: int, owner=None, load: bool = True) -> bytearray:
        """Resident view of a cluster; reads it (one op) unless ``load`` is False."""
        entry = self._entries.get(phys)
        if entry is not None:
            self._touch(phys, entry)
            return entry[0]
        if load:
            data = bytearray(self.io.read(self.fid, phys * self.cs, self.cs))
        else:
            data = bytearray(self.cs)
        return self._insert(phys, data, False, owner)[0]

    def mark_dirty(self, phys: int) -> None:
        self._entries[phys][1] = True

    def put(self, phys: int, data, owner=None) -> None:
        """Install a full cluster image as dirty."""
        if len(data) != self.cs:
            raise ValueError("cluster image has the wrong size")
        entry = self._entries.get(phys)
        if entry is not None:
            entry[0][:] = data
            entry[1] = True
            self._touch(phys, entry)
        else:
            self._insert(phys, bytearray(data), True, owner)

    def read_run(self, phys: int, count: int, owner=None, keep: bool = True) -> bytes:
        """Read ``count`` consecutive clusters; non-resident stretches cost one op each."""
        parts = []
        p = phys
        end = phys + count
        while p < end:
            entry = self._entries.get(p)
            if entry is not None:
                self._touch(p, entry)
                parts.append(bytes(entry[0]))
                p += 1
                continue
            q = p
            while q < end and q not in self._entries:
                q += 1
            raw = self.io.read(self.fid, p * self.cs, (q - p) * self.cs)
            parts.append(raw)
            if keep:
                for i in range(q - p):
                    if (q - p - i) <= self.config.per_stream:
                        self._insert(p + i, bytearray(raw[i * self.cs:(i + 1) * self.cs]),
                                     False, owner)
            p = q
        return b"".join(parts)

    def discard(self, phys: int) -> None:
        """Forget a cluster without writing it (its contents are dead)."""
        if phys in self._entries:
            self._drop(phys)

    def flush(self) -> None:
        dirty = sorted(p for p, e in self._entries.items() if e[1])
        i = 0
        while i < len(dirty):
            j = i
            while j + 1 < len(dirty) and dirty[j + 1] == dirty[j] + 1:
                j += 1
            self._write_run(dirty[i], j - i + 1)
            i = j + 1

    def clear(self) -> None:
        self.flush()
        self._entries.clear()
        self._lru.clear()
        self._owned.clear()


@dataclass
class SRRecord:
    owner: int
    data: bytearray
    block_size: int = 128

    @property
    def used_bytes(self) -> int:
        return len(self.data)

    @property
    def blocks(self) -> int:
        return -(-len(self.data) // self.block_size)


SR_GROUP_HEADER = struct.Struct("<4sIII")
SR_RECORD_HEADER = struct.Struct("<QI")
SR_MAGIC = b"SRG1"


class SRStore:
    """SR-record file: one contiguous run of records per group.

    Records are held in memory while their group's phase is active. A run is
    rewritten in place when it still fits its slot, otherwise it moves to the
    end of the file.
    """

    def __init__(self, io: IoStore, block_size: int = 128, budget: int = 32 << 20,
                 cluster_size: int = 32768, fid: int = 1, suffix: str = ".sr"):
        if block_size <= 0:
            raise ValueError("sr.block_size must be positive")
        self.io = io
        self.fid = fid
        io.register_file(fid, suffix)
        self.block_size = block_size
        self.budget = budget
        self.cluster_size = cluster_size
        self.directory: dict[int, list] = {}   # group -> [offset, capacity, length]
        self.file_end = 0
        self.active_group: Optional[int] = None
        self.records: dict[int, SRRecord] = {}
        self._blocks = 0
        self._reader_cache: dict[int, dict[int, bytes]] = {}

    # -- persistence of the directory (stored by the owning engine) ---------------------
    def state(self) -> dict:
        return {"end": self.file_end, "dir": {str(g): v for g, v in self.directory.items()}}

    def load_state(self, st: dict) -> None:
        self.file_end = st.get("end", 0)
        self.directory = {int(g): list(v) for g, v in st.get("dir", {}).items()}

    # -- run codec -------------------------------------------------------------------------
    def _pad(self, n: int) -> int:
        return -(-n // self.block_size) * self.block_size

    def _encode_run(self, group: int) -> bytes:
        body = bytearray()
        for sid in sorted(self.records):
            rec = self.records[sid]
            if not rec.data:
                continue
            body += SR_RECORD_HEADER.pack(sid, len(rec.data))
            body += rec.data
            body += bytes(self._pad(len(rec.data)) - len(rec.data))
        count = sum(1 for r in self.records.values() if r.data)
        return SR_GROUP_HEADER.pack(SR_MAGIC, group, count, len(body)) + bytes(body)

    def _decode_run(self, raw: bytes, group: int) -> dict[int, bytes]:
        magic, g, count, nbytes = SR_GROUP_HEADER.unpack_from(raw, 0)
        if magic != SR_MAGIC or g != group:
            raise IOError(f"SR run for group {group} is corrupt")
        out = {}
        pos = SR_GROUP_HEADER.size
        for _ in range(count):
            sid, used = SR_RECORD_HEADER.unpack_from(raw, pos)
            pos += SR_RECORD_HEADER.size
            out[sid] = raw[pos:pos + used]
            pos += self._pad(used)
        return out

    def _read_run(self, group: int) -> dict[int, bytes]:
        slot = self.directory.get(group)
        if not slot or slot[2] == 0:
            return {}
        raw = self.io.read(self.fid, slot[0], slot[2])
        return self._decode_run(raw, group)

    # -- phase lifecycle ----------------------------------------------------------------------
    def begin(self, group: int) -> None:
        if self.active_group is not None:
            raise PhaseViolation("an SR phase is already active")
        self.active_group = group
        self._reader_cache.pop(group, None)
        self.records = {sid: SRRecord(sid, bytearray(d), self.block_size)
                        for sid, d in self._read_run(group).items()}
        self._blocks = sum(r.blocks for r in self.records.values())

    def end(self) -> None:
        group = self.active_group
        if group is None:
            raise PhaseViolation("no SR phase is active")
        slot = self.directory.get(group)
        if self.records or slot:
            run = self._encode_run(group)
            if slot and slot[1] >= len(run):
                offset = slot[0]
            else:
                offset = self.file_end
                cap = -(-len(run) // 4096) * 4096
                self.file_end += cap
                slot = self.directory[group] = [offset, cap, 0]
            self.io.write(self.fid, offset, run)
            slot[2] = len(run)
        self.active_group = None
        self.records = {}
        self._blocks = 0

    # -- record access ----------------------------------------------------------------------
    @property
    def memory_used(self) -> int:
        return self._blocks * self.block_size

    def has(self, sid: int) -> bool:
        rec = self.records.get(sid)
        return rec is not None and len(rec.data) > 0

    def admit(self, nbytes: int) -> bool:
        """Whether a new record of ``nbytes`` fits the memory budget."""
        return self.memory_used + self._pad(max(nbytes, 1)) <= self.budget

    def append(self, sid: int, data) -> SRRecord:
        if self.active_group is None:
            raise PhaseViolation("SR append outside a phase")
        rec = self.records.get(sid)
        if rec is None:
            rec = self.records[sid] = SRRecord(sid, bytearray(), self.block_size)
        before = rec.blocks
        rec.data += data
        self._blocks += rec.blocks - before
        return rec

    def take(self, sid: int, n: int) -> bytes:
        rec = self.records[sid]
        before = rec.blocks
        out = bytes(rec.data[:n])
        del rec.data[:n]
        self._blocks += rec.blocks - before
        return out

    def drop(self, sid: int) -> bytes:
        rec = self.records.pop(sid, None)
        if rec is None:
            return b""
        self._blocks -= rec.blocks
        return bytes(rec.data)

    def peek(self, sid: int, group: int) -> bytes:
        """Current record bytes; reads the group's run when it is not loaded."""
        if self.active_group == group:
            rec = self.records.get(sid)
            return bytes(rec.data) if rec else b""
        cached = self._reader_cache.get(group)
        if cached is None:
            cached = self._reader_cache[group] = self._read_run(group)
        return bytes(cached.get(sid, b""))

    def invalidate(self) -> None:
        self._reader_cache.clear()
