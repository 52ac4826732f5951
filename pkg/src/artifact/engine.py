"""One self-contained inverted file: data, SR and pack files plus a dictionary.

:class:`SubIndex` wires the storage layers together and owns the phase
lifecycle. Each phase processes one key group: staging areas of the group are
loaded at the start, the cache is flushed and the dictionary and allocator
state are committed at the end.

Files of a sub-index called ``name``::

    name.dat    clusters (header, FL area, general clusters)
    name.sr     SR-record runs, one per group
    name.pack   packed small writes (DS)
    name.dsmap  extent log of packed writes
    name.dic    dictionary (extendible hash)
    name.meta   allocator state, SR directory, counters and the I/O ledger (JSON)
"""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

from .cluster_store import ClusterStore, StoreConfig
from .dictionary import CorruptEntry, Dictionary, KeyKind, State, StreamDescriptor
from .io_layer import DsConfig, IoLedger, IoStore
from .phase_cache import CacheConfig, ClusterCache, PhaseViolation, SRStore
from .postings import CorruptBlock, decode_postings, decode_tagged
from .streams import StrategySet, StreamManager

log = logging.getLogger(__name__)
META_VERSION = 1


@dataclass
class EngineConfig:
    store: StoreConfig = field(default_factory=StoreConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)
    strategies: StrategySet = field(default_factory=StrategySet)
    ds_small_threshold: int = 32768
    ds_pack_capacity: int = 1 << 20

    def ds(self) -> DsConfig:
        return DsConfig("DS" in self.strategies, self.ds_small_threshold,
                        max(self.ds_pack_capacity, self.ds_small_threshold))


class SubIndex:
    def __init__(self, directory, name: str, config: Optional[EngineConfig] = None,
                 group_count: int = 1, audit: Optional[Callable] = None):
        self.dir = Path(directory)
        self.name = name
        config = config or EngineConfig()
        self.io = IoStore(self.dir, name, config.ds())
        meta_path = self.dir / f"{name}.meta"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else None
        header = ClusterStore.read_header(self.io) if meta else None
        if header:
            stored = replace(config.store, cluster_size=header["cluster_size"],
                             max_segment_len=header["max_segment_len"],
                             fl_area_clusters=header["fl_area_clusters"])
            if stored != config.store:
                log.warning("%s: using stored geometry %s", name, stored)
            config = replace(config, store=stored)
            group_count = meta["group_count"]
        if "C1" not in config.strategies:
            group_count = 1
        self.config = config
        self.group_count = group_count
        self.meta_path = meta_path
        cs = config.store.cluster_size
        self.cache = ClusterCache(self.io, cs, config.cache)
        fl_groups = max(1, min(group_count, config.store.fl_area_clusters))
        self.store = ClusterStore(self.io, self.cache, config.store, fl_groups=fl_groups)
        s = config.strategies
        self.sr = SRStore(self.io, s.sr_block_size, s.sr_memory_budget, cs) \
            if "SR" in s else None
        self.dict = Dictionary(self.dir / f"{name}.dic", self.io, fid=2, load=bool(meta))
        self.streams = StreamManager(self.store, self.sr, self.dict, s, group_count, audit)
        self._ledger_base = IoLedger()
        self.phases_run = 0
        if meta:
            if meta.get("version") != META_VERSION:
                raise IOError(f"unsupported meta version in {meta_path}")
            self.store.load_state(meta["store"])
            if self.sr is not None:
                self.sr.load_state(meta.get("sr", {}))
            self.streams.next_stream_id = meta["next_stream_id"]
            self._ledger_base = IoLedger(**meta["ledger"])
            self.phases_run = meta.get("phases", 0)
        self.active_group: Optional[int] = None
        self._changed = meta is None

    # -- accounting ---------------------------------------------------------------------------------
    @property
    def ledger(self) -> IoLedger:
        """Operations and bytes since the index was created (persisted across sessions)."""
        return self._ledger_base + self.io.ledger

    # -- phases ---------------------------------------------------------------------------------------
    def begin_phase(self, group: int) -> None:
        if self.active_group is not None:
            raise PhaseViolation(f"phase {self.active_group} is still active")
        if not 0 <= group < self.group_count:
            raise ValueError(f"group {group} out of range 0..{self.group_count - 1}")
        self.active_group = group
        self._changed = True
        if self.sr is not None:
            self.sr.invalidate()
            self.sr.begin(group)
        if "FL" in self.config.strategies:
            self.store.fl_load_group(group)
        self.streams.begin(group)

    def end_phase(self) -> None:
        if self.active_group is None:
            raise PhaseViolation("no phase is active")
        self.streams.end()
        if self.sr is not None:
            self.sr.end()
        self.active_group = None
        self.phases_run += 1
        self.commit()

    def append(self, key: bytes, postings, small_hint: bool = True) -> StreamDescriptor:
        self._changed = True
        return self.streams.append(key, postings, small_hint)

    def append_encoded(self, key: bytes, data: bytes, count: int, first, last,
                       small_hint: bool = True) -> StreamDescriptor:
        self._changed = True
        return self.streams.append_encoded(key, data, count, first, last, small_hint)

    # -- durability -------------------------------------------------------------------------------------
    def commit(self) -> None:
        if self.active_group is not None:
            raise PhaseViolation("commit inside an active phase")
        self.cache.clear()
        self.store.write_header()
        self.dict.commit()
        self.io.commit()
        meta = {
            "version": META_VERSION,
            "group_count": self.group_count,
            "next_stream_id": self.streams.next_stream_id,
            "phases": self.phases_run,
            "strategies": self.config.strategies.label(),
            "store": self.store.state(),
            "sr": self.sr.state() if self.sr is not None else {},
            "ledger": self.ledger.to_dict(),
        }
        tmp = self.meta_path.with_suffix(".meta.tmp")
        tmp.write_text(json.dumps(meta))
        tmp.replace(self.meta_path)
        self._changed = False

    def close(self) -> None:
        """End an open phase or commit pending changes; an untouched index is left as is."""
        if self.active_group is not None:
            self.end_phase()
        elif self._changed:
            self.commit()
        self.io.close()

    # -- queries ------------------------------------------------------------------------------------------
    def lookup(self, key: bytes):
        return self.streams.read_stream(key)

    def lookup_arrays(self, key: bytes):
        return self.streams.read_stream_arrays(key)

    def descriptor(self, key: bytes) -> Optional[StreamDescriptor]:
        return self.dict.get(key)

    def stats(self) -> dict:
        states = Counter()
        shared = 0
        keys = 0
        postings = 0
        for key, desc in self.dict.items():
            if key[0] == KeyKind.SHARED:
                shared += 1
                continue
            keys += 1
            postings += desc.total_postings
            states[desc.state.name] += 1
        free_seg = sum(len(v) * int(k) for k, v in self.store.free.free_segments.items())
        return {
            "keys": keys,
            "postings": postings,
            "shared_streams": shared,
            "states": dict(sorted(states.items())),
            "clusters": self.store.total,
            "free_clusters": len(self.store.free.free_clusters) + free_seg,
            "part_clusters": len(self.store.parts),
            "fl_clusters_used": len(self.store.fl_owner),
            "groups": self.group_count,
            "phases": self.phases_run,
            "ledger": self.ledger.to_dict(),
        }

    # -- integrity ----------------------------------------------------------------------------------------
    def verify(self) -> list[str]:
        """Walk every stream and the allocator; returns a list of problems (empty = sound).

        I/O spent by the walk is not charged to the persisted ledger.
        """
        if self.active_group is not None:
            raise PhaseViolation("verify inside an active phase")
        saved = self.io.ledger.copy()
        try:
            return self._verify()
        finally:
            self.io.ledger = saved
            self.cache.clear()

    def _verify(self) -> list[str]:
        problems: list[str] = []
        owned: dict[int, int] = {}
        part_users: dict[tuple[int, int], int] = {}
        shared_tags: dict[int, set] = {}
        shared_descs: dict[int, StreamDescriptor] = {}
        descs = []
        for key, raw in self.dict.raw_items():
            try:
                descs.append((key, StreamDescriptor.from_bytes(raw)))
            except CorruptEntry as exc:
                problems.append(f"key {key.hex()}: corrupt descriptor ({exc})")
        for key, d in descs:
            label = f"stream {d.stream_id}"
            if d.shared:
                shared_descs[d.stream_id] = d
            try:
                for c in self.streams.owned_clusters(d):
                    if c in owned:
                        problems.append(f"cluster {c} owned by streams {owned[c]} and {d.stream_id}")
                    owned[c] = d.stream_id
                if d.state == State.PART:
                    meta = self.store.parts.get(d.part_cluster)
                    if meta is None or not meta[1] & (1 << d.part_index) or meta[0] != d.part_div:
                        problems.append(f"{label}: part {d.part_cluster}/{d.part_index} not allocated")
                    if (d.part_cluster, d.part_index) in part_users:
                        problems.append(f"{label}: part shared with another stream")
                    part_users[(d.part_cluster, d.part_index)] = d.stream_id
                if d.fl_slot >= 0 and self.store.fl_owner.get(d.fl_slot) != d.stream_id:
                    problems.append(f"{label}: FL cluster {d.fl_slot} owned by someone else")
                if d.state == State.TAGGED:
                    shared_tags.setdefault(d.shared_id, set()).add(d.tag)
                    got = self.streams.read_stream(key)
                elif d.shared:
                    got = decode_tagged(self.streams.stream_bytes(key, d))
                else:
                    got = decode_postings(self.streams.stream_bytes(key, d))
                if len(got) != d.total_postings:
                    problems.append(f"{label}: {len(got)} postings, descriptor says "
                                    f"{d.total_postings}")
                elif got and (got[-1][0], got[-1][1]) != (d.last_doc, d.last_pos):
                    problems.append(f"{label}: last posting {tuple(got[-1])} differs from descriptor")
            except (CorruptBlock, IOError, LookupError, ValueError) as exc:
                problems.append(f"{label}: unreadable ({exc})")
        for sid, tags in shared_tags.items():
            sh = shared_descs.get(sid)
            if sh is None:
                problems.append(f"shared stream {sid} missing")
            elif max(tags) >= sh.next_tag:
                problems.append(f"shared stream {sid}: tag beyond the assigned range")
        live = {d.stream_id for _, d in descs}
        for slot, owner in self.store.fl_owner.items():
            if owner not in live:
                problems.append(f"FL cluster {slot} owned by unknown stream {owner}")
        for ordinal, (div, mask) in self.store.parts.items():
            try:
                if self.store.read_part_meta(ordinal) != (div, mask):
                    problems.append(f"part cluster {ordinal}: on-disk metadata differs")
            except IOError as exc:
                problems.append(f"part cluster {ordinal}: {exc}")
        problems += self.store.verify(owned)
        return problems

    def items(self):
        """Every (key, posting list) pair, in dictionary order."""
        for key, desc in self.dict.items():
            if key[0] != KeyKind.SHARED:
                yield key, self.streams.read_stream(key, desc)

    def read_all(self):
        """(keys, docs, positions, counts) for the whole sub-index; see
        :meth:`StreamManager.read_all_arrays`."""
        return self.streams.read_all_arrays()

    def all_keys(self, kind: Optional[int] = None):
        for key in self.dict.keys():
            if key[0] == KeyKind.SHARED:
                continue
            if kind is None or key[0] == kind:
                yield key
