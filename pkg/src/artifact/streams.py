"""Per-key stream state machine.

A key's posting list is one logical byte string (see :mod:`postings`); this
module decides where its bytes live and moves them when the key outgrows its
current place:

    EMBEDDED -> TAGGED | PART | CHAIN | SEGMENTS
    TAGGED   -> PART | CHAIN | SEGMENTS        (extraction)
    PART     -> PART (larger part) | CHAIN | SEGMENTS
    CHAIN    -> SEGMENTS                       (chain limit exceeded)

Newest bytes of a CHAIN/SEGMENTS stream may be staged in an FL-cluster or an
SR-record (never both) before they reach main storage.

Chains are backward linked: the first cluster of every chain segment keeps
the link to the previous segment. Segments of the S strategy are forward
linked through the last cluster of each segment.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .cluster_store import (NULL_LINK, ClusterStore, FlAreaExhausted, Segment,
                            split_link)
from .dictionary import (_PLAIN_HEAD, CorruptEntry, Dictionary, KeyKind, State, StreamDescriptor,
                         group_of, shared_key)
from .phase_cache import PhaseViolation, SRStore, stable_hash
from .postings import (MAX_TAG, OrderViolation, Posting, decode_postings,
                       decode_postings_array, decode_postings_batch, decode_tagged_array, decode_varint,
                       encode_postings, encode_tagged_array, encode_varint,
                       constant_segment, gather_rows, read_varints, varint_lengths, varint_segment)

STRATEGIES = ("C1", "EM", "PART", "S", "FL", "TAG", "CH", "SR", "DS")
EXPERIMENT_SETS = {
    1: ("C1", "EM", "PART", "S", "FL", "TAG"),
    2: ("C1", "EM", "PART", "S", "FL", "TAG", "CH", "SR"),
    3: ("C1", "EM", "PART", "S", "FL", "TAG", "CH", "SR", "DS"),
}


class TagSpaceExhausted(RuntimeError):
    pass


@dataclass
class StrategySet:
    enabled: frozenset = frozenset(EXPERIMENT_SETS[1])
    em_threshold: int = 64
    chain_limit: int = 9
    chain_limit_jitter: Optional[tuple] = None
    tag_stream_max_bytes: Optional[int] = None    # default: one cluster
    tag_entry_max_bytes: Optional[int] = None     # default: a quarter of the stream limit
    sr_block_size: int = 128
    sr_memory_budget: int = 32 << 20

    def __post_init__(self):
        self.enabled = frozenset(self.enabled)
        unknown = self.enabled - set(STRATEGIES)
        if unknown:
            raise ValueError(f"unknown strategies: {sorted(unknown)}")
        if self.chain_limit < 1:
            raise ValueError("chain_limit must be >= 1")
        if "CH" in self.enabled and "S" not in self.enabled:
            raise ValueError("CH requires S")
        if "SR" in self.enabled and "C1" not in self.enabled:
            raise ValueError("SR requires C1")
        if self.chain_limit_jitter is not None:
            lo, hi = self.chain_limit_jitter
            if not 1 <= lo <= hi:
                raise ValueError("chain_limit_jitter must be an inclusive range lo..hi, lo >= 1")
        if self.em_threshold < 0 or self.sr_block_size <= 0 or self.sr_memory_budget < 0:
            raise ValueError("negative strategy parameter")

    @classmethod
    def from_names(cls, names, **params) -> "StrategySet":
        if isinstance(names, str):
            names = [n for n in names.replace("+", ",").split(",") if n.strip()]
        return cls(frozenset(n.strip().upper() for n in names), **params)

    @classmethod
    def experiment(cls, number: int, **params) -> "StrategySet":
        return cls(frozenset(EXPERIMENT_SETS[number]), **params)

    def __contains__(self, name: str) -> bool:
        return name in self.enabled

    def label(self) -> str:
        return "+".join(s for s in STRATEGIES if s in self.enabled)


@dataclass
class Audit:
    """Optional event log used by the structural checks."""

    events: list = field(default_factory=list)

    def __call__(self, *event) -> None:
        self.events.append(event)

    def of(self, kind: str) -> list:
        return [e for e in self.events if e[0] == kind]


def _rebase_first(data: bytes, d0: int, p0: int, ld: int, lp: int) -> bytes:
    """Re-encode the first posting of a context-free run against (ld, lp)."""
    head = bytearray()
    _, off = decode_varint(data, 0)
    if d0 != ld:
        encode_varint(d0 - ld, head)
    else:
        _, off = decode_varint(data, off)
        head.append(0)
        encode_varint(p0 - lp, head)
    return bytes(head) + data[off:]


def _pow2_at_least(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


class StreamManager:
    def __init__(self, store: ClusterStore, sr: Optional[SRStore], dictionary: Dictionary,
                 strategies: StrategySet, group_count: int = 1,
                 audit: Optional[Callable] = None):
        self.store = store
        self.sr = sr
        self.dict = dictionary
        self.s = strategies
        self.group_count = group_count
        self.audit = audit
        self.P = store.payload
        self.N = store.config.max_segment_len
        self.next_stream_id = 1
        self.group: Optional[int] = None
        self._pending: dict[int, list] = {}          # shared stream id -> tagged postings
        self._pending_bytes: dict[int, int] = {}
        # shared stream id -> [docs, positions, tags, extracted tags]; rewritten at phase end
        self._extracted: dict[int, list] = {}
        self._current_shared: Optional[int] = None
        self.tag_stream_max = strategies.tag_stream_max_bytes or store.cs
        self.tag_entry_max = strategies.tag_entry_max_bytes or self.tag_stream_max // 4
        self.chain_state = State.CHAIN if ("CH" in strategies or "S" not in strategies) \
            else State.SEGMENTS

    def _event(self, *e) -> None:
        if self.audit is not None:
            self.audit(*e)

    def _new_id(self) -> int:
        sid = self.next_stream_id
        self.next_stream_id += 1
        return sid

    # -- phases -----------------------------------------------------------------------------------
    def begin(self, group: int) -> None:
        self.group = group
        self._pending = {}
        self._pending_bytes = {}
        self._extracted = {}
        self._current_shared = None

    def end(self) -> None:
        self.finalize_shared()
        self.group = None

    def group_of(self, key: bytes) -> int:
        return group_of(key, self.group_count)

    def _check_phase(self, key: bytes, h: int) -> None:
        if "C1" not in self.s:
            return
        if self.group is None:
            raise PhaseViolation("append outside a phase")
        g = (h * self.group_count) >> 64
        if g != self.group:
            raise PhaseViolation(f"key belongs to group {g}, active group is {self.group}")

    # -- append entry points -------------------------------------------------------------------------
    def append(self, key: bytes, postings, small_hint: bool = True) -> StreamDescriptor:
        """Append an ordered batch of (doc, position) postings to ``key``."""
        postings = [tuple(p) for p in postings]
        if not postings:
            desc = self.dict.get(key)
            return desc if desc is not None else StreamDescriptor()
        desc = self.dict.get(key)
        ctx = desc.last_posting if desc is not None else None
        data = encode_postings(postings, ctx)
        return self.append_encoded(key, data, len(postings), postings[0], postings[-1],
                                   small_hint, desc)

    def append_run(self, key: bytes, data: bytes, count: int, first, last,
                   small_hint: bool = True, h: Optional[int] = None) -> StreamDescriptor:
        """Append a run encoded without context (as produced by ``encode_runs``).

        Only the first posting depends on the context, so its leading varints
        are re-encoded against the key's last posting. ``h`` is the key's
        ``stable_hash`` if the caller has it.
        """
        if h is None:
            h = stable_hash(key)
        desc = self.dict.get(key, h)
        if desc is not None and desc.total_postings:
            ld, lp = desc.last_doc, desc.last_pos
            d0, p0 = int(first[0]), int(first[1])
            if (d0, p0) <= (ld, lp):
                raise OrderViolation(f"{(d0, p0)} does not follow {(ld, lp)}")
            data = _rebase_first(data, d0, p0, ld, lp)
        return self.append_encoded(key, data, count, first, last, small_hint, desc, h)

    def append_runs(self, keys, hashes: np.ndarray, blob: bytes, starts, ends, counts,
                    first_doc, first_pos, last_doc, last_pos, small) -> None:
        """``append_run`` for parallel per-key columns; key ``i`` owns ``blob[starts[i]:ends[i]]``.

        ``hashes`` is a uint64 array, the other columns are int arrays. Keys that
        are new or still plainly embedded, and whose data stays within the
        embedding threshold, are rewritten in bulk at the serialized level;
        every other key takes the general path.
        """
        n = len(keys)
        if n == 0:
            return
        if "C1" in self.s:
            if self.group is None:
                raise PhaseViolation("append outside a phase")
            G = np.uint64(self.group_count)
            hi, lo = hashes >> np.uint64(32), hashes & np.uint64(0xFFFFFFFF)
            groups = (hi * G + ((lo * G) >> np.uint64(32))) >> np.uint64(32)
            wrong = np.flatnonzero(groups != self.group)
            if len(wrong):
                raise PhaseViolation(f"key belongs to group {int(groups[wrong[0]])}, "
                                     f"active group is {self.group}")
        slow = np.ones(n, bool)
        if "EM" in self.s:
            slow = self._embed_runs(keys, hashes, blob, starts, ends, counts, first_doc,
                                    first_pos, last_doc, last_pos)
        for i in np.flatnonzero(slow).tolist():
            a, b = int(starts[i]), int(ends[i])
            self.append_run(keys[i], blob[a:b], int(counts[i]),
                            (int(first_doc[i]), int(first_pos[i])),
                            (int(last_doc[i]), int(last_pos[i])), bool(small[i]),
                            int(hashes[i]))

    def _embed_runs(self, keys, hashes, blob, starts, ends, counts, first_doc, first_pos,
                    last_doc, last_pos) -> np.ndarray:
        """Bulk path of ``append_runs``; returns the mask of rows it left for the general path."""
        em = self.s.em_threshold
        d = self.dict
        n = len(keys)
        slow = np.ones(n, bool)
        cand = np.flatnonzero(ends - starts <= em)
        if d._dirty or d._deleted:
            pending, deleted = d._dirty, d._deleted
            cand = np.array([i for i in cand.tolist()
                             if keys[i] not in pending and keys[i] not in deleted], np.int64)
        if len(cand) == 0:
            return slow
        bis = d.bucket_indices(hashes[cand])
        entries = [b.entries for b in d.buckets]
        ckeys = [keys[i] for i in cand.tolist()]
        olds = [entries[bi].get(k) for bi, k in zip(bis.tolist(), ckeys)]
        plain = np.array([o is None or o[:2] == _PLAIN_HEAD for o in olds], bool)
        cand, bis = cand[plain], bis[plain]
        ckeys = [k for k, p in zip(ckeys, plain.tolist()) if p]
        olds = [o for o, p in zip(olds, plain.tolist()) if p]
        m = len(cand)
        if m == 0:
            return slow
        is_new = np.array([o is None for o in olds], bool)
        # current fields of the embedded entries (zeros for new keys)
        old_len = np.array([0 if o is None else len(o) for o in olds], np.int64)
        old_off = np.zeros(m + 1, np.int64)
        np.cumsum(old_len, out=old_off[1:])
        old_buf = np.frombuffer(b"".join(o for o in olds if o is not None), np.uint8)
        sid = np.zeros(m, np.int64)
        total = np.zeros(m, np.int64)
        ld = np.zeros(m, np.int64)
        lp = np.zeros(m, np.int64)
        emb_start = np.zeros(m, np.int64)
        emb_end = np.zeros(m, np.int64)
        have = np.flatnonzero(~is_new)
        if len(have):
            (s_, t_, d_, p_, main, ln), ptr = read_varints(old_buf, old_off[have] + 2, 6)
            ok = (ptr + ln == old_off[have + 1]) & (main == ln)
            if not ok.all():
                raise CorruptEntry("malformed embedded descriptor")
            sid[have], total[have], ld[have], lp[have] = s_, t_, d_, p_
            emb_start[have], emb_end[have] = ptr, ptr + ln
        d0, p0 = first_doc[cand].astype(np.int64), first_pos[cand].astype(np.int64)
        bad = (total > 0) & ((d0 < ld) | ((d0 == ld) & (p0 <= lp)))
        if bad.any():
            j = int(np.flatnonzero(bad)[0])
            raise OrderViolation(f"{(int(d0[j]), int(p0[j]))} does not follow "
                                 f"{(int(ld[j]), int(lp[j]))}")
        dd = d0 - ld
        pf = np.where(dd > 0, p0, p0 - lp)
        skip = varint_lengths(d0) + varint_lengths(p0)
        run_s, run_e = starts[cand].astype(np.int64), ends[cand].astype(np.int64)
        new_len = (emb_end - emb_start) + varint_lengths(dd) + varint_lengths(pf) \
            + (run_e - run_s - skip)
        fits = new_len <= em
        keep = np.flatnonzero(fits)
        if len(keep) == 0:
            return slow
        fresh = keep[is_new[keep]]
        sid[fresh] = self.next_stream_id + np.arange(len(fresh))
        self.next_stream_id += len(fresh)
        k = len(keep)
        blob_arr = np.frombuffer(blob, np.uint8)
        raw, offs = gather_rows([
            constant_segment(_PLAIN_HEAD, k),
            varint_segment(sid[keep]),
            varint_segment(total[keep] + counts[cand][keep]),
            varint_segment(last_doc[cand][keep]),
            varint_segment(last_pos[cand][keep]),
            varint_segment(new_len[keep]),
            varint_segment(new_len[keep]),
            (old_buf, emb_start[keep], emb_end[keep]),
            varint_segment(dd[keep]),
            varint_segment(pf[keep]),
            (blob_arr, run_s[keep] + skip[keep], run_e[keep]),
        ], k)
        o = offs.tolist()
        raws = [raw[o[j]:o[j + 1]] for j in range(k)]
        kl = keep.tolist()
        d.bulk_set(bis[keep].tolist(), [ckeys[j] for j in kl], raws, [olds[j] for j in kl])
        slow[cand[keep]] = False
        return slow

    def append_encoded(self, key: bytes, data: bytes, count: int, first, last,
                       small_hint: bool = True,
                       desc: Optional[StreamDescriptor] = None,
                       h: Optional[int] = None) -> StreamDescriptor:
        """Append pre-encoded bytes (encoded against the key's last posting)."""
        if h is None:
            h = stable_hash(key)
        if desc is None:
            desc = self.dict.get(key, h)
        if desc is None:
            desc = StreamDescriptor(stream_id=self._new_id())
        elif desc.total_postings and tuple(first) <= (desc.last_doc, desc.last_pos):
            raise OrderViolation(f"{tuple(first)} does not follow "
                                 f"{(desc.last_doc, desc.last_pos)}")
        self._check_phase(key, h)
        st = desc.state
        if st == State.EMBEDDED:
            self._append_embedded(key, desc, data, small_hint)
        elif st == State.TAGGED:
            self._append_tagged(key, desc, data, count)
        elif st == State.PART:
            self._append_part(desc, data, staging=True)
        else:
            self._append_linked(desc, data, staging=True)
        desc.total_postings += count
        desc.last_doc, desc.last_pos = int(last[0]), int(last[1])
        self.dict.put(key, desc, h)
        return desc

    # -- EMBEDDED -----------------------------------------------------------------------------------------
    def _append_embedded(self, key, desc, data, small_hint) -> None:
        buf = desc.embedded + data
        if "EM" in self.s and len(buf) <= self.s.em_threshold:
            desc.embedded = buf
            desc.main_bytes = len(buf)
            return
        old = desc.state
        if ("TAG" in self.s and small_hint and self.group is not None
                and len(buf) <= self.tag_entry_max):
            self._register(key, desc, *decode_postings_array(buf), len(buf))
        else:
            self._to_clusters(desc, buf, staging=True)
        self._event("state", desc.stream_id, old, desc.state)

    def _to_clusters(self, desc, buf: bytes, staging: bool, allow_part: bool = True) -> None:
        """Place a stream's full content in cluster storage (or an SR-record)."""
        desc.clear_storage()
        if (staging and "SR" in self.s and self.sr is not None and self.group is not None
                and self.sr.admit(len(buf))):
            desc.state = self.chain_state
            desc.sr = True
            self._sr_append(desc, buf)
            return
        if allow_part and "PART" in self.s and len(buf) <= self.store.max_part_size:
            ordinal, div, index = self.store.alloc_part(len(buf))
            self.store.write_part(ordinal, index, 0, buf)
            desc.state = State.PART
            desc.part_cluster, desc.part_div, desc.part_index = ordinal, div, index
            desc.main_bytes = len(buf)
            return
        desc.state = self.chain_state
        self._main_append(desc, buf)

    # -- TAGGED -------------------------------------------------------------------------------------------
    def _shared_size(self, sh: StreamDescriptor) -> int:
        return sh.main_bytes + self._pending_bytes.get(sh.stream_id, 0)

    def _new_shared(self) -> StreamDescriptor:
        sh = StreamDescriptor(stream_id=self._new_id(), shared=True, next_tag=1)
        self.dict.put(shared_key(sh.stream_id), sh)
        self._event("shared", sh.stream_id)
        return sh

    def register_tagged(self, key: bytes, shared_id: Optional[int] = None) -> tuple[int, int]:
        """Assign ``key`` the next local tag of a shared stream; returns (stream id, tag)."""
        if shared_id is None:
            sh = self._new_shared() if self._current_shared is None \
                else self.dict.get(shared_key(self._current_shared))
        else:
            sh = self.dict.get(shared_key(shared_id))
        if sh.next_tag > MAX_TAG:
            raise TagSpaceExhausted(f"shared stream {sh.stream_id} holds {MAX_TAG} keys")
        tag = sh.next_tag
        sh.next_tag += 1
        self.dict.put(shared_key(sh.stream_id), sh)
        self._current_shared = sh.stream_id
        return sh.stream_id, tag

    def _register(self, key, desc, docs, poss, nbytes) -> None:
        sh = None
        if self._current_shared is not None:
            sh = self.dict.get(shared_key(self._current_shared))
            if (sh.next_tag > MAX_TAG
                    or self._shared_size(sh) + nbytes + len(docs) > self.tag_stream_max):
                sh = None
        if sh is None:
            sh = self._new_shared()
            self._current_shared = sh.stream_id
        sid, tag = self.register_tagged(key, sh.stream_id)
        desc.clear_storage()
        desc.state = State.TAGGED
        desc.shared_id, desc.tag = sid, tag
        self._add_pending(sid, docs, poss, tag, nbytes)

    def _add_pending(self, sid: int, docs, poss, tag: int, nbytes: int) -> None:
        self._pending.setdefault(sid, []).append((docs, poss, np.full(len(docs), tag, np.int64)))
        self._pending_bytes[sid] = self._pending_bytes.get(sid, 0) + nbytes + len(docs)

    def _pending_rows(self, sid: int) -> Optional[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Concatenate the buffered rows of a shared stream into one chunk."""
        chunks = self._pending.get(sid)
        if not chunks:
            return None
        if len(chunks) > 1:
            chunks[:] = [tuple(np.concatenate(c) for c in zip(*chunks))]
        return chunks[0]

    def _append_tagged(self, key, desc, data, count) -> None:
        sh = self.dict.get(shared_key(desc.shared_id))
        if self._shared_size(sh) + len(data) + count > self.tag_stream_max:
            old = self._extract(desc)
            self._to_clusters(desc, old + data, staging=True)
            self._event("state", desc.stream_id, State.TAGGED, desc.state)
            return
        docs, poss = decode_postings_array(data, desc.last_posting)
        self._add_pending(desc.shared_id, docs, poss, desc.tag, len(data))

    def _extract(self, desc) -> bytes:
        """Take the key's postings out of its shared stream; returns them encoded.

        The shared stream is decoded once per phase; the rows of every key
        extracted in the phase are dropped when the phase ends.
        """
        sid, tag = desc.shared_id, desc.tag
        rows = self._extracted.get(sid)
        if rows is None:
            sh = self.dict.get(shared_key(sid))
            rows = self._extracted[sid] = [*decode_tagged_array(self._main_bytes(sh)), set()]
        docs, poss, tags, gone = rows
        mine_rows = tags == tag
        mine_docs, mine_poss = docs[mine_rows], poss[mine_rows]
        gone.add(tag)
        pending = self._pending_rows(sid)
        if pending is not None:
            pd, pp, pt = pending
            hit = pt == tag
            removed = int(hit.sum())
            if removed:
                mine_docs = np.concatenate((mine_docs, pd[hit]))
                mine_poss = np.concatenate((mine_poss, pp[hit]))
                self._pending[sid] = [(pd[~hit], pp[~hit], pt[~hit])]
                self._pending_bytes[sid] = max(0, self._pending_bytes.get(sid, 0) - 3 * removed)
        # the rows leave the stream at phase end; count them as gone already
        self._pending_bytes[sid] = self._pending_bytes.get(sid, 0) - 3 * int(mine_rows.sum())
        desc.clear_storage()
        self._event("extract", desc.stream_id, sid, tag)
        if self.group is None:
            self._drop_extracted()
        return encode_postings(zip(mine_docs.tolist(), mine_poss.tolist()))

    def _drop_extracted(self) -> None:
        """Rewrite each shared stream that lost keys without their rows."""
        for sid in sorted(self._extracted):
            docs, poss, tags, gone = self._extracted[sid]
            keep = ~np.isin(tags, np.fromiter(gone, np.int64, len(gone)))
            if keep.all():
                continue
            skey = shared_key(sid)
            sh = self.dict.get(skey)
            self._free_main(sh)
            sh.clear_storage()
            sh.state = State.EMBEDDED
            sh.total_postings = int(keep.sum())
            if sh.total_postings:
                sh.last_doc, sh.last_pos = int(docs[keep][-1]), int(poss[keep][-1])
                sh.last_tag = int(tags[keep][-1])
                self._to_clusters(sh, encode_tagged_array(docs[keep], poss[keep], tags[keep]),
                                  staging=False)
            else:
                sh.last_doc = sh.last_pos = sh.last_tag = 0
            self.dict.put(skey, sh)
        self._extracted = {}

    def extract_from_tagged(self, key: bytes) -> StreamDescriptor:
        desc = self.dict.get(key)
        if desc is None or desc.state != State.TAGGED:
            raise ValueError("key is not stored in a shared stream")
        data = self._extract(desc)
        self._to_clusters(desc, data, staging=self.group is not None)
        self.dict.put(key, desc)
        return desc

    def finalize_shared(self) -> None:
        """Append the phase's buffered tagged postings to their shared streams."""
        self._drop_extracted()
        for sid in sorted(self._pending):
            pend = self._pending_rows(sid)
            if pend is None or len(pend[0]) == 0:
                continue
            order = np.lexsort((pend[2], pend[1], pend[0]))
            docs, poss, tags = (a[order] for a in pend)
            skey = shared_key(sid)
            sh = self.dict.get(skey)
            ctx = (sh.last_doc, sh.last_pos, sh.last_tag) if sh.total_postings else None
            data = encode_tagged_array(docs, poss, tags, ctx)
            if sh.state == State.EMBEDDED:
                self._to_clusters(sh, data, staging=False)
            elif sh.state == State.PART:
                self._append_part(sh, data, staging=False)
            else:
                self._main_append(sh, data)
            sh.total_postings += len(docs)
            sh.last_doc, sh.last_pos, sh.last_tag = int(docs[-1]), int(poss[-1]), int(tags[-1])
            self.dict.put(skey, sh)
        self._pending = {}
        self._pending_bytes = {}
        self._current_shared = None

    # -- PART ---------------------------------------------------------------------------------------------------
    def _append_part(self, desc, data, staging: bool) -> None:
        st = self.store
        new_len = desc.main_bytes + len(data)
        if new_len <= st.part_size(desc.part_div):
            st.write_part(desc.part_cluster, desc.part_index, desc.main_bytes, data)
            desc.main_bytes = new_len
        elif new_len <= st.max_part_size:
            ordinal, div, index = st.promote_part(desc.part_cluster, desc.part_index,
                                                  desc.main_bytes, data)
            desc.part_cluster, desc.part_div, desc.part_index = ordinal, div, index
            desc.main_bytes = new_len
            self._event("part", desc.stream_id, div)
        else:
            old = st.read_part(desc.part_cluster, desc.part_index, desc.main_bytes)
            st.free_part(desc.part_cluster, desc.part_index)
            self._to_clusters(desc, old + data, staging=staging, allow_part=False)
            self._event("state", desc.stream_id, State.PART, desc.state)

    # -- CHAIN / SEGMENTS with staging -------------------------------------------------------------------------------
    def _append_linked(self, desc, data, staging: bool) -> None:
        if desc.sr:
            self._sr_append(desc, data)
            return
        if staging and "FL" in self.s and self.store.config.fl_area_clusters:
            if desc.fl_slot < 0:
                try:
                    desc.fl_slot = self.store.fl_alloc(desc.stream_id, self.group or 0)
                    desc.fl_used = 0
                except FlAreaExhausted:
                    pass
            if desc.fl_slot >= 0:
                self._fl_append(desc, data)
                return
        self._main_append(desc, data)

    def _fl_append(self, desc, data) -> None:
        pos, n = 0, len(data)
        while pos < n:
            if desc.fl_used == self.P:
                self.flush_staging(desc)
            take = min(self.P - desc.fl_used, n - pos)
            buf = self.store.fl_buffer(desc.fl_slot)
            buf[desc.fl_used:desc.fl_used + take] = data[pos:pos + take]
            self.store.fl_touch(desc.fl_slot)
            desc.fl_used += take
            pos += take

    def _sr_append(self, desc, data) -> None:
        rec = self.sr.append(desc.stream_id, data)
        while rec.used_bytes > self.P:
            self.flush_staging(desc)

    def flush_staging(self, desc) -> StreamDescriptor:
        """Move staged bytes into main storage.

        SR: exactly one cluster payload per step while the record exceeds a
        cluster; the remainder stays staged. FL: the whole FL-cluster content.
        """
        if desc.sr and self.sr is not None and self.sr.has(desc.stream_id):
            while self.sr.records[desc.stream_id].used_bytes > self.P:
                chunk = self.sr.take(desc.stream_id, self.P)
                self._event("sr_flush", desc.stream_id, len(chunk))
                self._main_append(desc, chunk)
        elif desc.fl_slot >= 0 and desc.fl_used:
            content = bytes(self.store.fl_buffer(desc.fl_slot)[:desc.fl_used])
            desc.fl_used = 0
            self._main_append(desc, content)
        return desc

    # -- main storage ---------------------------------------------------------------------------------------------
    def _main_append(self, desc, data) -> None:
        if not data:
            return
        if desc.state == State.CHAIN:
            self._chain_append(desc, data)
        else:
            desc.state = State.SEGMENTS
            self._segments_append(desc, data)

    def _segments_append(self, desc, data) -> None:
        st, P, N, owner = self.store, self.P, self.N, desc.stream_id
        if desc.segment_count == 0:
            seg = st.alloc_segment(1)
            desc.first = desc.last = seg.ref
            desc.segment_count, desc.tail_used = 1, 0
            self._event("segment", owner, 1, "new")
        pos, n = 0, len(data)
        while pos < n:
            first, length = split_link(desc.last)
            cap = length * P
            if desc.tail_used == cap:
                if length < N and desc.segment_count == 1:
                    cur = Segment(first, length, desc.tail_used)
                    new = st.grow_segment(cur, owner)
                    desc.first = desc.last = new.ref
                    self._event("segment", owner, new.length, "grow")
                else:
                    new = st.alloc_segment(N)
                    st.set_link(first + length - 1, new.ref, owner)
                    desc.last = new.ref
                    desc.segment_count += 1
                    desc.tail_used = 0
                    self._event("segment", owner, N, "link")
                continue
            take = min(cap - desc.tail_used, n - pos)
            st.write_payload(first, desc.tail_used, data[pos:pos + take], owner)
            desc.tail_used += take
            desc.main_bytes += take
            pos += take

    def _chain_limit_for(self, first_ordinal: int) -> int:
        if "CH" not in self.s:
            return 0
        jitter = self.s.chain_limit_jitter
        if jitter:
            lo, hi = jitter
            return lo + first_ordinal % (hi - lo + 1)
        return self.s.chain_limit

    def _chain_append(self, desc, data) -> None:
        P, pos, n = self.P, 0, len(data)
        while pos < n:
            if desc.segment_count:
                first, length = split_link(desc.last)
                room = length * P - desc.tail_used
                if room:
                    take = min(room, n - pos)
                    self.store.write_payload(first, desc.tail_used, data[pos:pos + take],
                                             desc.stream_id)
                    desc.tail_used += take
                    desc.main_bytes += take
                    pos += take
                    continue
            chunk = data[pos:pos + P]
            pos += len(chunk)
            self.extend_chain(desc, chunk)
            if desc.state == State.SEGMENTS:
                self._segments_append(desc, data[pos:])
                return

    def extend_chain(self, desc, chunk: bytes) -> StreamDescriptor:
        """Add one cluster's worth of data to a full chain, merging cached tail segments."""
        st, P, owner = self.store, self.P, desc.stream_id
        selected = []
        link = desc.last
        remaining = desc.segment_count
        if "CH" in self.s:
            clusters = 0
            while remaining:
                first, length = split_link(link)
                if not st.segment_cached(first, length):
                    break
                if _pow2_at_least(clusters + length + 1) > self.N:
                    break
                back = st.get_link(first, owner)
                selected.append((first, length))
                clusters += length
                link = back
                remaining -= 1
        new_count = remaining + 1
        limit = desc.chain_limit
        if limit and new_count > limit:
            return self._convert_chain(desc, chunk)
        buffer = b"".join(st.read_payload(f, ln * P, owner) for f, ln in reversed(selected))
        payload = buffer + chunk
        seg = st.alloc_segment(_pow2_at_least(-(-len(payload) // P)))
        for f, ln in selected:
            for i in range(ln):
                st.free_cluster(f + i)
        st.write_payload(seg.first, 0, payload, owner)
        st.set_link(seg.first, link if remaining else NULL_LINK, owner)
        if desc.segment_count == 0:
            desc.chain_limit = self._chain_limit_for(seg.first)
        desc.last = seg.ref
        if remaining == 0:
            desc.first = seg.ref
        desc.segment_count = new_count
        desc.tail_used = len(payload)
        desc.main_bytes += len(chunk)
        if desc.chain_limit:
            assert desc.segment_count <= desc.chain_limit, "chain limit exceeded"
        self._event("chain", owner, desc.segment_count, desc.chain_limit, len(selected),
                    seg.length)
        if desc.sr:
            self._event("chain_cluster_full", owner, len(chunk) == P and desc.tail_used % P == 0)
        return desc

    def _convert_chain(self, desc, chunk: bytes) -> StreamDescriptor:
        """Replace a chain by freshly written segments holding all of its data."""
        st, P, N, owner = self.store, self.P, self.N, desc.stream_id
        segs = self._walk_chain(desc)
        data = b"".join(p for _, _, p in segs) + chunk
        for f, ln, _ in segs:
            for i in range(ln):
                st.free_cluster(f + i)
        clusters = -(-len(data) // P)
        if clusters <= N:
            lengths = [_pow2_at_least(clusters)]
        else:
            lengths = [N] * (-(-clusters // N))
        main = desc.main_bytes + len(chunk)
        desc.clear_storage()
        desc.state = State.SEGMENTS
        prev = None
        pos = 0
        for ln in lengths:
            seg = st.alloc_segment(ln)
            take = min(ln * P, len(data) - pos)
            st.write_payload(seg.first, 0, data[pos:pos + take], owner)
            pos += take
            if prev is None:
                desc.first = seg.ref
            else:
                st.set_link(prev.first + prev.length - 1, seg.ref, owner)
            prev = seg
            desc.tail_used = take
        desc.last = prev.ref
        desc.segment_count = len(lengths)
        desc.main_bytes = main
        assert main == len(data)
        self._event("convert", owner, tuple(lengths))
        for ln in lengths:
            self._event("segment", owner, ln, "convert")
        return desc

    # -- reading -----------------------------------------------------------------------------------------------------
    def _walk_chain(self, desc, keep: bool = False) -> list[tuple[int, int, bytes]]:
        """Segments of a chain head-to-tail, read tail-to-head (one op per segment)."""
        out = []
        link = desc.last
        for i in range(desc.segment_count):
            first, length = split_link(link)
            nbytes = desc.tail_used if i == 0 else length * self.P
            payload, link = self.store.read_segment_with_link(first, length, nbytes, 0,
                                                              desc.stream_id, keep)
            out.append((first, length, payload))
        out.reverse()
        return out

    def _walk_segments(self, desc, keep: bool = False) -> list[tuple[int, int, bytes]]:
        out = []
        link = desc.first
        for i in range(desc.segment_count):
            first, length = split_link(link)
            if i == desc.segment_count - 1:
                payload = self.store.read_payload(first, desc.tail_used, desc.stream_id, keep)
            else:
                payload, link = self.store.read_segment_with_link(
                    first, length, length * self.P, length - 1, desc.stream_id, keep)
            out.append((first, length, payload))
        return out

    def _main_bytes(self, desc) -> bytes:
        st = desc.state
        if st == State.EMBEDDED:
            return desc.embedded
        if st == State.PART:
            return self.store.read_part(desc.part_cluster, desc.part_index, desc.main_bytes)
        if st == State.CHAIN:
            return b"".join(p for _, _, p in self._walk_chain(desc))
        if st == State.SEGMENTS:
            return b"".join(p for _, _, p in self._walk_segments(desc))
        return b""

    def _free_main(self, desc) -> None:
        st = self.store
        if desc.state == State.PART:
            st.free_part(desc.part_cluster, desc.part_index)
        elif desc.state == State.CHAIN:
            for f, ln, _ in self._walk_chain(desc):
                for i in range(ln):
                    st.free_cluster(f + i)
        elif desc.state == State.SEGMENTS:
            for f, ln, _ in self._walk_segments(desc):
                st.free_segment(Segment(f, ln))

    def stream_bytes(self, key: bytes, desc: StreamDescriptor) -> bytes:
        """The stream's full encoded content: main storage, then FL or SR staging."""
        parts = [self._main_bytes(desc)]
        if desc.fl_slot >= 0 and desc.fl_used:
            parts.append(bytes(self.store.fl_buffer(desc.fl_slot)[:desc.fl_used]))
        if desc.sr and self.sr is not None:
            parts.append(self.sr.peek(desc.stream_id, self.group_of(key)))
        return b"".join(parts)

    def _tagged_projection_arrays(self, desc) -> tuple[np.ndarray, np.ndarray]:
        sh = self.dict.get(shared_key(desc.shared_id))
        docs, poss, tags = decode_tagged_array(self.stream_bytes(shared_key(desc.shared_id), sh))
        m = tags == desc.tag
        docs, poss = docs[m], poss[m]
        pending = self._pending_rows(desc.shared_id)
        if pending is not None:
            hit = pending[2] == desc.tag
            docs = np.concatenate((docs, pending[0][hit]))
            poss = np.concatenate((poss, pending[1][hit]))
        return docs, poss

    def read_all_arrays(self) -> tuple[list, np.ndarray, np.ndarray, np.ndarray]:
        """Every key with its postings, decoded in bulk: (keys, docs, positions, counts).

        Keys come in dictionary order; key ``i`` owns ``counts[i]`` consecutive rows.
        Each shared stream is decoded once for all of its tagged keys.
        """
        keys, buffers, tagged = [], [], {}
        for key, desc in self.dict.items():
            if key[0] == KeyKind.SHARED:
                continue
            if desc.state == State.TAGGED:
                tagged.setdefault(desc.shared_id, []).append((len(keys), desc.tag))
                buffers.append(b"")
            else:
                buffers.append(self.stream_bytes(key, desc))
            keys.append(key)
        docs, poss, counts = decode_postings_batch(buffers)
        if not tagged:
            return keys, docs, poss, counts
        bounds = np.cumsum(counts)[:-1]
        doc_parts, pos_parts = np.split(docs, bounds), np.split(poss, bounds)
        for sid, members in tagged.items():
            sk = shared_key(sid)
            sdocs, sposs, stags = decode_tagged_array(self.stream_bytes(sk, self.dict.get(sk)))
            pending = self._pending_rows(sid)
            if pending is not None:
                sdocs = np.concatenate((sdocs, pending[0]))
                sposs = np.concatenate((sposs, pending[1]))
                stags = np.concatenate((stags, pending[2]))
            for i, tag in members:
                m = stags == tag
                doc_parts[i], pos_parts[i] = sdocs[m], sposs[m]
                counts[i] = int(m.sum())
        return keys, np.concatenate(doc_parts), np.concatenate(pos_parts), counts

    def read_stream(self, key: bytes, desc: Optional[StreamDescriptor] = None) -> list[Posting]:
        """Posting list of ``key``; pass ``desc`` when the descriptor is already at hand."""
        desc = desc or self.dict.get(key)
        if desc is None:
            return []
        if desc.state == State.TAGGED:
            docs, poss = self._tagged_projection_arrays(desc)
            return [Posting(d, p) for d, p in zip(docs.tolist(), poss.tolist())]
        return decode_postings(self.stream_bytes(key, desc))

    def read_stream_arrays(self, key: bytes) -> tuple[np.ndarray, np.ndarray]:
        desc = self.dict.get(key)
        if desc is None:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        if desc.state == State.TAGGED:
            return self._tagged_projection_arrays(desc)
        return decode_postings_array(self.stream_bytes(key, desc))

    # -- structure walk for verification -----------------------------------------------------------------------
    def owned_clusters(self, desc) -> list[int]:
        if desc.state == State.CHAIN:
            segs = self._walk_chain(desc)
        elif desc.state == State.SEGMENTS:
            segs = self._walk_segments(desc)
        else:
            return []
        return [f + i for f, ln, _ in segs for i in range(ln)]

    def segment_lengths(self, desc) -> list[int]:
        if desc.state == State.CHAIN:
            return [ln for _, ln, _ in self._walk_chain(desc)]
        if desc.state == State.SEGMENTS:
            return [ln for _, ln, _ in self._walk_segments(desc)]
        return []
