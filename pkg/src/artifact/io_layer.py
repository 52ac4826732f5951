"""Physical file access, small-write packing (DS) and the I/O ledger.

Every byte the engine moves goes through :class:`IoStore`. A read or write
operation is one contiguous physical request; that is the unit counted by
:class:`IoLedger`.

With packing enabled, writes no larger than ``small_threshold`` are appended
to an in-memory pack buffer instead of going to their home file. The buffer
is written to ``<name>.pack`` as a single operation when it fills up or on
:meth:`IoStore.commit`, and an extent map remembers where each packed logical
range now lives. The map is persisted as an append-only log in
``<name>.dsmap``.
"""
from __future__ import annotations

import os
import struct
from bisect import bisect_right
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

MAX_ADDRESS = 1 << 62
DSMAP_RECORD = struct.Struct("<HQIQ")
TOMBSTONE = (1 << 64) - 1
PACK_FILE = 0xFFFF


class IoFailure(OSError):
    pass


class AddressOverflow(ValueError):
    pass


class UnmappedRange(LookupError):
    pass


@dataclass
class IoLedger:
    bytes_read: int = 0
    bytes_written: int = 0
    read_ops: int = 0
    write_ops: int = 0

    @property
    def total_ops(self) -> int:
        return self.read_ops + self.write_ops

    @property
    def total_bytes(self) -> int:
        return self.bytes_read + self.bytes_written

    def copy(self) -> "IoLedger":
        return IoLedger(**asdict(self))

    def __add__(self, other: "IoLedger") -> "IoLedger":
        return IoLedger(self.bytes_read + other.bytes_read,
                        self.bytes_written + other.bytes_written,
                        self.read_ops + other.read_ops,
                        self.write_ops + other.write_ops)

    def __sub__(self, other: "IoLedger") -> "IoLedger":
        return IoLedger(self.bytes_read - other.bytes_read,
                        self.bytes_written - other.bytes_written,
                        self.read_ops - other.read_ops,
                        self.write_ops - other.write_ops)

    def dominates(self, other: "IoLedger") -> bool:
        return (self.bytes_read >= other.bytes_read and self.bytes_written >= other.bytes_written
                and self.read_ops >= other.read_ops and self.write_ops >= other.write_ops)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DsConfig:
    enabled: bool = False
    small_threshold: int = 32768
    pack_capacity: int = 1 << 20

    def __post_init__(self):
        if self.small_threshold <= 0:
            raise ValueError("ds.small_threshold must be positive")
        if self.pack_capacity < self.small_threshold:
            raise ValueError("ds.pack_capacity must be >= ds.small_threshold")


class ExtentMap:
    """Sorted, non-overlapping logical extents of one file mapped into the pack file."""

    def __init__(self):
        self.starts: list[int] = []
        self.ends: list[int] = []
        self.phys: list[int] = []

    def __len__(self):
        return len(self.starts)

    def assign(self, start: int, length: int, phys: Optional[int]) -> bool:
        """Map [start, start+length) to ``phys`` (None: back to the home file).

        Returns True when an existing extent was overwritten or trimmed.
        """
        end = start + length
        starts, ends = self.starts, self.ends
        i = bisect_right(starts, start) - 1
        if i < 0 or ends[i] <= start:
            i += 1
        j = i
        while j < len(starts) and starts[j] < end:
            j += 1
        new_s, new_e, new_p = [], [], []
        if i < j:
            if starts[i] < start:
                new_s.append(starts[i]); new_e.append(start); new_p.append(self.phys[i])
        if phys is not None:
            new_s.append(start); new_e.append(end); new_p.append(phys)
        if i < j and ends[j - 1] > end:
            last = j - 1
            new_s.append(end); new_e.append(ends[last])
            new_p.append(self.phys[last] + (end - starts[last]))
        starts[i:j] = new_s
        ends[i:j] = new_e
        self.phys[i:j] = new_p
        return i < j

    def lookup(self, start: int, length: int) -> list[tuple[int, int, Optional[int]]]:
        """Split [start, start+length) into (offset, length, phys-or-None) pieces."""
        end = start + length
        out = []
        starts, ends = self.starts, self.ends
        i = bisect_right(starts, start) - 1
        if i < 0 or ends[i] <= start:
            i += 1
        cur = start
        while cur < end:
            if i < len(starts) and starts[i] <= cur:
                stop = min(ends[i], end)
                out.append((cur, stop - cur, self.phys[i] + (cur - starts[i])))
                cur = stop
                i += 1
            else:
                stop = min(starts[i], end) if i < len(starts) else end
                out.append((cur, stop - cur, None))
                cur = stop
        return out

    def items(self):
        return zip(self.starts, self.ends, self.phys)


class IoStore:
    """All files of one index, with packing and ledger accounting."""

    def __init__(self, directory, name: str, ds: Optional[DsConfig] = None):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.name = name
        self.ds = ds or DsConfig()
        self.ledger = IoLedger()
        self.read_ops_by_file: dict[int, int] = {}
        self._fds: dict[int, int] = {}
        self._suffix: dict[int, str] = {}
        self._maps: dict[int, ExtentMap] = {}
        self._pending_log: list[tuple] = []
        self._log_records = 0
        self._buffer = bytearray()
        self.register_file(0, ".dat")
        self._pack_fd = self._open(".pack")
        self._pack_len = os.fstat(self._pack_fd).st_size
        self._dsmap_path = self.path(".dsmap")
        self._load_dsmap()

    # -- files ---------------------------------------------------------------
    def path(self, suffix: str) -> Path:
        return self.dir / f"{self.name}{suffix}"

    def _open(self, suffix: str) -> int:
        try:
            return os.open(self.path(suffix), os.O_RDWR | os.O_CREAT, 0o644)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    def register_file(self, fid: int, suffix: str) -> None:
        if fid in self._fds:
            return
        self._fds[fid] = self._open(suffix)
        self._suffix[fid] = suffix
        self._maps.setdefault(fid, ExtentMap())

    def file_size(self, fid: int) -> int:
        return os.fstat(self._fds[fid]).st_size

    def reserve(self, fid: int, size: int) -> None:
        """Grow a home file to ``size`` bytes without any I/O operation (sparse)."""
        if self.file_size(fid) < size:
            os.ftruncate(self._fds[fid], size)

    def extent_map(self, fid: int) -> ExtentMap:
        return self._maps[fid]

    # -- dsmap persistence ------------------------------------------------------
    def _load_dsmap(self) -> None:
        if not self._dsmap_path.exists():
            return
        raw = self._dsmap_path.read_bytes()
        if raw:
            self.ledger.read_ops += 1
            self.ledger.bytes_read += len(raw)
        if len(raw) % DSMAP_RECORD.size:
            raise IoFailure("dsmap file has a partial record")
        for fid, loff, length, phys in DSMAP_RECORD.iter_unpack(raw):
            emap = self._maps.setdefault(fid, ExtentMap())
            emap.assign(loff, length, None if phys == TOMBSTONE else phys)
            self._log_records += 1

    def _persist_dsmap(self) -> None:
        live = sum(len(m) for m in self._maps.values())
        if not self._pending_log and not (self._log_records > 4 * live + 4096):
            return
        if self._log_records + len(self._pending_log) > 4 * live + 4096:
            recs = [(fid, s, e - s, p) for fid, m in sorted(self._maps.items())
                    for s, e, p in m.items()]
            payload = b"".join(DSMAP_RECORD.pack(*r) for r in recs)
            mode = "wb"
            self._log_records = len(recs)
        else:
            payload = b"".join(DSMAP_RECORD.pack(*r) for r in self._pending_log)
            mode = "ab"
            self._log_records += len(self._pending_log)
        self._pending_log.clear()
        try:
            with open(self._dsmap_path, mode) as f:
                f.write(payload)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        self.ledger.write_ops += 1
        self.ledger.bytes_written += len(payload)

    # -- physical primitives ------------------------------------------------------
    def _pwrite(self, fd: int, data, offset: int) -> None:
        try:
            n = os.pwrite(fd, data, offset)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        assert n == len(data)
        self.ledger.write_ops += 1
        self.ledger.bytes_written += n

    def _pread(self, fd: int, length: int, offset: int, fid: int = -1) -> bytes:
        try:
            data = os.pread(fd, length, offset)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        if len(data) != length:
            raise UnmappedRange(f"short read at {offset}: wanted {length}, got {len(data)}")
        self.ledger.read_ops += 1
        self.ledger.bytes_read += length
        self.read_ops_by_file[fid] = self.read_ops_by_file.get(fid, 0) + 1
        return data

    def _flush_pack(self) -> None:
        if not self._buffer:
            return
        self._pwrite(self._pack_fd, self._buffer, self._pack_len)
        self._pack_len += len(self._buffer)
        self._buffer = bytearray()

    # -- public API -----------------------------------------------------------------
    def write(self, fid: int, offset: int, data) -> None:
        n = len(data)
        if offset < 0 or offset + n > MAX_ADDRESS:
            raise AddressOverflow(f"write at {offset}+{n}")
        if fid not in self._fds:
            raise IoFailure(f"unknown file id {fid}")
        if n == 0:
            return
        emap = self._maps[fid]
        if self.ds.enabled and n <= self.ds.small_threshold:
            if len(self._buffer) + n > self.ds.pack_capacity:
                self._flush_pack()
            phys = self._pack_len + len(self._buffer)
            self._buffer += data
            emap.assign(offset, n, phys)
            self._pending_log.append((fid, offset, n, phys))
            if len(self._buffer) >= self.ds.pack_capacity:
                self._flush_pack()
            return
        self._pwrite(self._fds[fid], data, offset)
        if emap.starts and emap.assign(offset, n, None):
            self._pending_log.append((fid, offset, n, TOMBSTONE))

    def read(self, fid: int, offset: int, length: int) -> bytes:
        if offset < 0 or offset + length > MAX_ADDRESS:
            raise AddressOverflow(f"read at {offset}+{length}")
        if fid not in self._fds:
            raise IoFailure(f"unknown file id {fid}")
        if length == 0:
            return b""
        emap = self._maps[fid]
        if not emap.starts:
            return self._pread(self._fds[fid], length, offset, fid)
        # requests: [fd, phys_offset, length] or bytes served from memory
        requests: list = []
        for loff, n, phys in emap.lookup(offset, length):
            if phys is None:
                fd, poff = self._fds[fid], loff
            elif phys >= self._pack_len:
                b = phys - self._pack_len
                requests.append(bytes(self._buffer[b:b + n]))
                continue
            else:
                fd, poff = self._pack_fd, phys
            last = requests[-1] if requests else None
            if isinstance(last, list) and last[0] == fd and last[1] + last[2] == poff:
                last[2] += n
            else:
                requests.append([fd, poff, n])
        parts = [r if isinstance(r, bytes) else self._pread(r[0], r[2], r[1], fid)
                 for r in requests]
        return b"".join(parts)

    def commit(self) -> None:
        self._flush_pack()
        self._persist_dsmap()

    def snapshot_ledger(self) -> IoLedger:
        return self.ledger.copy()

    def close(self) -> None:
        for fd in list(self._fds.values()) + [self._pack_fd]:
            try:
                os.close(fd)
            except OSError:
                pass
        self._fds.clear()

    @property
    def pending_bytes(self) -> int:
        return len(self._buffer)
