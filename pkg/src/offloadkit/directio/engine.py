"""Key-addressed tensor store striped across direct-I/O devices.

Each tensor key owns one extent per device. On first write the padded
payload is split into equal page-granular portions, one per device, and
each portion is claimed by advancing that device's cursor. Later writes of
the same or a smaller size reuse the extents. Transfers are cut into
per-worker chunks and submitted through the native AIO interface.
"""

from __future__ import annotations

import contextlib
import fcntl
import json
import mmap
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from ..errors import (
    AlignmentError,
    DeviceError,
    InvalidArgument,
    InvariantViolation,
    KeyBusy,
    SizeViolation,
    StorageFull,
    TensorNotFound,
)
from ..metrics import sink
from ..pinned import PinnedRegion
from .aio import IoRequest, KernelAio, open_backend
from .devices import ALIGN, DeviceSet
from .manifest import read_manifest, write_manifest

WORKERS_ENV = "OFFLOADKIT_WORKERS"


def pad(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def equal_split(padded: int, devices: int) -> list[int]:
    """Bytes per device; portions differ by at most one page, leftovers go first."""
    units = padded // ALIGN
    base, rem = divmod(units, devices)
    return [(base + (i < rem)) * ALIGN for i in range(devices)]


@dataclass(frozen=True)
class Extent:
    device: int
    offset: int
    length: int
    logical_length: int = 0

    @property
    def end(self) -> int:
        return self.offset + self.length


@dataclass
class TensorRecord:
    logical_length: int
    extents: list[Extent]  # as allocated

    @property
    def allocated_bytes(self) -> int:
        return sum(e.length for e in self.extents)


@dataclass
class EngineStats:
    writes: int = 0
    reads: int = 0
    logical_bytes_written: int = 0
    padded_bytes_written: int = 0
    logical_bytes_read: int = 0
    padded_bytes_read: int = 0
    io_requests: int = 0
    allocations: int = 0
    extent_reuses: int = 0
    abandoned_bytes: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class SharedCursor:
    """Per-device next-free offsets, advanced atomically.

    With ``path`` set the cursors also live in a small JSON file guarded by
    an advisory lock, so several processes can allocate from the same
    devices without overlap.
    """

    def __init__(self, capacities: list[int], initial: list[int] | None = None, path: str | None = None):
        self.capacities = list(capacities)
        self._pos = list(initial) if initial is not None else [0] * len(capacities)
        if len(self._pos) != len(self.capacities):
            raise InvalidArgument("cursor count does not match device count")
        self._lock = threading.Lock()
        self.path = path
        if path is not None:
            Path(path).touch(exist_ok=True)

    def positions(self) -> list[int]:
        with self._lock:
            if self.path is None:
                return list(self._pos)
            with self._file_locked() as f:
                return self._merge(f)

    @contextlib.contextmanager
    def _file_locked(self):
        with open(self.path, "r+") as f:
            fcntl.flock(f, fcntl.LOCK_EX)
            try:
                yield f
            finally:
                fcntl.flock(f, fcntl.LOCK_UN)

    def _merge(self, f) -> list[int]:
        f.seek(0)
        raw = f.read()
        shared = json.loads(raw)["cursors"] if raw.strip() else [0] * len(self._pos)
        self._pos = [max(a, b) for a, b in zip(self._pos, shared)]
        return list(self._pos)

    def claim(self, portions: list[int]) -> list[int]:
        """Reserve ``portions[d]`` bytes on each device; returns start offsets.

        All-or-nothing: if any device lacks room nothing is claimed.
        """
        with self._lock:
            if self.path is None:
                return self._claim_local(portions)
            with self._file_locked() as f:
                self._merge(f)
                starts = self._claim_local(portions)
                f.seek(0)
                f.truncate()
                json.dump({"cursors": self._pos}, f)
                f.flush()
                return starts

    def _claim_local(self, portions: list[int]) -> list[int]:
        for d, n in enumerate(portions):
            if self._pos[d] + n > self.capacities[d]:
                raise StorageFull(
                    f"device {d}: need {n} B at offset {self._pos[d]}, capacity {self.capacities[d]}"
                )
        starts = list(self._pos)
        for d, n in enumerate(portions):
            self._pos[d] += n
        return starts


def _aligned_scratch(nbytes: int) -> np.ndarray:
    return np.frombuffer(mmap.mmap(-1, pad(max(nbytes, 1))), dtype=np.uint8)


def _buffer_of(buf) -> np.ndarray:
    if isinstance(buf, PinnedRegion):
        return buf.bytes_view()
    arr = np.asarray(buf) if not isinstance(buf, np.ndarray) else buf
    if not arr.flags.c_contiguous:
        raise AlignmentError("buffer must be contiguous")
    return arr.reshape(-1).view(np.uint8)


class DirectEngine:
    """Direct-I/O tensor store over a :class:`DeviceSet`.

    Parameters
    ----------
    devset
        Open devices. The engine does not take ownership.
    workers
        Chunks per extent, and size of the submission thread pool.
    queue_depth
        Requests kept in flight per worker.
    max_request_bytes
        Chunks larger than this are split into several requests.
    min_chunk_bytes
        Floor on the per-worker chunk so small tensors are not shredded.
    manifest_path
        If given and the file exists, the location table and cursors are
        restored from it; :meth:`flush` and :meth:`close` persist to it.
    cursor_path
        Enables the cross-process cursor file.
    backend
        ``auto`` (native AIO when available), ``aio`` or ``sync``.
    trace
        Record every submitted request as ``(device, offset, length, address)``.
    """

    def __init__(
        self,
        devset: DeviceSet,
        workers: int | None = None,
        queue_depth: int = 8,
        manifest_path: str | os.PathLike | None = None,
        cursor_path: str | None = None,
        backend: str = "auto",
        trace: bool = False,
        persist_every_write: bool = False,
        max_request_bytes: int = 1 << 20,
        min_chunk_bytes: int = 64 << 10,
    ):
        if workers is None:
            workers = int(os.environ.get(WORKERS_ENV, "4"))
        if workers < 1:
            raise InvalidArgument("workers must be >= 1")
        if queue_depth < 1:
            raise InvalidArgument("queue_depth must be >= 1")
        if not devset.fds:
            raise DeviceError("device set is closed")
        self.devset = devset
        self.workers = workers
        self.queue_depth = queue_depth
        if max_request_bytes < ALIGN or max_request_bytes % ALIGN:
            raise InvalidArgument(f"max_request_bytes must be a positive multiple of {ALIGN}")
        self.max_request_bytes = max_request_bytes
        self.min_chunk_bytes = pad(max(min_chunk_bytes, ALIGN))
        self.manifest_path = Path(manifest_path) if manifest_path is not None else None
        self.persist_every_write = persist_every_write
        self.backend = open_backend(backend, queue_depth)
        self.trace: list[tuple[int, int, int, int]] | None = [] if trace else None
        self.stats = EngineStats()
        self._table: dict[str, TensorRecord] = {}
        self._table_lock = threading.Lock()
        self._busy: set[str] = set()
        self._high_water = [0] * len(devset)
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="dio") if workers > 1 else None
        initial = None
        if self.manifest_path is not None and self.manifest_path.exists():
            initial = self._load_manifest(read_manifest(self.manifest_path))
        self.cursor = SharedCursor([d.capacity_bytes for d in devset.devices], initial, cursor_path)
        self._closed = False

    # -- table ------------------------------------------------------------------

    def _load_manifest(self, doc: dict) -> list[int]:
        paths = [d["path"] for d in doc["devices"]]
        if paths != [d.path for d in self.devset.devices]:
            raise InvalidArgument(f"manifest devices {paths} do not match the open device set")
        for key, rec in doc["tensors"].items():
            exts = [Extent(e["device"], e["offset"], e["length"]) for e in rec["extents"]]
            self._table[key] = TensorRecord(rec["logical_length"], exts)
            for e in exts:
                self._high_water[e.device] = max(self._high_water[e.device], e.end)
        self.stats.abandoned_bytes = doc.get("abandoned_bytes", 0)
        return list(doc["cursors"])

    def manifest_doc(self) -> dict:
        with self._table_lock:
            tensors = {
                k: {
                    "logical_length": r.logical_length,
                    "extents": [{"device": e.device, "offset": e.offset, "length": e.length} for e in r.extents],
                }
                for k, r in sorted(self._table.items())
            }
        return {
            "devices": self.devset.describe(),
            "cursors": self.cursor.positions(),
            "abandoned_bytes": self.stats.abandoned_bytes,
            "tensors": tensors,
        }

    def flush(self) -> None:
        if self.manifest_path is not None:
            write_manifest(self.manifest_path, self.manifest_doc())

    def keys(self) -> list[str]:
        with self._table_lock:
            return list(self._table)

    def __contains__(self, key: str) -> bool:
        with self._table_lock:
            return key in self._table

    def lookup(self, key: str) -> list[Extent]:
        """Active extents for ``key`` with per-extent logical lengths."""
        with self._table_lock:
            rec = self._table.get(key)
            if rec is None:
                raise TensorNotFound(f"no tensor stored under {key!r}")
            return self._active(rec, rec.logical_length)

    def _active(self, rec: TensorRecord, logical: int) -> list[Extent]:
        split = equal_split(pad(logical), len(self.devset))
        out = []
        remaining = logical
        for e in rec.extents:
            n = split[e.device]
            if n == 0:
                continue
            lg = min(n, remaining)
            remaining -= lg
            out.append(Extent(e.device, e.offset, n, lg))
        return out

    @property
    def capacity_bytes(self) -> int:
        return self.devset.total_capacity

    # -- allocation -------------------------------------------------------------

    def allocate_extents(self, key: str, logical_bytes: int) -> list[Extent]:
        """Extents for ``key``, claiming device space only when needed."""
        if logical_bytes <= 0:
            raise InvalidArgument(f"{key}: logical size must be > 0")
        padded = pad(logical_bytes)
        with self._table_lock:
            rec = self._table.get(key)
            if rec is not None and padded <= rec.allocated_bytes and self._fits(rec, padded):
                rec.logical_length = logical_bytes
                self.stats.extent_reuses += 1
                return self._active(rec, logical_bytes)
            split = equal_split(padded, len(self.devset))
            starts = self.cursor.claim(split)
            exts = []
            for d, (start, n) in enumerate(zip(starts, split)):
                if n == 0:
                    continue
                if start < self._high_water[d]:
                    raise InvariantViolation(
                        f"device {d}: claim at {start} overlaps allocated space ending at {self._high_water[d]}"
                    )
                self._high_water[d] = start + n
                exts.append(Extent(d, start, n))
            if rec is not None:
                self.stats.abandoned_bytes += rec.allocated_bytes
            new = TensorRecord(logical_bytes, exts)
            self._table[key] = new
            self.stats.allocations += 1
            sink.incr("directio.allocations")
            return self._active(new, logical_bytes)

    def _fits(self, rec: TensorRecord, padded: int) -> bool:
        split = equal_split(padded, len(self.devset))
        have = {e.device: e.length for e in rec.extents}
        return all(n == 0 or have.get(d, 0) >= n for d, n in enumerate(split))

    # -- transfers --------------------------------------------------------------

    @contextlib.contextmanager
    def _guard(self, key: str) -> Iterator[None]:
        with self._table_lock:
            if key in self._busy:
                raise KeyBusy(f"another operation on {key!r} is in progress")
            self._busy.add(key)
        try:
            yield
        finally:
            with self._table_lock:
                self._busy.discard(key)

    def write_tensor(self, key: str, src, logical_length: int | None = None) -> int:
        """Store ``src[:logical_length]`` under ``key``. Returns padded bytes written."""
        self._check_open()
        buf = _buffer_of(src)
        n = buf.size if logical_length is None else logical_length
        if n <= 0:
            raise InvalidArgument(f"{key}: empty payload")
        if n > buf.size:
            raise SizeViolation(f"{key}: logical length {n} exceeds buffer of {buf.size} B")
        with self._guard(key):
            exts = self.allocate_extents(key, n)
            padded = self._transfer(exts, buf, n, write=True)
        with self._table_lock:
            self.stats.writes += 1
            self.stats.logical_bytes_written += n
            self.stats.padded_bytes_written += padded
        sink.incr("directio.bytes_written", padded)
        if self.persist_every_write:
            self.flush()
        return padded

    def read_tensor(self, key: str, dst) -> int:
        """Fill ``dst[:logical_length]`` with the stored payload. Returns logical length."""
        self._check_open()
        buf = _buffer_of(dst)
        with self._guard(key):
            exts = self.lookup(key)
            n = sum(e.logical_length for e in exts)
            if buf.size < n:
                raise SizeViolation(f"{key}: destination holds {buf.size} B, tensor has {n} B")
            padded = self._transfer(exts, buf, n, write=False)
        with self._table_lock:
            self.stats.reads += 1
            self.stats.logical_bytes_read += n
            self.stats.padded_bytes_read += padded
        sink.incr("directio.bytes_read", padded)
        return n

    def _transfer(self, exts: list[Extent], buf: np.ndarray, logical: int, write: bool) -> int:
        addr = buf.ctypes.data
        if addr % ALIGN:
            raise AlignmentError(f"buffer address {addr:#x} is not {ALIGN}-aligned")
        padded = sum(e.length for e in exts)
        # bytes of the caller's buffer usable for direct transfers
        direct_end = min(padded, buf.size - buf.size % ALIGN)
        bounce = None
        bounce_addr = 0
        if direct_end < padded:
            bounce = _aligned_scratch(padded - direct_end)
            bounce_addr = bounce.ctypes.data
            if write:
                tail = buf[direct_end:logical]
                bounce[: tail.size] = tail
        jobs: list[list[IoRequest]] = []
        pos = 0
        for e in exts:
            fd = self.devset.fds[e.device]
            chunk = max(pad(-(-e.length // self.workers)), self.min_chunk_bytes)
            for c0 in range(0, e.length, chunk):
                clen = min(chunk, e.length - c0)
                # split only chunks larger than one request; queue depth bounds in-flight requests
                sub = min(clen, self.max_request_bytes)
                reqs = []
                for s0 in range(0, clen, sub):
                    slen = min(sub, clen - s0)
                    lpos = pos + c0 + s0
                    dev_off = e.offset + c0 + s0
                    # requests straddling the end of the caller's buffer are split
                    if lpos < direct_end:
                        dlen = min(slen, direct_end - lpos)
                        reqs.append(IoRequest(fd, e.device, dev_off, addr + lpos, dlen, write))
                        lpos += dlen
                        dev_off += dlen
                        slen -= dlen
                    if slen:
                        reqs.append(
                            IoRequest(fd, e.device, dev_off, bounce_addr + (lpos - direct_end), slen, write)
                        )
                jobs.append(reqs)
            pos += e.length
        if self.trace is not None:
            with self._table_lock:
                self.trace.extend((r.device, r.offset, r.nbytes, r.address) for j in jobs for r in j)
        self._run_jobs(jobs)
        if bounce is not None and not write:
            tail = logical - direct_end
            if tail > 0:
                buf[direct_end:logical] = bounce[:tail]
        with self._table_lock:
            self.stats.io_requests += sum(len(j) for j in jobs)
        return padded

    def _run_jobs(self, jobs: list[list[IoRequest]]) -> None:
        if len(jobs) == 1 or self._pool is None:
            for j in jobs:
                self.backend.run(j)
            return
        if isinstance(self.backend, KernelAio) and sum(len(j) for j in jobs) <= self.queue_depth:
            # everything fits in one submission queue; the kernel runs the
            # requests concurrently and a thread hop would only add latency
            self.backend.run([r for j in jobs for r in j])
            return
        futs = [self._pool.submit(self.backend.run, j) for j in jobs[1:]]
        errors = []
        try:
            self.backend.run(jobs[0])
        except Exception as e:
            errors.append(e)
        for f in futs:
            try:
                f.result()
            except Exception as e:
                errors.append(e)
        if errors:
            raise errors[0]

    # -- lifecycle --------------------------------------------------------------

    def _check_open(self):
        if self._closed:
            raise DeviceError("engine is closed")

    def close(self) -> None:
        if self._closed:
            return
        self.flush()
        self._closed = True
        if self._pool is not None:
            self._pool.shutdown(wait=True)
        self.backend.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open_engine(devset: DeviceSet, workers: int | None = None, queue_depth: int = 8, **kwargs) -> DirectEngine:
    return DirectEngine(devset, workers, queue_depth, **kwargs)
