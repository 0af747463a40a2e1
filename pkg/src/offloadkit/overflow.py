"""Gradient overflow detection over the fp32 flat buffer.

The fused check reads every element's bit pattern once and flags a
non-finite value when its exponent field is all ones. It allocates
nothing proportional to the buffer and splits the work into chunks across
a thread pool; with early exit the workers stop at the next chunk boundary
after any worker finds a hit.

The naive pipeline reproduces the tensor-library idiom (abs copy, isinf,
any, isnan, any) and meters the temporaries it creates, to show the
transient memory it costs.
"""

from __future__ import annotations

import os
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .errors import InvalidArgument
from .pinned import AllocationPolicy, PinnedAllocator, PinnedRegion, default_allocator

# Exponent bits of an IEEE-754 binary32. Also known as the all-ones exponent mask.
EXP_MASK = np.uint32(0x7F800000)
EXP_ALL_ONES_MASK = EXP_MASK

WORKERS_ENV = "OFFLOADKIT_WORKERS"
DEFAULT_CHUNK_BYTES = 1 << 20
_BLOCK = 512


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        return max(1, int(raw))
    return max(1, os.cpu_count() or 1)


@dataclass(frozen=True)
class ScanConfig:
    worker_count: int = field(default_factory=default_workers)
    chunk_bytes: int = DEFAULT_CHUNK_BYTES
    early_exit: bool = True
    debug: bool = False  # report first_offending_index

    def __post_init__(self):
        if self.worker_count < 1:
            raise InvalidArgument("worker_count must be >= 1")
        if self.chunk_bytes < 4 or self.chunk_bytes % 4:
            raise InvalidArgument("chunk_bytes must be a positive multiple of 4")

    @property
    def chunk_elems(self) -> int:
        return self.chunk_bytes // 4


@dataclass(frozen=True)
class OverflowResult:
    overflow: bool
    first_offending_index: int | None = None


class GradFlatBuffer:
    """Contiguous fp32 gradient buffer backed by a pinned region."""

    def __init__(self, n_elems: int, allocator: PinnedAllocator | None = None, policy: AllocationPolicy | None = None):
        if n_elems < 1:
            raise InvalidArgument("flat buffer needs at least one element")
        self.n_elems = n_elems
        self._allocator = allocator or default_allocator
        self.backing: PinnedRegion = self._allocator.allocate(4 * n_elems, policy)
        self.values = self.backing.as_array(np.float32, n_elems)

    @classmethod
    def from_array(cls, values, allocator: PinnedAllocator | None = None) -> "GradFlatBuffer":
        arr = np.ascontiguousarray(values, dtype=np.float32).ravel()
        buf = cls(arr.size, allocator)
        buf.values[:] = arr
        return buf

    @property
    def nbytes(self) -> int:
        return 4 * self.n_elems

    @property
    def bits(self) -> np.ndarray:
        return self.values.view(np.uint32)

    def zero_(self) -> None:
        self.values.fill(0)

    def release(self) -> None:
        self.values = None
        self._allocator.release(self.backing)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()


@numba.njit(nogil=True, cache=True, boundscheck=False)
def _scan_range(bits, start, stop):
    """Index of the first element in [start, stop) with an all-ones exponent, else -1."""
    mask = np.uint32(0x7F800000)
    i = start
    while i < stop:
        end = min(i + _BLOCK, stop)
        hits = 0
        # branch-free block reduction so the loop vectorizes
        for j in range(i, end):
            hits += (bits[j] & mask) == mask
        if hits:
            for j in range(i, end):
                if (bits[j] & mask) == mask:
                    return j
        i = end
    return -1


_executors: dict[int, ThreadPoolExecutor] = {}
_executors_lock = threading.Lock()


def _executor(workers: int) -> ThreadPoolExecutor:
    with _executors_lock:
        ex = _executors.get(workers)
        if ex is None:
            ex = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="ovf-scan")
            _executors[workers] = ex
        return ex


def _as_bits(buf) -> np.ndarray:
    if isinstance(buf, GradFlatBuffer):
        return buf.bits
    arr = np.asarray(buf)
    if arr.dtype != np.float32 and arr.dtype != np.uint32:
        raise InvalidArgument(f"overflow scan expects fp32 data, got {arr.dtype}")
    if not arr.flags.c_contiguous:
        raise InvalidArgument("overflow scan expects a contiguous buffer")
    return arr.reshape(-1).view(np.uint32)


def _worker(bits, w, workers, chunk, n, stop, early_exit):
    best = -1
    for c0 in range(w * chunk, n, workers * chunk):
        if early_exit and stop.is_set():
            break
        idx = _scan_range(bits, c0, min(c0 + chunk, n))
        if idx >= 0:
            if best < 0:
                best = idx
            if early_exit:
                stop.set()
                break
    return best


def fused_overflow_check(buf, cfg: ScanConfig | None = None) -> OverflowResult:
    """Flag any +inf, -inf or NaN in a fp32 buffer with one bitwise pass."""
    cfg = cfg or ScanConfig()
    bits = _as_bits(buf)
    n = bits.size
    chunk = cfg.chunk_elems
    workers = min(cfg.worker_count, max(1, -(-n // chunk)))
    stop = threading.Event()
    if workers == 1:
        found = [_worker(bits, 0, 1, chunk, n, stop, cfg.early_exit)]
    else:
        ex = _executor(workers)
        futs = [ex.submit(_worker, bits, w, workers, chunk, n, stop, cfg.early_exit) for w in range(1, workers)]
        # the caller scans its own share instead of idling
        found = [_worker(bits, 0, workers, chunk, n, stop, cfg.early_exit)]
        found += [f.result() for f in futs]
    hits = [i for i in found if i >= 0]
    if not hits:
        return OverflowResult(False)
    return OverflowResult(True, min(hits) if cfg.debug else None)


# -- naive reference ------------------------------------------------------------


class AllocationMeter:
    """Tracks bytes of live temporaries and their high-water mark."""

    def __init__(self):
        self.current = 0
        self.peak = 0
        self.stage_peaks: dict[str, int] = {}
        self._stage: str | None = None

    def stage(self, name: str) -> None:
        self._stage = name
        self.stage_peaks.setdefault(name, self.current)

    def alloc(self, arr: np.ndarray) -> np.ndarray:
        self.current += arr.nbytes
        self.peak = max(self.peak, self.current)
        if self._stage is not None:
            self.stage_peaks[self._stage] = max(self.stage_peaks[self._stage], self.current)
        return arr

    def free(self, arr: np.ndarray) -> None:
        self.current -= arr.nbytes


def naive_overflow_check(buf, meter: AllocationMeter | None = None) -> tuple[bool, int]:
    """Baseline overflow check built from whole-tensor ops.

    Returns ``(overflow, peak_extra_bytes)`` where the second value is the
    largest amount of temporary memory alive at once.
    """
    meter = meter or AllocationMeter()
    if isinstance(buf, GradFlatBuffer):
        x = buf.values
    else:
        x = np.asarray(buf)
        if x.dtype == np.uint32:
            x = x.view(np.float32)
    meter.stage("inf")
    a = meter.alloc(np.abs(x))  # 4 B/elem copy
    inf_mask = meter.alloc(np.isinf(a))  # 1 B/elem
    has_inf = bool(inf_mask.any())
    meter.free(inf_mask)
    del inf_mask
    meter.free(a)
    del a
    meter.stage("nan")
    nan_mask = meter.alloc(np.isnan(x))  # 1 B/elem
    has_nan = bool(nan_mask.any())
    meter.free(nan_mask)
    del nan_mask
    return has_inf or has_nan, meter.peak


def scalar_overflow_oracle(values) -> bool:
    """Element-by-element reference using the math module, no bit tricks."""
    import math

    for v in np.asarray(values, dtype=np.float32).ravel().tolist():
        if math.isnan(v) or math.isinf(v):
            return True
    return False


# -- benchmark ------------------------------------------------------------------


@dataclass
class OverflowBenchRow:
    size: int
    fused_ns: int
    naive_ns: int
    naive_peak_extra_bytes: int
    speedup: float
    workers: int
    fused_1worker_ns: int
    parallel_efficiency: float


def _median_ns(fn, repeats: int) -> int:
    fn()  # warm caches and JIT
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return int(statistics.median(samples))


def bench_overflow(
    sizes: Sequence[int],
    cfg: ScanConfig | None = None,
    repeats: int = 5,
    seed: int = 0,
) -> list[OverflowBenchRow]:
    """Median wall-clock of fused vs naive checks on clean buffers (full scans)."""
    cfg = cfg or ScanConfig()
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        if n < 1:
            raise InvalidArgument("sizes must be > 0")
        with GradFlatBuffer(n) as buf:
            buf.values[:] = rng.standard_normal(n, dtype=np.float32)
            fused = _median_ns(lambda: fused_overflow_check(buf, cfg), repeats)
            single = ScanConfig(1, cfg.chunk_bytes, cfg.early_exit)
            fused1 = fused if cfg.worker_count == 1 else _median_ns(lambda: fused_overflow_check(buf, single), repeats)
            naive = _median_ns(lambda: naive_overflow_check(buf), repeats)
            _, peak = naive_overflow_check(buf)
        workers = min(cfg.worker_count, max(1, -(-n // cfg.chunk_elems)))
        rows.append(
            OverflowBenchRow(
                size=n,
                fused_ns=fused,
                naive_ns=naive,
                naive_peak_extra_bytes=peak,
                speedup=naive / max(fused, 1),
                workers=workers,
                fused_1worker_ns=fused1,
                parallel_efficiency=(fused1 / max(fused, 1)) / workers,
            )
        )
    return rows
