"""Page-aligned, optionally page-locked host buffers for large static staging areas.

Two sizing policies are provided. ``power_of_two`` mirrors the caching host
allocator that rounds every request to the next power of two; for multi-GiB
long-lived buffers that rounding is permanent waste. ``alignment_free`` only
rounds to the page size, which is all DMA needs.

Regions come from anonymous ``mmap`` so they are page aligned and zero filled.
Device registration is modelled as the ``allocated -> registered`` transition;
no GPU runtime is involved. Each region is released exactly once.
"""

from __future__ import annotations

import ctypes
import enum
import errno
import itertools
import logging
import mmap
import os
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import DoubleFree, InvalidArgument, LifecycleError, OutOfMemory, UnknownRegion
from .metrics import sink

log = logging.getLogger(__name__)

PAGE_SIZE_ENV = "OFFLOADKIT_PAGE_SIZE"
DEFAULT_PAGE_SIZE = 4096


def default_page_size() -> int:
    raw = os.environ.get(PAGE_SIZE_ENV)
    if not raw:
        return DEFAULT_PAGE_SIZE
    try:
        return int(raw, 0)
    except ValueError:
        raise InvalidArgument(f"{PAGE_SIZE_ENV}={raw!r} is not an integer") from None


class PolicyKind(str, enum.Enum):
    POWER_OF_TWO = "power_of_two"
    ALIGNMENT_FREE = "alignment_free"


@dataclass(frozen=True)
class AllocationPolicy:
    kind: PolicyKind = PolicyKind.ALIGNMENT_FREE
    page_size: int = field(default_factory=default_page_size)

    def __post_init__(self):
        if not isinstance(self.kind, PolicyKind):
            object.__setattr__(self, "kind", PolicyKind(self.kind))
        ps = self.page_size
        if ps < 512 or ps & (ps - 1):
            raise InvalidArgument(f"page_size must be a power of two >= 512, got {ps}")

    @classmethod
    def power_of_two(cls, page_size: int | None = None) -> "AllocationPolicy":
        return cls(PolicyKind.POWER_OF_TWO, page_size or default_page_size())

    @classmethod
    def alignment_free(cls, page_size: int | None = None) -> "AllocationPolicy":
        return cls(PolicyKind.ALIGNMENT_FREE, page_size or default_page_size())


def allocated_capacity(request: int, policy: AllocationPolicy) -> int:
    """Bytes actually reserved for a request of ``request`` bytes.

    Power-of-two requests never go below one page: page locking works at
    page granularity.
    """
    if request <= 0:
        raise InvalidArgument(f"request must be > 0, got {request}")
    ps = policy.page_size
    if policy.kind is PolicyKind.POWER_OF_TWO:
        return max(ps, 1 << (request - 1).bit_length())
    return -(-request // ps) * ps


def overhead_bytes(request: int, policy: AllocationPolicy) -> int:
    return allocated_capacity(request, policy) - request


class RegionState(str, enum.Enum):
    ALLOCATED = "allocated"
    REGISTERED = "registered"
    RELEASED = "released"


_libc = None


def _get_libc():
    global _libc
    if _libc is None:
        _libc = ctypes.CDLL(None, use_errno=True)
    return _libc


class PinnedRegion:
    """A page-aligned host buffer. Obtain through :meth:`PinnedAllocator.allocate`."""

    def __init__(self, region_id, requested, capacity, alignment, mm, offset, owner):
        self.region_id = region_id
        self.requested_bytes = requested
        self.capacity_bytes = capacity
        self.alignment = alignment
        self.state = RegionState.ALLOCATED
        self.locked = False
        self.warning: str | None = None
        self._mm = mm
        self._offset = offset
        self._owner = owner
        self._bytes = np.frombuffer(mm, dtype=np.uint8)[offset : offset + capacity]

    def __repr__(self):
        return (
            f"PinnedRegion(id={self.region_id}, requested={self.requested_bytes}, "
            f"capacity={self.capacity_bytes}, state={self.state.value})"
        )

    def _check_live(self):
        if self.state is RegionState.RELEASED:
            raise LifecycleError(f"region {self.region_id} has been released")

    @property
    def address(self) -> int:
        self._check_live()
        return self._bytes.ctypes.data

    @property
    def nbytes(self) -> int:
        return self.capacity_bytes

    def bytes_view(self, offset: int = 0, length: int | None = None) -> np.ndarray:
        """uint8 view over ``[offset, offset + length)`` of the region."""
        self._check_live()
        end = self.capacity_bytes if length is None else offset + length
        if offset < 0 or end > self.capacity_bytes:
            raise InvalidArgument(f"view [{offset}, {end}) outside region of {self.capacity_bytes} B")
        return self._bytes[offset:end]

    def as_array(self, dtype, count: int | None = None, offset: int = 0) -> np.ndarray:
        dtype = np.dtype(dtype)
        if count is None:
            count = (self.capacity_bytes - offset) // dtype.itemsize
        return self.bytes_view(offset, count * dtype.itemsize).view(dtype)

    def release(self) -> None:
        self._owner.release(self)


class PinnedAllocator:
    """Allocates and tracks :class:`PinnedRegion` objects.

    Thread safe. Statistics (count, live bytes, peak bytes) are mirrored to
    the metrics sink under ``name``.
    """

    def __init__(self, name: str = "pinned"):
        self.name = name
        self._lock = threading.Lock()
        self._ids = itertools.count(1)
        self._live: dict[int, PinnedRegion] = {}
        self.allocations = 0
        self.live_bytes = 0
        self.peak_bytes = 0
        self.requested_live_bytes = 0

    @property
    def live_count(self) -> int:
        return len(self._live)

    def stats(self) -> dict:
        with self._lock:
            return {
                "count": len(self._live),
                "allocations": self.allocations,
                "live_bytes": self.live_bytes,
                "peak_bytes": self.peak_bytes,
                "requested_live_bytes": self.requested_live_bytes,
            }

    def allocate(
        self,
        request: int,
        policy: AllocationPolicy | None = None,
        lock_pages: bool = False,
    ) -> PinnedRegion:
        policy = policy or AllocationPolicy.alignment_free()
        capacity = allocated_capacity(request, policy)
        alignment = policy.page_size
        extra = alignment - mmap.PAGESIZE if alignment > mmap.PAGESIZE else 0
        try:
            mm = mmap.mmap(-1, capacity + extra, flags=mmap.MAP_PRIVATE | mmap.MAP_ANONYMOUS)
        except (OSError, OverflowError, ValueError) as e:
            raise OutOfMemory(f"cannot map {capacity} bytes: {e}") from e
        base = np.frombuffer(mm, dtype=np.uint8).ctypes.data
        offset = (-base) % alignment
        with self._lock:
            rid = next(self._ids)
        region = PinnedRegion(rid, request, capacity, alignment, mm, offset, self)
        if lock_pages:
            self._lock_pages(region)
        # host registration: a pure state transition in this build
        region.state = RegionState.REGISTERED
        with self._lock:
            self._live[rid] = region
            self.allocations += 1
            self.live_bytes += capacity
            self.requested_live_bytes += request
            self.peak_bytes = max(self.peak_bytes, self.live_bytes)
            self._publish()
        return region

    def _lock_pages(self, region: PinnedRegion) -> None:
        libc = _get_libc()
        rc = libc.mlock(ctypes.c_void_p(region.address), ctypes.c_size_t(region.capacity_bytes))
        if rc == 0:
            region.locked = True
            return
        err = ctypes.get_errno()
        region.warning = f"page lock unavailable ({errno.errorcode.get(err, err)}); region is pageable"
        log.warning("region %d: %s", region.region_id, region.warning)

    def release(self, region: PinnedRegion) -> None:
        with self._lock:
            if region.state is RegionState.RELEASED:
                raise DoubleFree(f"region {region.region_id} already released")
            if self._live.get(region.region_id) is not region:
                raise UnknownRegion(f"region {region.region_id} was not allocated here")
            del self._live[region.region_id]
            region.state = RegionState.RELEASED
            self.live_bytes -= region.capacity_bytes
            self.requested_live_bytes -= region.requested_bytes
            self._publish()
        if region.locked:
            _get_libc().munlock(
                ctypes.c_void_p(region._bytes.ctypes.data), ctypes.c_size_t(region.capacity_bytes)
            )
            region.locked = False
        mm = region._mm
        region._bytes = None
        region._mm = None
        try:
            mm.close()
        except BufferError:
            # outstanding numpy views keep the mapping alive; drop the pages
            # now and let the mapping go when the views are collected
            mm.madvise(mmap.MADV_DONTNEED)

    def _publish(self):
        sink.set(f"{self.name}.count", len(self._live))
        sink.set(f"{self.name}.live_bytes", self.live_bytes)
        sink.set(f"{self.name}.peak_bytes", self.peak_bytes)


default_allocator = PinnedAllocator()


def allocate(request: int, policy: AllocationPolicy | None = None, lock_pages: bool = False) -> PinnedRegion:
    return default_allocator.allocate(request, policy, lock_pages)


def release(region: PinnedRegion) -> None:
    region._owner.release(region)
