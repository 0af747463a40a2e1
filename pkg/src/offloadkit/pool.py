"""Staging pool for parameter traffic between SSD and host memory.

Two layouts share one implementation:

* ``monolithic``: every buffer is as large as the largest tensor in the
  inventory. Simple, and wasteful whenever shapes differ.
* ``adaptive``: one sub-pool per shape class, each buffer sized exactly for
  its class. Dense transformers need four classes.

Both carve their buffers out of a single contiguous backing region. Buffer
starts are 4096-aligned so a handle can be handed straight to the direct I/O
engine. A metadata map remembers which class every key belongs to.
"""

from __future__ import annotations

import enum
import json
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    AlreadyCheckedOut,
    InvalidArgument,
    LifecycleError,
    PoolError,
    PoolExhausted,
    SizeViolation,
)
from .metrics import sink
from .model import TensorDescriptor, classify
from .pinned import AllocationPolicy, PinnedAllocator, PinnedRegion, allocated_capacity, default_allocator

IO_ALIGN = 4096
DENSE_BUFFERS_PER_BLOCK = 7


class PoolMode(str, enum.Enum):
    MONOLITHIC = "monolithic"
    ADAPTIVE = "adaptive"


class Backing(str, enum.Enum):
    PINNED = "pinned"
    # accounting only; used for full-size models that do not fit the host
    VIRTUAL = "virtual"


@dataclass(frozen=True)
class PoolConfig:
    mode: PoolMode = PoolMode.ADAPTIVE
    inflight_blocks: int = 1
    blocking: bool = False
    buffers_per_block: int | None = None  # monolithic only; derived when None
    backing_policy: AllocationPolicy = field(default_factory=AllocationPolicy.alignment_free)
    backing: Backing = Backing.PINNED
    lock_pages: bool = False
    checkout_timeout: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", PoolMode(self.mode))
        object.__setattr__(self, "backing", Backing(self.backing))
        if self.inflight_blocks < 1:
            raise InvalidArgument(f"inflight_blocks must be >= 1, got {self.inflight_blocks}")
        if self.buffers_per_block is not None and self.buffers_per_block < 1:
            raise InvalidArgument("buffers_per_block must be >= 1")


@dataclass(frozen=True)
class ClassLayout:
    """One sub-pool: ``count`` buffers of ``buffer_bytes`` at ``stride`` spacing."""

    class_id: str
    buffer_bytes: int
    count: int
    stride: int
    base_offset: int

    @property
    def payload_bytes(self) -> int:
        return self.buffer_bytes * self.count

    @property
    def span_bytes(self) -> int:
        return self.stride * self.count


class HandleState(str, enum.Enum):
    CHECKED_OUT = "checked_out"
    RETURNED = "returned"


@dataclass
class BufferHandle:
    key: str
    offset: int
    length: int
    class_id: str
    slot: int
    state: HandleState = HandleState.CHECKED_OUT
    slot_bytes: int = 0
    pool_id: int = 0

    @property
    def end(self) -> int:
        return self.offset + self.length


@dataclass
class PoolStats:
    mode: str
    capacity_bytes: int
    backing_bytes: int
    live_bytes: int = 0
    peak_live_bytes: int = 0
    checkout_count: int = 0
    checkin_count: int = 0
    blocked_time_s: float = 0.0
    distinct_keys: int = 0

    @property
    def fragmentation(self) -> float:
        return fragmentation(self.capacity_bytes, self.peak_live_bytes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fragmentation"] = self.fragmentation
        return d


def fragmentation(capacity_bytes: float, peak_live_bytes: float) -> float:
    """Share of pool capacity never holding payload: (capacity - peak) / capacity.

    >>> round(fragmentation(13.05, 3.81), 5)
    0.70805
    """
    if capacity_bytes <= 0:
        raise InvalidArgument("capacity must be > 0")
    if peak_live_bytes < 0 or peak_live_bytes > capacity_bytes:
        raise InvalidArgument(f"peak_live {peak_live_bytes} outside [0, {capacity_bytes}]")
    return (capacity_bytes - peak_live_bytes) / capacity_bytes


def _round_up(n: int, align: int = IO_ALIGN) -> int:
    return -(-n // align) * align


def _per_block_count(inventory: Sequence[TensorDescriptor]) -> int:
    per_layer: dict[int, int] = {}
    for t in inventory:
        if t.layer is not None:
            per_layer[t.layer] = per_layer.get(t.layer, 0) + 1
    return max(per_layer.values(), default=0)


def class_plan(
    inventory: Sequence[TensorDescriptor],
    mode: PoolMode | str,
    inflight_blocks: int,
    buffers_per_block: int | None = None,
) -> list[tuple[str, int, int]]:
    """(class_id, buffer_bytes, buffer_count) for each sub-pool."""
    mode = PoolMode(mode)
    if inflight_blocks < 1:
        raise InvalidArgument(f"inflight_blocks must be >= 1, got {inflight_blocks}")
    if not inventory:
        raise InvalidArgument("inventory is empty")
    if mode is PoolMode.MONOLITHIC:
        biggest = max(t.nbytes for t in inventory)
        standalone = sum(1 for t in inventory if t.layer is None)
        if buffers_per_block is None:
            per_block = _per_block_count(inventory)
            is_dense = all(t.role.value != "expert_ffn" for t in inventory)
            buffers_per_block = DENSE_BUFFERS_PER_BLOCK if is_dense and per_block else per_block
        count = buffers_per_block * inflight_blocks + standalone
        return [("monolithic", biggest, count)]
    by_name = {t.name: t for t in inventory}
    plan = []
    for c in classify(inventory):
        nbytes = max(by_name[m].nbytes for m in c.members)
        count = c.per_block_members * inflight_blocks + c.standalone_members
        plan.append((c.class_id, nbytes, count))
    return plan


def pool_capacity(
    inventory: Sequence[TensorDescriptor],
    mode: PoolMode | str,
    inflight_blocks: int,
    buffers_per_block: int | None = None,
) -> int:
    """Payload capacity of a pool: sum over sub-pools of buffer size times count."""
    return sum(b * n for _, b, n in class_plan(inventory, mode, inflight_blocks, buffers_per_block))


def calibrate_inflight(
    inventory: Sequence[TensorDescriptor],
    target_bytes: float,
    mode: PoolMode | str = PoolMode.MONOLITHIC,
    candidates: Iterable[int] = range(1, 17),
) -> int:
    """In-flight block count whose pool capacity lands closest to ``target_bytes``."""
    return min(candidates, key=lambda n: (abs(pool_capacity(inventory, mode, n) - target_bytes), n))


class _SubPool:
    def __init__(self, layout: ClassLayout):
        self.layout = layout
        self.free = deque(range(layout.count))


class BufferPool:
    """A monolithic or adaptive staging pool over one contiguous backing region.

    Parameters
    ----------
    inventory
        Tensors that will be staged. Keys passed to :meth:`checkout` are
        tensor names from this list; unknown keys go to the smallest class
        that fits.
    config
        Layout and behaviour.
    allocator
        Source of the pinned backing region.
    """

    def __init__(
        self,
        inventory: Sequence[TensorDescriptor],
        config: PoolConfig | None = None,
        allocator: PinnedAllocator | None = None,
    ):
        self.config = config or PoolConfig()
        plan = class_plan(inventory, self.config.mode, self.config.inflight_blocks, self.config.buffers_per_block)
        if not plan:
            raise InvalidArgument("pool needs at least one class")
        layouts = []
        offset = 0
        for cid, nbytes, count in plan:
            stride = _round_up(nbytes)
            layouts.append(ClassLayout(cid, nbytes, count, stride, offset))
            offset += stride * count
        self.layouts = layouts
        self.backing_span = offset
        self._sub = {lay.class_id: _SubPool(lay) for lay in layouts}

        if self.config.mode is PoolMode.MONOLITHIC:
            self._class_of = {t.name: "monolithic" for t in inventory}
        else:
            self._class_of = {m: c.class_id for c in classify(inventory) for m in c.members}
        self._tensor_bytes = {t.name: t.nbytes for t in inventory}

        self.allocator = allocator or default_allocator
        self.region: PinnedRegion | None = None
        if self.config.backing is Backing.PINNED:
            self.region = self.allocator.allocate(self.backing_span, self.config.backing_policy, self.config.lock_pages)

        self._cond = threading.Condition()
        self._live: dict[str, BufferHandle] = {}
        self.metadata: dict[str, tuple[str, int]] = {}
        self.stats = PoolStats(
            mode=self.config.mode.value,
            capacity_bytes=sum(lay.payload_bytes for lay in layouts),
            backing_bytes=(
                self.region.capacity_bytes
                if self.region is not None
                else allocated_capacity(self.backing_span, self.config.backing_policy)
            ),
        )
        self._closed = False

    # -- properties -----------------------------------------------------------

    @property
    def capacity_bytes(self) -> int:
        return self.stats.capacity_bytes

    @property
    def live_bytes(self) -> int:
        return self.stats.live_bytes

    def layout(self, class_id: str) -> ClassLayout:
        return self._sub[class_id].layout

    def class_of(self, key: str, payload_bytes: int) -> str:
        cid = self._class_of.get(key)
        if cid is not None:
            return cid
        fits = [lay for lay in self.layouts if lay.buffer_bytes >= payload_bytes]
        if not fits:
            raise SizeViolation(f"{key}: {payload_bytes} B exceeds every buffer class")
        return min(fits, key=lambda lay: (lay.buffer_bytes, lay.class_id)).class_id

    def live_handles(self) -> list[BufferHandle]:
        with self._cond:
            return list(self._live.values())

    # -- checkout / checkin ---------------------------------------------------

    def checkout(self, key: str, payload_bytes: int | None = None, *, blocking: bool | None = None) -> BufferHandle:
        """Claim a free buffer of ``key``'s class for ``payload_bytes`` bytes."""
        if payload_bytes is None:
            try:
                payload_bytes = self._tensor_bytes[key]
            except KeyError:
                raise InvalidArgument(f"{key}: payload size required for keys outside the inventory") from None
        if payload_bytes <= 0:
            raise InvalidArgument(f"{key}: payload must be > 0")
        cid = self.class_of(key, payload_bytes)
        sub = self._sub[cid]
        if payload_bytes > sub.layout.buffer_bytes:
            raise SizeViolation(f"{key}: {payload_bytes} B exceeds {cid} buffer of {sub.layout.buffer_bytes} B")
        blocking = self.config.blocking if blocking is None else blocking
        with self._cond:
            self._check_open()
            if key in self._live:
                raise AlreadyCheckedOut(f"{key} is already checked out")
            if not sub.free:
                if not blocking:
                    raise PoolExhausted(f"class {cid}: all {sub.layout.count} buffers in use")
                t0 = time.perf_counter()
                ok = self._cond.wait_for(
                    lambda: bool(sub.free) or self._closed or key in self._live, self.config.checkout_timeout
                )
                self.stats.blocked_time_s += time.perf_counter() - t0
                self._check_open()
                if key in self._live:
                    raise AlreadyCheckedOut(f"{key} is already checked out")
                if not ok:
                    raise PoolExhausted(f"class {cid}: timed out waiting for a buffer")
            slot = sub.free.popleft()
            lay = sub.layout
            h = BufferHandle(
                key=key,
                offset=lay.base_offset + slot * lay.stride,
                length=payload_bytes,
                class_id=cid,
                slot=slot,
                slot_bytes=lay.stride,
                pool_id=id(self),
            )
            self._live[key] = h
            self.metadata.setdefault(key, (cid, payload_bytes))
            st = self.stats
            st.live_bytes += payload_bytes
            st.peak_live_bytes = max(st.peak_live_bytes, st.live_bytes)
            st.checkout_count += 1
            st.distinct_keys = len(self.metadata)
        sink.incr("pool.checkouts")
        return h

    def checkin(self, handle: BufferHandle) -> None:
        with self._cond:
            if handle.pool_id != id(self):
                raise LifecycleError(f"{handle.key}: handle belongs to another pool")
            if handle.state is HandleState.RETURNED:
                raise LifecycleError(f"{handle.key}: handle already checked in")
            if self._live.get(handle.key) is not handle:
                raise LifecycleError(f"{handle.key}: handle is not live in this pool")
            del self._live[handle.key]
            handle.state = HandleState.RETURNED
            self._sub[handle.class_id].free.append(handle.slot)
            self.stats.live_bytes -= handle.length
            self.stats.checkin_count += 1
            self._cond.notify_all()
        sink.incr("pool.checkins")

    # -- memory access --------------------------------------------------------

    def view(self, handle: BufferHandle, padded: bool = False) -> np.ndarray:
        """uint8 view of a live handle's bytes; ``padded`` extends to the full slot."""
        if self.region is None:
            raise PoolError("virtual pool has no backing memory")
        if handle.state is not HandleState.CHECKED_OUT:
            raise LifecycleError(f"{handle.key}: handle already checked in")
        length = handle.slot_bytes if padded else handle.length
        return self.region.bytes_view(handle.offset, length)

    # -- lifecycle ------------------------------------------------------------

    def _check_open(self):
        if self._closed:
            raise LifecycleError("pool is closed")

    def close(self) -> None:
        with self._cond:
            if self._closed:
                return
            self._closed = True
            self._cond.notify_all()
        if self.region is not None:
            self.allocator.release(self.region)
            self.region = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def stats_json(self) -> str:
        d = self.stats.to_dict()
        d["classes"] = [asdict(lay) for lay in self.layouts]
        return json.dumps(d, indent=2, sort_keys=True)


def replay_prefetch(pool: BufferPool, inventory: Sequence[TensorDescriptor], inflight_blocks: int | None = None) -> PoolStats:
    """Stage one forward pass through ``pool`` and return its stats.

    Standalone tensors stay checked out for the whole pass; transformer
    blocks stream through a window of ``inflight_blocks``.
    """
    n = inflight_blocks or pool.config.inflight_blocks
    standalone = [pool.checkout(t.name, blocking=False) for t in inventory if t.layer is None]
    by_layer: dict[int, list[TensorDescriptor]] = {}
    for t in inventory:
        if t.layer is not None:
            by_layer.setdefault(t.layer, []).append(t)
    window: deque[list[BufferHandle]] = deque()
    for layer in sorted(by_layer):
        if len(window) == n:
            for h in window.popleft():
                pool.checkin(h)
        window.append([pool.checkout(t.name, blocking=False) for t in by_layer[layer]])
    for handles in window:
        for h in handles:
            pool.checkin(h)
    for h in standalone:
        pool.checkin(h)
    return pool.stats
