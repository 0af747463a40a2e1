from __future__ import annotations

import gc
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from offloadkit import pinned
from offloadkit.errors import DoubleFree, InvalidArgument, LifecycleError, UnknownRegion
from offloadkit.metrics import sink
from offloadkit.pinned import (
    AllocationPolicy,
    PinnedAllocator,
    RegionState,
    allocated_capacity,
    overhead_bytes,
)

P2 = AllocationPolicy.power_of_two(4096)
AF = AllocationPolicy.alignment_free(4096)


def oracle_pow2(n: int, page: int = 4096) -> int:
    c = 1
    while c < n:
        c *= 2
    return max(c, page)


def oracle_aligned(n: int, page: int = 4096) -> int:
    c = 0
    while c < n:
        c += page
    return c if n < 10 * page else (n + page - 1) // page * page


def test_policy_validation():
    with pytest.raises(InvalidArgument):
        AllocationPolicy.alignment_free(256)
    with pytest.raises(InvalidArgument):
        AllocationPolicy.alignment_free(6000)


def test_page_size_env(monkeypatch):
    monkeypatch.setenv(pinned.PAGE_SIZE_ENV, "8192")
    assert AllocationPolicy.alignment_free().page_size == 8192
    assert allocated_capacity(1, AllocationPolicy.alignment_free()) == 8192


def test_two_point_one_gib_rounds_to_four():
    req = 2_254_857_830
    assert allocated_capacity(req, P2) == 4_294_967_296
    assert allocated_capacity(req, AF) == 2_254_860_288
    assert 1.9 * 2**30 < overhead_bytes(req, P2) < 2 * 2**30


def test_flat_buffer_sized_request():
    req = 30_462_509_056
    assert overhead_bytes(req, P2) == 2**35 - req == 3_897_229_312
    assert overhead_bytes(req, AF) <= 4095


@pytest.mark.parametrize("policy", [P2, AF])
def test_page_request_is_exact(policy):
    assert allocated_capacity(4096, policy) == 4096


def test_zero_request_rejected():
    with pytest.raises(InvalidArgument):
        allocated_capacity(0, AF)


@given(st.integers(1, 2**44))
def test_sizing_laws(n):
    af = overhead_bytes(n, AF)
    p2 = overhead_bytes(n, P2)
    assert 0 <= af < 4096
    assert allocated_capacity(n, AF) % 4096 == 0
    assert allocated_capacity(n, P2) == oracle_pow2(n)
    if n >= 4096:
        assert p2 < n
        assert (p2 == 0) == (n & (n - 1) == 0)


@given(st.integers(1, 40_000))
def test_aligned_matches_counting_oracle(n):
    assert allocated_capacity(n, AF) == oracle_aligned(n)


def test_allocate_state_and_alignment():
    alloc = PinnedAllocator("t")
    r = alloc.allocate(10_000, AF)
    assert r.capacity_bytes == 12_288 and r.requested_bytes == 10_000
    assert r.state is RegionState.REGISTERED
    assert r.address % 4096 == 0
    assert not r.bytes_view().any()
    tiny = alloc.allocate(1, P2)
    assert tiny.capacity_bytes == 4096
    alloc.release(r)
    alloc.release(tiny)
    assert r.state is RegionState.RELEASED


def test_regions_are_disjoint():
    alloc = PinnedAllocator("t")
    a = alloc.allocate(1 << 20, AF)
    b = alloc.allocate(1 << 20, AF)
    assert a.address + a.capacity_bytes <= b.address or b.address + b.capacity_bytes <= a.address
    a.bytes_view()[:] = 1
    assert not b.bytes_view().any()
    alloc.release(a)
    alloc.release(b)


def test_exactly_once_release():
    alloc = PinnedAllocator("t")
    r = alloc.allocate(4096, AF)
    alloc.release(r)
    with pytest.raises(DoubleFree):
        alloc.release(r)
    with pytest.raises(LifecycleError):
        r.bytes_view()
    other = PinnedAllocator("u").allocate(4096, AF)
    with pytest.raises(UnknownRegion):
        alloc.release(other)
    other.release()


def test_typed_views_share_memory():
    alloc = PinnedAllocator("t")
    r = alloc.allocate(64, AF)
    arr = r.as_array(np.float32, 16)
    arr[:] = 2.5
    assert r.bytes_view(0, 4).view(np.float32)[0] == 2.5
    del arr
    alloc.release(r)


def test_lock_pages_degrades_gracefully():
    alloc = PinnedAllocator("t")
    r = alloc.allocate(1 << 16, AF, lock_pages=True)
    big = alloc.allocate(64 << 20, AF, lock_pages=True)  # beyond a typical unprivileged memlock limit
    assert r.locked in (True, False)
    if not big.locked:
        assert big.warning
    alloc.release(r)
    alloc.release(big)


def test_stats_exported_to_sink():
    alloc = PinnedAllocator("statscheck")
    a = alloc.allocate(5000, AF)
    b = alloc.allocate(4096, AF)
    s = alloc.stats()
    assert s["live_bytes"] == 8192 + 4096 and s["count"] == 2
    alloc.release(a)
    s = alloc.stats()
    assert s["live_bytes"] == 4096 and s["peak_bytes"] == 12288
    snap = sink.snapshot("statscheck")
    assert snap["statscheck.live_bytes"] == 4096
    alloc.release(b)


def test_concurrent_allocate_release():
    alloc = PinnedAllocator("mt")
    errors = []

    def work():
        try:
            for _ in range(200):
                r = alloc.allocate(8192, AF)
                r.bytes_view()[:] = 7
                alloc.release(r)
        except Exception as e:  # pragma: no cover - surfaced below
            errors.append(e)

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert alloc.stats()["live_bytes"] == 0 and alloc.live_count == 0


def test_no_leak_over_10k_cycles():
    psutil = pytest.importorskip("psutil")
    proc = psutil.Process()
    alloc = PinnedAllocator("leak")
    for _ in range(200):
        alloc.release(alloc.allocate(1 << 16, AF))
    gc.collect()
    base = proc.memory_info().rss
    for _ in range(10_000):
        r = alloc.allocate(1 << 16, AF)
        r.bytes_view()[::4096] = 1
        alloc.release(r)
    gc.collect()
    assert proc.memory_info().rss - base < 16 << 20
