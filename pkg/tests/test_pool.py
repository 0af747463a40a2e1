from __future__ import annotations

import threading

import numpy as np

import pytest
from hypothesis import settings
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, precondition, rule

from offloadkit.errors import AlreadyCheckedOut, InvalidArgument, LifecycleError, PoolExhausted, SizeViolation
from offloadkit.model import ModelSpec, TensorDescriptor, enumerate_offload_tensors, load_model_spec
from offloadkit.pinned import PinnedAllocator
from offloadkit.pool import (
    Backing,
    BufferPool,
    PoolConfig,
    calibrate_inflight,
    class_plan,
    fragmentation,
    pool_capacity,
    replay_prefetch,
)

TOY = ModelSpec(vocab=64, hidden=8, intermediate=16, layers=2, kv_dim=8, resident_threshold=0, name="toy")
GIB = 2**30


def toy_inventory():
    return enumerate_offload_tensors(TOY)


def test_toy_adaptive_capacity():
    inv = toy_inventory()
    assert pool_capacity(inv, "adaptive", 1) == 2 * 64 * 8 * 2 + 3 * 16 * 8 * 2 + 2 * 8 * 8 * 2 + 2 * 8 * 8 * 2 == 3328
    with BufferPool(inv, PoolConfig(mode="adaptive")) as pool:
        assert pool.capacity_bytes == 3328
        assert pool.stats.backing_bytes % 4096 == 0 and pool.stats.backing_bytes >= 3328


def test_toy_monolithic_brute_force():
    inv = toy_inventory()
    biggest = max(t.rows * t.cols * 2 for t in inv)
    assert class_plan(inv, "monolithic", 1) == [("monolithic", biggest, 7 + 2)]
    assert biggest == 1024


def test_empty_inventory_and_zero_inflight_rejected():
    with pytest.raises(InvalidArgument):
        class_plan([], "adaptive", 1)
    with pytest.raises(InvalidArgument):
        pool_capacity(toy_inventory(), "adaptive", 0)


def test_dense_class_counts():
    inv = enumerate_offload_tensors(load_model_spec("llama3.1-8b"))
    for n in (1, 3):
        counts = sorted(c for _, _, c in class_plan(inv, "adaptive", n))
        assert counts == sorted([2, 3 * n, 2 * n, 2 * n])


def test_fragmentation_metric():
    assert fragmentation(13.05 * GIB, 3.81 * GIB) == pytest.approx((13.05 - 3.81) / 13.05)
    assert fragmentation(5, 5) == 0
    with pytest.raises(InvalidArgument):
        fragmentation(0, 0)
    with pytest.raises(InvalidArgument):
        fragmentation(1, 2)


def test_exact_fit_checkout():
    inv = toy_inventory()
    with BufferPool(inv, PoolConfig(mode="adaptive")) as pool:
        t = next(t for t in inv if t.name.endswith("up_proj"))
        h = pool.checkout(t.name)
        assert h.length == t.nbytes == pool.layout(h.class_id).buffer_bytes
        assert h.offset % 4096 == 0
        pool.checkin(h)
        assert pool.live_bytes == 0


def test_exhaustion_and_lifecycle_errors():
    inv = toy_inventory()
    with BufferPool(inv, PoolConfig(mode="adaptive")) as pool:
        cid = pool.class_of("layers.0.self_attn.k_proj", 128)
        k = pool.layout(cid).count
        kv = [t for t in inv if pool.class_of(t.name, t.nbytes) == cid]
        handles = [pool.checkout(t.name) for t in kv[:k]]
        with pytest.raises(PoolExhausted):
            pool.checkout(kv[k].name)
        with pytest.raises(AlreadyCheckedOut):
            pool.checkout(kv[0].name)
        with pytest.raises(SizeViolation):
            pool.checkout("scratch", 10**6)
        pool.checkin(handles[0])
        with pytest.raises(LifecycleError):
            pool.checkin(handles[0])
        with BufferPool(inv, PoolConfig(mode="adaptive")) as other:
            with pytest.raises(LifecycleError):
                other.checkin(handles[1])
        for h in handles[1:]:
            pool.checkin(h)


def test_blocking_checkout_waits():
    inv = toy_inventory()
    with BufferPool(inv, PoolConfig(mode="monolithic", blocking=True, buffers_per_block=1)) as pool:
        names = [t.name for t in inv]
        held = [pool.checkout(n) for n in names[:3]]  # 1*1 + 2 standalone buffers
        got = []
        th = threading.Thread(target=lambda: got.append(pool.checkout(names[3])))
        th.start()
        th.join(0.1)
        assert th.is_alive()
        pool.checkin(held[0])
        th.join(5)
        assert got and got[0].offset == held[0].offset
        assert pool.stats.blocked_time_s > 0


def test_metadata_map_counts_distinct_keys():
    inv = toy_inventory()
    with BufferPool(inv, PoolConfig(mode="adaptive", inflight_blocks=2)) as pool:
        for _ in range(3):
            replay_prefetch(pool, inv)
        assert len(pool.metadata) == pool.stats.distinct_keys == len(inv)
        assert pool.stats.checkout_count == pool.stats.checkin_count == 3 * len(inv)


@pytest.mark.parametrize("name", ["llama3.1-8b", "qwen2.5-7b", "qwen2.5-14b", "qwen2.5-32b", "qwen3-30b-a3b"])
def test_adaptive_dominates_monolithic(name):
    inv = enumerate_offload_tensors(load_model_spec(name))
    for n in (1, 2, 4):
        assert pool_capacity(inv, "adaptive", n) < pool_capacity(inv, "monolithic", n)


def test_replay_fragmentation_virtual_backing():
    inv = enumerate_offload_tensors(load_model_spec("qwen2.5-7b"))
    stats = {}
    for mode in ("monolithic", "adaptive"):
        with BufferPool(inv, PoolConfig(mode=mode, backing=Backing.VIRTUAL)) as pool:
            stats[mode] = replay_prefetch(pool, inv)
    assert stats["adaptive"].fragmentation == 0
    assert stats["monolithic"].peak_live_bytes == stats["adaptive"].peak_live_bytes
    assert stats["monolithic"].fragmentation > 0.7


def test_calibrate_inflight_recovers_n():
    inv = enumerate_offload_tensors(load_model_spec("llama3.1-8b"))
    for n in (1, 2, 5):
        assert calibrate_inflight(inv, pool_capacity(inv, "monolithic", n)) == n


def test_concurrent_checkout_conservation():
    inv = toy_inventory()
    with BufferPool(inv, PoolConfig(mode="adaptive", inflight_blocks=2, blocking=True)) as pool:
        names = [t.name for t in inv if t.layer is not None]

        def work(k):
            for i in range(300):
                h = pool.checkout(f"{names[(i + k) % len(names)]}#{k}", next(t.nbytes for t in inv if t.name == names[(i + k) % len(names)]))
                pool.checkin(h)

        threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert pool.stats.checkout_count == pool.stats.checkin_count == 1200
        assert pool.live_bytes == 0


class PoolMachine(RuleBasedStateMachine):
    """Random checkout/checkin sequences; live handles must never overlap."""

    def __init__(self):
        super().__init__()
        self.inv = toy_inventory() + [TensorDescriptor("extra", 3, 5)]
        self.alloc = PinnedAllocator("pool-sm")
        self.pool = BufferPool(self.inv[:-1], PoolConfig(mode="adaptive", inflight_blocks=2), self.alloc)
        self.live = {}

    @rule(i=st.integers(0, 100), extra=st.integers(1, 4000))
    def checkout(self, i, extra):
        names = [t.name for t in self.inv[:-1]] + [f"free{j}" for j in range(4)]
        key = names[i % len(names)]
        size = None if not key.startswith("free") else extra % 300 + 1
        try:
            h = self.pool.checkout(key, size)
        except AlreadyCheckedOut:
            assert key in self.live
            return
        except PoolExhausted:
            return
        assert key not in self.live
        region = self.pool.view(h)
        region[:] = len(self.live) % 251 + 1
        self.live[key] = h

    @precondition(lambda self: self.live)
    @rule(i=st.integers(0, 100))
    def checkin(self, i):
        key = sorted(self.live)[i % len(self.live)]
        h = self.live.pop(key)
        self.pool.checkin(h)

    @invariant()
    def disjoint_and_in_bounds(self):
        spans = sorted((h.offset, h.end) for h in self.live.values())
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            assert a1 <= b0
        assert all(0 <= a and b <= self.pool.backing_span for a, b in spans)
        assert self.pool.live_bytes == sum(h.length for h in self.live.values()) <= self.pool.capacity_bytes

    def teardown(self):
        self.pool.close()


PoolMachine.TestCase.settings = settings(max_examples=60, stateful_step_count=170, deadline=None)
TestPoolStateMachine = PoolMachine.TestCase


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ten_thousand_ops_interval_oracle(seed):
    rng = np.random.default_rng(seed)
    inv = toy_inventory()
    names = [t.name for t in inv]
    with BufferPool(inv, PoolConfig(mode="monolithic", inflight_blocks=2)) as pool:
        live = {}
        for op in rng.integers(0, len(names), 10_000):
            key = names[op]
            if key in live:
                pool.checkin(live.pop(key))
                continue
            try:
                live[key] = pool.checkout(key)
            except PoolExhausted:
                continue
            spans = sorted((h.offset, h.end) for h in live.values())
            assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))
