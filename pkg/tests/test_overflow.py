from __future__ import annotations

import tracemalloc

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from offloadkit.overflow import (
    EXP_ALL_ONES_MASK,
    EXP_MASK,
    AllocationMeter,
    GradFlatBuffer,
    ScanConfig,
    bench_overflow,
    fused_overflow_check,
    naive_overflow_check,
    scalar_overflow_oracle,
)

SPECIAL = np.array(
    [0x00000000, 0x80000000, 0x00000001, 0x807FFFFF, 0x7F7FFFFF, 0xFF7FFFFF,
     0x7F800000, 0xFF800000, 0x7FC00000, 0xFFC00001, 0x7F800001, 0xFFBFFFFF],
    dtype=np.uint32,
)
CONFIGS = [ScanConfig(1, 4), ScanConfig(3, 64, early_exit=False), ScanConfig(4, 1024, debug=True), ScanConfig(2)]


def adversarial(rng, n):
    bits = rng.integers(0, 2**32, n, dtype=np.uint64).astype(np.uint32)
    # mostly finite values with sparse specials so both outcomes are common
    finite = rng.standard_normal(n).astype(np.float32).view(np.uint32)
    bits = np.where(rng.random(n) < 0.9, finite, bits)
    k = rng.integers(0, 3)
    for _ in range(k):
        bits[rng.integers(0, n)] = SPECIAL[rng.integers(0, len(SPECIAL))]
    return bits


def test_mask_constant():
    assert EXP_MASK == EXP_ALL_ONES_MASK == 0x7F800000


@given(st.integers(0, 2**32 - 1))
def test_mask_soundness(p):
    v = np.array([p], dtype=np.uint32).view(np.float32)[0]
    assert ((p & EXP_MASK) == EXP_MASK) == (not np.isfinite(v))


def test_mask_soundness_stratified():
    # every exponent, with low/high/random mantissas and both signs
    exps = np.arange(256, dtype=np.uint32) << 23
    mants = np.array([0, 1, 0x400000, 0x7FFFFF, 0x123456], dtype=np.uint32)
    pats = (exps[:, None] | mants[None, :]).ravel()
    pats = np.concatenate([pats, pats | 0x80000000])
    vals = pats.view(np.float32)
    assert np.array_equal((pats & EXP_MASK) == EXP_MASK, ~np.isfinite(vals))


@pytest.mark.parametrize("seed", range(4))
def test_three_routes_agree(seed):
    rng = np.random.default_rng(seed)
    for _ in range(2500):
        bits = adversarial(rng, int(rng.integers(1, 200)))
        vals = bits.view(np.float32)
        want = scalar_overflow_oracle(vals)
        assert naive_overflow_check(vals)[0] == want
        for cfg in CONFIGS[:2]:
            assert fused_overflow_check(bits, cfg).overflow == want


@given(st.lists(st.integers(0, 2**32 - 1), min_size=1, max_size=300), st.sampled_from(CONFIGS))
def test_fused_matches_oracle_property(words, cfg):
    bits = np.array(words, dtype=np.uint32)
    assert fused_overflow_check(bits, cfg).overflow == scalar_overflow_oracle(bits.view(np.float32))


def test_result_independent_of_config_and_index():
    n = 100_003
    with GradFlatBuffer(n) as buf:
        buf.values[:] = 1.0
        for pos in (0, 513, n // 2, n - 1):
            buf.values[pos] = np.nan
            results = {fused_overflow_check(buf, c).overflow for c in CONFIGS}
            assert results == {True}
            dbg = fused_overflow_check(buf, ScanConfig(1, 4 * 4096, early_exit=False, debug=True))
            assert dbg.first_offending_index == pos
            buf.values[pos] = 1.0
        assert not fused_overflow_check(buf, ScanConfig(4, 4096)).overflow


def test_single_element():
    assert not fused_overflow_check(np.array([1.0], dtype=np.float32)).overflow
    assert fused_overflow_check(np.array([-np.inf], dtype=np.float32)).overflow
    assert naive_overflow_check(np.array([np.nan], dtype=np.float32))[0]


@pytest.mark.parametrize("n", [10**4, 10**6, 4 * 10**6])
def test_fused_extra_memory_is_constant(n):
    with GradFlatBuffer(n) as buf:
        buf.values[:] = 0.5
        fused_overflow_check(buf, ScanConfig(2))  # warm executors and JIT
        tracemalloc.start()
        fused_overflow_check(buf, ScanConfig(2))
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
    assert peak < 64 * 1024


def test_naive_stage_peaks():
    n = 10**6
    meter = AllocationMeter()
    flag, extra = naive_overflow_check(np.zeros(n, np.float32), meter)
    assert not flag
    assert extra == 5 * n
    assert meter.stage_peaks == {"inf": 5 * n, "nan": n}
    assert (4 * n + extra) / (4 * n) == 2.25


def test_bench_rows():
    rows = bench_overflow([1, 5000], ScanConfig(2, 1024), repeats=2)
    assert [r.size for r in rows] == [1, 5000]
    assert rows[1].naive_peak_extra_bytes == 25000
    assert all(r.fused_ns > 0 and r.naive_ns > 0 for r in rows)
    assert rows[0].workers == 1
