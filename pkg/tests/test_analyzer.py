from __future__ import annotations

import logging
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from offloadkit import analyzer
from offloadkit.analyzer import (
    CONTEXT_GRID,
    activation_checkpoint_bytes,
    calibrated_presets,
    load_calibration,
    max_batch_under_limit,
    max_context_under_limit,
    overflow_stage_peaks,
    overflow_transient_bytes,
    peak_breakdown,
    policy_for,
)
from offloadkit.errors import InvalidArgument, UncalibratedPreset
from offloadkit.model import load_model_spec

GIB = 2**30
QWEN7 = load_model_spec("qwen2.5-7b")


def next_pow2(n):
    c = 1
    while c < n:
        c <<= 1
    return c


def test_eq1_examples():
    assert activation_checkpoint_bytes(2, 1, 4096, 28, 3584, 2) == 1_644_167_168
    assert activation_checkpoint_bytes(2, 0, 4096, 28, 3584, 2, policy_for("baseline")) == 0
    core = 1_644_167_168
    assert activation_checkpoint_bytes(2, 1, 4096, 28, 3584, 2, policy_for("baseline")) == next_pow2(core)
    assert activation_checkpoint_bytes(2, 1, 4096, 28, 3584, 2, policy_for("optimized")) == -(-core // 4096) * 4096
    with pytest.raises(InvalidArgument):
        activation_checkpoint_bytes(-1, 1, 1, 1, 1)


@given(
    st.integers(1, 8), st.integers(1, 64), st.integers(1, 1 << 17), st.integers(1, 96), st.integers(1, 8192),
    st.sampled_from(["n_g", "batch", "context", "layers", "hidden"]), st.integers(2, 5),
)
def test_eq1_linearity(n_g, b, c, layers, h, which, k):
    args = dict(n_g=n_g, batch=b, context=c, layers=layers, hidden=h)
    base = activation_checkpoint_bytes(**args)
    args[which] *= k
    assert activation_checkpoint_bytes(**args) == k * base


def test_plateaus_vs_strict_growth():
    grid = range(4096, 131072 + 1, 4096)
    base = [peak_breakdown(QWEN7, "baseline", 1, c).peak_total for c in grid]
    opt = [peak_breakdown(QWEN7, "optimized", 1, c).peak_total for c in grid]
    assert all(b1 <= b2 for b1, b2 in zip(base, base[1:]))
    assert any(b1 == b2 for b1, b2 in zip(base, base[1:]))
    assert all(o1 < o2 for o1, o2 in zip(opt, opt[1:]))


@given(st.integers(1, 2**40))
def test_overflow_transient_ratio(flat):
    assert overflow_transient_bytes(flat, "baseline") == flat * 5 // 4
    assert overflow_transient_bytes(flat, "optimized") == 0


def test_overflow_transient_rejects_empty():
    with pytest.raises(InvalidArgument):
        overflow_transient_bytes(0, "baseline")


def test_stage_peaks():
    p = overflow_stage_peaks(4_000_000)
    assert p["inf_stage_total"] == 9_000_000 == 2.25 * 4_000_000
    assert p["inf_stage_extra"] == 5_000_000


def test_qwen7_components_frozen():
    base = peak_breakdown(QWEN7, "baseline")
    opt = peak_breakdown(QWEN7, "optimized")
    # values computed from the tensor inventory by the independent pool oracle
    assert base.param_pool == 9_809_952_768
    assert opt.param_pool == 2_638_741_504
    assert base.grad_flat_buffer == opt.grad_flat_buffer == QWEN7.total_params * 4
    assert base.grad_flat_buffer / GIB == pytest.approx(28.37, abs=0.01)
    assert opt.overflow_transient == 0
    for bd in (base, opt):
        parts = [bd.param_pool, bd.pinned_overhead, bd.grad_flat_buffer, bd.overflow_transient, bd.misc_static,
                 bd.activation_checkpoints]
        assert all(p >= 0 for p in parts) and all(bd.peak_total >= p for p in parts)
        assert bd.peak_total == max(bd.phases.values())
        assert bd.phases["overflow_check"] == sum(parts)


@pytest.mark.parametrize("name", calibrated_presets())
@pytest.mark.parametrize("bc", [(0, 0), (1, 4096), (4, 32768), (16, 131072)])
def test_mode_dominance(name, bc):
    spec = load_model_spec(name)
    b, c = bc
    base = peak_breakdown(spec, "baseline", b, c)
    opt = peak_breakdown(spec, "optimized", b, c)
    assert opt.peak_total <= base.peak_total
    assert base.peak_total - opt.peak_total >= base.pinned_overhead - opt.pinned_overhead


def test_uncalibrated_preset():
    with pytest.raises(UncalibratedPreset):
        peak_breakdown(load_model_spec("qwen2.5-32b"), "baseline")
    assert load_calibration("QWEN2.5-7B").misc_static_bytes > 0


def test_limits_edge_cases(caplog):
    assert max_context_under_limit(QWEN7, math.inf, "optimized") == max(CONTEXT_GRID)
    assert max_batch_under_limit(QWEN7, math.inf, "baseline") == max(analyzer.BATCH_GRID)
    with caplog.at_level(logging.WARNING, logger="offloadkit.analyzer"):
        assert max_context_under_limit(QWEN7, 10 * GIB, "baseline") == 0
    assert "static floor" in caplog.text


def test_limit_search_matches_brute_force():
    limit = 100 * GIB
    for mode in ("baseline", "optimized"):
        fits = [c for c in CONTEXT_GRID if peak_breakdown(QWEN7, mode, 1, c).peak_total <= limit]
        assert max_context_under_limit(QWEN7, limit, mode) == max(fits, default=0)


def test_sweep_rows():
    rows = analyzer.sweep(QWEN7, "batch", ["baseline", "optimized"], 128 * GIB, values=[1, 2, 4])
    assert len(rows) == 6 and {r.mode for r in rows} == {"baseline", "optimized"}
    assert all(r.context_length == 4096 for r in rows)
    with pytest.raises(InvalidArgument):
        analyzer.sweep(QWEN7, "width", ["baseline"], GIB)
