from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from offloadkit.errors import InvalidArgument
from offloadkit.optimizer import (
    BF16_SCHEDULE,
    MIXED_SCHEDULE,
    AdamHyper,
    LossScaler,
    OptimizerState,
    PrecisionMode,
    Transfer,
    TransferSchedule,
    adam_step,
    bf16_from_f32,
    f32_from_bf16,
    io_volume,
    truncate_bf16,
)


def adam_f64(p, g, steps, h: AdamHyper, scale=1.0):
    """Textbook decoupled-decay Adam in double precision."""
    p = p.astype(np.float64)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t in range(1, steps + 1):
        gt = g[t - 1].astype(np.float64) / scale
        m = h.beta1 * m + (1 - h.beta1) * gt
        v = h.beta2 * v + (1 - h.beta2) * gt * gt
        mh = m / (1 - h.beta1**t)
        vh = v / (1 - h.beta2**t)
        p = p - h.lr * mh / (np.sqrt(vh) + h.eps) - h.lr * h.weight_decay * p
    return p


def bf16_scalar(x: float) -> float:
    (bits,) = struct.unpack("<I", struct.pack("<f", x))
    return struct.unpack("<f", struct.pack("<I", bits & 0xFFFF0000))[0]


def test_precision_parse():
    assert PrecisionMode.parse("fp16") is PrecisionMode.MIXED
    assert PrecisionMode.parse("bf16") is PrecisionMode.PURE_BF16
    assert PrecisionMode.parse("pure_bf16") is PrecisionMode.PURE_BF16
    with pytest.raises(ValueError):
        PrecisionMode.parse("fp8")


@given(st.lists(st.floats(width=32, allow_nan=False), min_size=1, max_size=50))
def test_bf16_truncation_matches_struct_oracle(xs):
    arr = np.array(xs, dtype=np.float32)
    assert truncate_bf16(arr).tolist() == [bf16_scalar(x) for x in xs]
    assert np.array_equal(f32_from_bf16(bf16_from_f32(arr)), truncate_bf16(arr))


@pytest.mark.parametrize("wd", [0.0, 0.01])
def test_mixed_adam_tracks_double_reference(wd):
    rng = np.random.default_rng(0)
    h = AdamHyper(lr=1e-2, weight_decay=wd)
    p0 = rng.standard_normal(1000).astype(np.float32)
    grads = [rng.standard_normal(1000).astype(np.float32) * 1024 for _ in range(20)]
    st_ = OptimizerState.zeros_like_params(p0, h)
    for g in grads:
        adam_step(st_, g, 1024.0)
    ref = adam_f64(p0, grads, 20, h, scale=1024.0)
    assert st_.step == 20
    np.testing.assert_allclose(st_.master, ref, rtol=2e-5, atol=2e-6)


def test_bf16_adam_close_to_double():
    rng = np.random.default_rng(1)
    h = AdamHyper(lr=1e-2)
    p0 = rng.standard_normal(500).astype(np.float32)
    grads = [rng.standard_normal(500).astype(np.float32) for _ in range(5)]
    st_ = OptimizerState.zeros_like_params(p0, h, "bf16")
    assert st_.master.dtype == np.uint16
    for g in grads:
        adam_step(st_, g, 1.0)
    ref = adam_f64(truncate_bf16(p0), grads, 5, h)
    np.testing.assert_allclose(f32_from_bf16(st_.master), ref, rtol=3e-2, atol=3e-3)


@pytest.mark.parametrize("mode", ["fp16", "bf16"])
def test_threading_is_bitwise_neutral(mode):
    rng = np.random.default_rng(2)
    p0 = rng.standard_normal(10_001).astype(np.float32)
    a = OptimizerState.zeros_like_params(p0, mode=mode)
    b = OptimizerState.zeros_like_params(p0, mode=mode)
    for _ in range(3):
        g = rng.standard_normal(10_001).astype(np.float32)
        adam_step(a, g, 8.0, threads=1)
        adam_step(b, g, 8.0, threads=4)
    for name in ("master", "m", "v"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_input_validation():
    st_ = OptimizerState.zeros_like_params(np.zeros(4, np.float32))
    with pytest.raises(InvalidArgument):
        adam_step(st_, np.zeros(4, np.float64), 1.0)
    with pytest.raises(InvalidArgument):
        adam_step(st_, np.zeros(5, np.float32), 1.0)
    with pytest.raises(InvalidArgument):
        OptimizerState(np.zeros(4, np.float32), np.zeros(4, np.float32), np.zeros(4, np.float16))
    with pytest.raises(InvalidArgument):
        AdamHyper(beta1=1.0)


def test_loss_scaler_policy():
    s = LossScaler()
    assert s.scale == 65536
    s.update(True)
    assert s.scale == 32768
    for _ in range(1999):
        s.update(False)
    assert s.scale == 32768
    s.update(False)
    assert s.scale == 65536
    tiny = LossScaler(1.0)
    tiny.update(True)
    assert tiny.scale == 1.0


def test_default_schedules():
    assert MIXED_SCHEDULE.bytes_per_param == 28
    assert BF16_SCHEDULE.bytes_per_param == 12
    assert MIXED_SCHEDULE.bytes_by_direction() == {"read": 14, "write": 14}
    vol = io_volume(1000, "bf16")
    assert vol.bytes_per_step == 12_000
    assert vol.reduction == pytest.approx(1 - 12 / 28)
    assert round(vol.reduction * 100, 2) == 57.14
    assert io_volume(1000, "fp16").reduction == 0
    assert io_volume(10, "bf16", schedule=BF16_SCHEDULE, reference=BF16_SCHEDULE).reduction == 0


def test_schedule_validation():
    with pytest.raises(InvalidArgument):
        TransferSchedule(())
    with pytest.raises(InvalidArgument):
        Transfer("x", "sideways", 2)
