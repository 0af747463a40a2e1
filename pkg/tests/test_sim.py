from __future__ import annotations

import numpy as np
import pytest

from offloadkit.analyzer import predicted_host_buffers
from offloadkit.errors import InvalidArgument
from offloadkit.model import enumerate_offload_tensors, load_model_spec
from offloadkit.optimizer import DEFAULT_SCHEDULES, PrecisionMode
from offloadkit.sim import (
    Layout,
    SimConfig,
    pseudo_gradient,
    reference_training,
    report_json,
    run_training,
    weight_digest,
)


def cfg(workdir, **kw):
    kw.setdefault("steps", 6)
    return SimConfig(workdir=str(workdir), **kw)


@pytest.mark.parametrize("mode", ["fp16", "bf16"])
def test_offloaded_equals_reference(workdir, mode):
    c = cfg(workdir, precision_mode=mode, seed=3, fault_injection=(2,))
    rep, master = run_training(c, return_master=True)
    ref = reference_training(c)
    assert np.array_equal(master.view(np.uint32), ref.master.view(np.uint32))
    assert rep.weight_digest == weight_digest(ref.master)
    assert [e["step"] for e in rep.overflow_events] == ref.overflow_steps == [2]


def test_overflow_skips_update_and_halves_scale(workdir):
    c = cfg(workdir, steps=4, fault_injection=(3,), seed=1)
    ref = reference_training(c, keep_history=True)
    assert np.array_equal(ref.history[2], ref.history[3])
    assert not np.array_equal(ref.history[3], ref.history[4])
    assert ref.scales == [65536, 65536, 32768, 32768]
    rep = run_training(c)
    assert rep.overflow_events == [{"step": 3, "scale_before": 65536.0, "scale_after": 32768.0}]
    assert rep.final_loss_scale == 32768


def test_scale_grows_after_clean_interval(workdir):
    c = cfg(workdir, steps=5, fault_injection=(1,), growth_interval=2)
    rep = run_training(c)
    assert rep.final_loss_scale == 65536 * 2  # halved once, then doubled twice
    assert reference_training(c).scales == [32768, 32768, 65536, 65536, 131072]


@pytest.mark.parametrize("mode", ["fp16", "bf16"])
def test_io_matches_schedule(workdir, mode):
    c = cfg(workdir, precision_mode=mode, steps=3, fault_injection=(2,))
    rep = run_training(c)
    params = sum(t.numel for t in enumerate_offload_tensors(c.spec))
    expected = DEFAULT_SCHEDULES[PrecisionMode.parse(mode)].bytes_per_param * params
    assert rep.io["schedule_bytes_per_step"] == expected
    clean = [b for i, b in enumerate(rep.io["per_step_logical_bytes"], 1) if i != 2]
    assert clean == [expected, expected]
    assert rep.io["padded_bytes_read"] % 4096 == 0 and rep.io["padded_bytes_written"] % 4096 == 0


def test_pool_fragmentation_small(workdir):
    rep = run_training(cfg(workdir, steps=2))
    assert rep.pool["fragmentation"] < 0.02
    assert rep.pool["checkout_count"] == rep.pool["checkin_count"]


@pytest.mark.parametrize("model", ["toy-dense", "toy-aligned", "toy-moe"])
def test_analyzer_predicts_simulator_buffers(workdir, model):
    c = cfg(workdir, model=model, steps=1, inflight_blocks=2)
    rep = run_training(c)
    pred = predicted_host_buffers(load_model_spec(model), 2)
    assert abs(rep.memory["pool_capacity_bytes"] - pred["pool_capacity_bytes"]) < 4096
    assert abs(rep.memory["flat_buffer_bytes"] - pred["flat_buffer_bytes"]) < 4096


def test_peak_monotone_in_batch_and_context(workdir):
    peaks = {}
    for b, ctx in [(1, 16), (2, 16), (2, 64), (4, 64)]:
        peaks[(b, ctx)] = run_training(cfg(workdir, steps=1, batch=b, context=ctx)).memory["peak_host_bytes"]
    assert peaks[(1, 16)] <= peaks[(2, 16)] <= peaks[(2, 64)] <= peaks[(4, 64)]
    assert peaks[(1, 16)] < peaks[(4, 64)]


def test_seed_determinism_and_worker_independence(workdir):
    a = run_training(cfg(workdir, seed=7, steps=3))
    b = run_training(cfg(workdir, seed=7, steps=3, workers=1, inflight_blocks=1, optimizer_threads=3))
    c = run_training(cfg(workdir, seed=8, steps=3))
    assert a.weight_digest == b.weight_digest != c.weight_digest
    assert report_json(a, with_timings=False) == report_json(run_training(cfg(workdir, seed=7, steps=3)), False)


def test_zero_steps(workdir):
    rep, master = run_training(cfg(workdir, steps=0), return_master=True)
    assert rep.io.get("logical_bytes_written", 0) == 0
    assert rep.weight_digest == weight_digest(master)


def test_config_validation():
    with pytest.raises(InvalidArgument):
        SimConfig(steps=-1)
    with pytest.raises(InvalidArgument):
        SimConfig(inflight_blocks=0)


def test_pseudo_gradient_is_slice_consistent():
    layout = Layout(enumerate_offload_tensors(load_model_spec("toy-dense")))
    w = np.linspace(-1, 1, layout.total, dtype=np.float32)
    whole = pseudo_gradient(w, 4, 9, 0, 1024.0)
    part = pseudo_gradient(w[100:500], 4, 9, 100, 1024.0)
    assert whole.dtype == np.float16
    assert np.array_equal(whole[100:500], part)
