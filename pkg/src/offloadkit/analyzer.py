"""Analytic host-memory planner for SSD-offloaded training.

Peak DRAM is modeled as a set of static components plus activation
checkpoints, summed per phase:

* prefetch / optimizer: parameter pool, pinned rounding overhead, fp32 flat
  gradient buffer, miscellaneous static state, activation checkpoints
* overflow check: the same plus the transient of the overflow scan

``baseline`` uses the monolithic pool, power-of-two pinned sizing and the
tensor-op overflow check; ``optimized`` uses the adaptive pool,
page-aligned sizing and the fused scan.

Activation checkpoints held in host memory follow::

    bytes = N_g * B * C * L * H * bytes_per_element + P_m

with ``P_m`` the pinned rounding overhead of that buffer under the mode's
allocation policy.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from importlib import resources
from typing import Sequence

from .errors import InvalidArgument, UncalibratedPreset
from .model import ModelSpec, Precision, enumerate_offload_tensors
from .pinned import AllocationPolicy, overhead_bytes
from .pool import PoolMode, pool_capacity

log = logging.getLogger(__name__)

GIB = 2**30
CONTEXT_GRID = tuple(2**k for k in range(12, 18))  # 4096 .. 131072
BATCH_GRID = tuple(2**k for k in range(0, 11))  # 1 .. 1024


class Mode(str, enum.Enum):
    BASELINE = "baseline"
    OPTIMIZED = "optimized"


def policy_for(mode: Mode | str) -> AllocationPolicy:
    if Mode(mode) is Mode.BASELINE:
        return AllocationPolicy.power_of_two(4096)
    return AllocationPolicy.alignment_free(4096)


def activation_checkpoint_bytes(
    n_g: int,
    batch: int,
    context: int,
    layers: int,
    hidden: int,
    element_bytes: int = 2,
    policy: AllocationPolicy | None = None,
) -> int:
    """Host bytes for activation checkpoints, including pinned rounding.

    >>> activation_checkpoint_bytes(2, 1, 4096, 28, 3584, 2)
    1644167168
    """
    for name, v in (("n_g", n_g), ("batch", batch), ("context", context), ("layers", layers),
                    ("hidden", hidden), ("element_bytes", element_bytes)):
        if v < 0:
            raise InvalidArgument(f"{name} must be >= 0, got {v}")
    core = n_g * batch * context * layers * hidden * element_bytes
    if core == 0 or policy is None:
        return core
    return core + overhead_bytes(core, policy)


def overflow_transient_bytes(flat_buffer_bytes: int, mode: Mode | str) -> int:
    """Extra memory the overflow check needs on top of the flat buffer."""
    if flat_buffer_bytes <= 0:
        raise InvalidArgument("flat buffer size must be > 0")
    if Mode(mode) is Mode.OPTIMIZED:
        return 0
    # abs copy (4 B/elem) plus an is-inf mask (1 B/elem): 1.25x the fp32 input
    return flat_buffer_bytes * 5 // 4


def overflow_stage_peaks(flat_buffer_bytes: int) -> dict[str, int]:
    """Per-stage memory of the tensor-op overflow check, with and without the input."""
    n = flat_buffer_bytes // 4
    return {
        "inf_stage_extra": 5 * n,
        "inf_stage_total": flat_buffer_bytes + 5 * n,
        "nan_stage_extra": n,
        "nan_stage_total": flat_buffer_bytes + n,
    }


@dataclass(frozen=True)
class Calibration:
    name: str
    inflight_blocks: int
    pool_partition_ranks: int
    pinned_residual_bytes: dict
    misc_static_bytes: int
    provenance: str


@lru_cache(maxsize=1)
def _calibrations() -> dict:
    return json.loads(resources.files("offloadkit").joinpath("data/calibration.json").read_text())


def calibrated_presets() -> list[str]:
    return sorted(_calibrations())


def load_calibration(spec: ModelSpec | str) -> Calibration:
    name = spec if isinstance(spec, str) else spec.name
    key = name.lower()
    data = _calibrations().get(key)
    if data is None:
        raise UncalibratedPreset(
            f"no calibration for {name!r}; calibrated presets: {', '.join(calibrated_presets())}"
        )
    return Calibration(name=key, **data)


@dataclass
class MemoryBreakdown:
    mode: str
    param_pool: int
    pinned_overhead: int
    grad_flat_buffer: int
    overflow_transient: int
    misc_static: int
    activation_checkpoints: int
    phases: dict
    peak_total: int

    def gib(self) -> dict:
        return {k: (v / GIB if isinstance(v, int) else v) for k, v in asdict(self).items() if k != "phases"} | {
            "phases": {k: v / GIB for k, v in self.phases.items()}
        }

    @property
    def static_floor(self) -> int:
        return self.peak_total - self.activation_checkpoints


def peak_breakdown(
    spec: ModelSpec,
    mode: Mode | str,
    batch: int = 0,
    context: int = 0,
    calibration: Calibration | None = None,
    precision: Precision | None = None,
    inflight_blocks: int | None = None,
) -> MemoryBreakdown:
    """Peak host memory by component for one rank-set on one host."""
    mode = Mode(mode)
    cal = calibration or load_calibration(spec)
    n = inflight_blocks or cal.inflight_blocks
    inventory = enumerate_offload_tensors(spec, cal.pool_partition_ranks)
    pool_mode = PoolMode.MONOLITHIC if mode is Mode.BASELINE else PoolMode.ADAPTIVE
    pool = pool_capacity(inventory, pool_mode, n)
    flat = spec.total_params * 4
    policy = policy_for(mode)
    pinned = overhead_bytes(pool, policy) + overhead_bytes(flat, policy) + int(cal.pinned_residual_bytes[mode.value])
    transient = overflow_transient_bytes(flat, mode)
    elem = (precision or spec.precision).bytes_per_element
    act = activation_checkpoint_bytes(spec.ranks, batch, context, spec.layers, spec.hidden, elem, policy)
    steady = pool + pinned + flat + cal.misc_static_bytes + act
    phases = {"prefetch": steady, "overflow_check": steady + transient, "optimizer": steady}
    return MemoryBreakdown(
        mode=mode.value,
        param_pool=pool,
        pinned_overhead=pinned,
        grad_flat_buffer=flat,
        overflow_transient=transient,
        misc_static=cal.misc_static_bytes,
        activation_checkpoints=act,
        phases=phases,
        peak_total=max(phases.values()),
    )


def _largest_fitting(values: Sequence[int], fits) -> int:
    best = 0
    for v in sorted(values):
        if fits(v):
            best = v
        else:
            break  # peak is monotone in the swept variable
    return best


def max_context_under_limit(
    spec: ModelSpec,
    dram_limit: float,
    mode: Mode | str,
    batch: int = 1,
    grid: Sequence[int] = CONTEXT_GRID,
) -> int:
    """Largest context in ``grid`` whose peak fits ``dram_limit`` bytes; 0 if none."""
    floor = peak_breakdown(spec, mode).peak_total
    if dram_limit < floor:
        log.warning("limit %.2f GiB is below the %s static floor %.2f GiB", dram_limit / GIB, Mode(mode).value, floor / GIB)
        return 0
    if math.isinf(dram_limit):
        return max(grid)
    return _largest_fitting(grid, lambda c: peak_breakdown(spec, mode, batch, c).peak_total <= dram_limit)


def max_batch_under_limit(
    spec: ModelSpec,
    dram_limit: float,
    mode: Mode | str,
    context: int = 4096,
    grid: Sequence[int] = BATCH_GRID,
) -> int:
    """Largest batch in ``grid`` (powers of two by default) whose peak fits; 0 if none."""
    floor = peak_breakdown(spec, mode).peak_total
    if dram_limit < floor:
        log.warning("limit %.2f GiB is below the %s static floor %.2f GiB", dram_limit / GIB, Mode(mode).value, floor / GIB)
        return 0
    if math.isinf(dram_limit):
        return max(grid)
    return _largest_fitting(grid, lambda b: peak_breakdown(spec, mode, b, context).peak_total <= dram_limit)


@dataclass
class SweepRow:
    sweep: str
    mode: str
    context_length: int
    batch_size: int
    activation_gib: float
    peak_gib: float
    fits: bool


def sweep(
    spec: ModelSpec,
    kind: str,
    modes: Sequence[Mode | str],
    dram_limit: float,
    values: Sequence[int] | None = None,
    batch: int = 1,
    context: int = 4096,
) -> list[SweepRow]:
    """Peak memory over a context or batch sweep for each mode."""
    if kind not in ("context", "batch"):
        raise InvalidArgument(f"sweep must be context or batch, got {kind!r}")
    values = values or (CONTEXT_GRID if kind == "context" else BATCH_GRID)
    rows = []
    for mode in modes:
        mode = Mode(mode)
        for v in values:
            b, c = (batch, v) if kind == "context" else (v, context)
            bd = peak_breakdown(spec, mode, b, c)
            rows.append(
                SweepRow(kind, mode.value, c, b, bd.activation_checkpoints / GIB, bd.peak_total / GIB,
                         bd.peak_total <= dram_limit)
            )
    return rows


def predicted_host_buffers(spec: ModelSpec, inflight_blocks: int, mode: PoolMode | str = PoolMode.ADAPTIVE) -> dict:
    """Pool and flat-buffer bytes the simulator should allocate for ``spec``."""
    inventory = enumerate_offload_tensors(spec)
    return {
        "pool_capacity_bytes": pool_capacity(inventory, mode, inflight_blocks),
        "flat_buffer_bytes": sum(t.numel for t in inventory) * 4,
    }
