"""CPU Adam with decoupled weight decay, dynamic loss scaling and I/O schedules.

The update runs in float32 with a fixed operation order so that any two
callers feeding identical inputs get bitwise identical results. In
``pure_bf16`` mode the optimizer state lives in bfloat16 (stored as uint16
bit patterns) and every float32 intermediate is cut back to bfloat16 by
truncating the low 16 bits.
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument

F32 = np.float32


class PrecisionMode(str, enum.Enum):
    MIXED = "mixed_fp16_fp32master"
    PURE_BF16 = "pure_bf16"

    @classmethod
    def parse(cls, value: "str | PrecisionMode") -> "PrecisionMode":
        if isinstance(value, cls):
            return value
        aliases = {"fp16": cls.MIXED, "mixed": cls.MIXED, "bf16": cls.PURE_BF16}
        return aliases.get(value) or cls(value)


# -- bfloat16 as uint16 bit patterns ---------------------------------------------


def bf16_from_f32(x: np.ndarray) -> np.ndarray:
    """Truncate float32 values to bfloat16 bit patterns."""
    return (np.ascontiguousarray(x, dtype=F32).view(np.uint32) >> 16).astype(np.uint16)


def f32_from_bf16(b: np.ndarray) -> np.ndarray:
    return (np.asarray(b, dtype=np.uint16).astype(np.uint32) << 16).view(F32)


def truncate_bf16(x: np.ndarray) -> np.ndarray:
    """float32 values with the low 16 mantissa bits cleared."""
    return (np.ascontiguousarray(x, dtype=F32).view(np.uint32) & np.uint32(0xFFFF0000)).view(F32)


# -- optimizer ------------------------------------------------------------------


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidArgument("betas must lie in [0, 1)")
        if self.lr < 0 or self.eps <= 0 or self.weight_decay < 0:
            raise InvalidArgument("lr and weight_decay must be >= 0, eps > 0")


@dataclass
class OptimizerState:
    """Parameters and moments for one contiguous subgroup.

    Arrays are float32 in mixed mode and uint16 (bfloat16 bits) in pure_bf16.
    """

    master: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    hyper: AdamHyper = field(default_factory=AdamHyper)
    mode: PrecisionMode = PrecisionMode.MIXED

    def __post_init__(self):
        if not (self.master.shape == self.m.shape == self.v.shape):
            raise InvalidArgument("master, m and v must have equal length")
        want = np.uint16 if self.mode is PrecisionMode.PURE_BF16 else F32
        for name in ("master", "m", "v"):
            if getattr(self, name).dtype != want:
                raise InvalidArgument(f"{name} must be {np.dtype(want).name} in {self.mode.value} mode")

    @classmethod
    def zeros_like_params(cls, params: np.ndarray, hyper: AdamHyper | None = None, mode=PrecisionMode.MIXED):
        mode = PrecisionMode.parse(mode)
        if mode is PrecisionMode.PURE_BF16:
            master = bf16_from_f32(params)
            return cls(master, np.zeros_like(master), np.zeros_like(master), 0, hyper or AdamHyper(), mode)
        master = np.array(params, dtype=F32)
        return cls(master, np.zeros_like(master), np.zeros_like(master), 0, hyper or AdamHyper(), mode)


@dataclass
class LossScaler:
    """Halve on overflow; double after ``growth_interval`` consecutive clean steps."""

    scale: float = 2.0**16
    growth_interval: int = 2000
    clean_steps: int = 0
    min_scale: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise InvalidArgument("loss scale must be > 0")
        if self.growth_interval < 1:
            raise InvalidArgument("growth_interval must be >= 1")

    def update(self, overflow: bool) -> None:
        if overflow:
            self.scale = max(self.scale / 2, self.min_scale)
            self.clean_steps = 0
            return
        self.clean_steps += 1
        if self.clean_steps >= self.growth_interval:
            self.scale *= 2
            self.clean_steps = 0


def _bias_corrections(h: AdamHyper, t: int) -> tuple[np.float32, np.float32]:
    # powers in double, then one rounding to float32
    return F32(1.0 - h.beta1**t), F32(1.0 - h.beta2**t)


def _adam_mixed(p, m, v, g, inv_scale, h: AdamHyper, bc1, bc2):
    b1, b2 = F32(h.beta1), F32(h.beta2)
    g = g * inv_scale
    m[:] = b1 * m + (F32(1) - b1) * g
    v[:] = b2 * v + (F32(1) - b2) * (g * g)
    mhat = m / bc1
    vhat = v / bc2
    upd = mhat / (np.sqrt(vhat) + F32(h.eps))
    lr = F32(h.lr)
    p[:] = (p - lr * upd) - (lr * F32(h.weight_decay)) * p


def _adam_bf16(p16, m16, v16, g, inv_scale, h: AdamHyper, bc1, bc2):
    r = truncate_bf16
    b1, b2 = F32(h.beta1), F32(h.beta2)
    p, m, v = f32_from_bf16(p16), f32_from_bf16(m16), f32_from_bf16(v16)
    g = r(g * inv_scale)
    m = r(r(b1 * m) + r((F32(1) - b1) * g))
    v = r(r(b2 * v) + r((F32(1) - b2) * r(g * g)))
    mhat = r(m / bc1)
    vhat = r(v / bc2)
    upd = r(mhat / r(r(np.sqrt(vhat)) + F32(h.eps)))
    lr = F32(h.lr)
    p = r(r(p - r(lr * upd)) - r(r(lr * F32(h.weight_decay)) * p))
    p16[:] = bf16_from_f32(p)
    m16[:] = bf16_from_f32(m)
    v16[:] = bf16_from_f32(v)


def adam_step(state: OptimizerState, grads: np.ndarray, scaler: LossScaler | float, threads: int = 1) -> OptimizerState:
    """One in-place Adam update of ``state`` with loss-scaled ``grads``.

    ``grads`` must be finite; run the overflow check first. Elementwise work
    is split over ``threads`` disjoint slices, which does not change results.
    """
    grads = np.asarray(grads)
    if grads.dtype != F32:
        raise InvalidArgument(f"gradients must be float32, got {grads.dtype}")
    if grads.shape != state.master.shape:
        raise InvalidArgument(f"gradient length {grads.size} != parameter length {state.master.size}")
    scale = scaler.scale if isinstance(scaler, LossScaler) else float(scaler)
    inv_scale = F32(1.0 / scale)
    t = state.step + 1
    bc1, bc2 = _bias_corrections(state.hyper, t)
    kernel = _adam_bf16 if state.mode is PrecisionMode.PURE_BF16 else _adam_mixed
    n = grads.size
    if threads <= 1 or n < 2 * threads:
        kernel(state.master, state.m, state.v, grads, inv_scale, state.hyper, bc1, bc2)
    else:
        bounds = np.linspace(0, n, threads + 1).astype(int)
        with ThreadPoolExecutor(threads) as ex:
            list(
                ex.map(
                    lambda ab: kernel(
                        state.master[ab[0] : ab[1]], state.m[ab[0] : ab[1]], state.v[ab[0] : ab[1]],
                        grads[ab[0] : ab[1]], inv_scale, state.hyper, bc1, bc2,
                    ),
                    zip(bounds[:-1], bounds[1:]),
                )
            )
    state.step = t
    return state


# -- transfer accounting --------------------------------------------------------


@dataclass(frozen=True)
class Transfer:
    name: str
    direction: str  # "read" or "write"
    bytes_per_element: int

    def __post_init__(self):
        if self.direction not in ("read", "write"):
            raise InvalidArgument(f"direction must be read or write, got {self.direction!r}")
        if self.bytes_per_element < 0:
            raise InvalidArgument("bytes_per_element must be >= 0")


@dataclass(frozen=True)
class TransferSchedule:
    """Per-parameter SSD transfers in one training step."""

    entries: tuple[Transfer, ...]

    def __post_init__(self):
        if not self.entries:
            raise InvalidArgument("transfer schedule is empty")

    @property
    def bytes_per_param(self) -> int:
        return sum(e.bytes_per_element for e in self.entries)

    def bytes_by_direction(self) -> dict[str, int]:
        out = {"read": 0, "write": 0}
        for e in self.entries:
            out[e.direction] += e.bytes_per_element
        return out


MIXED_SCHEDULE = TransferSchedule(
    (
        Transfer("master", "read", 4),
        Transfer("master", "write", 4),
        Transfer("momentum", "read", 4),
        Transfer("momentum", "write", 4),
        Transfer("variance", "read", 4),
        Transfer("variance", "write", 4),
        Transfer("compute_weights", "write", 2),
        Transfer("compute_weights", "read", 2),
    )
)

BF16_SCHEDULE = TransferSchedule(
    (
        Transfer("weights", "read", 2),
        Transfer("weights", "write", 2),
        Transfer("momentum", "read", 2),
        Transfer("momentum", "write", 2),
        Transfer("variance", "read", 2),
        Transfer("variance", "write", 2),
    )
)

DEFAULT_SCHEDULES = {PrecisionMode.MIXED: MIXED_SCHEDULE, PrecisionMode.PURE_BF16: BF16_SCHEDULE}


@dataclass(frozen=True)
class IoVolume:
    bytes_per_step: int
    bytes_per_param: int
    reduction: float  # relative to the mixed-precision schedule


def io_volume(
    params: int,
    precision_mode: PrecisionMode | str,
    schedule: TransferSchedule | None = None,
    reference: TransferSchedule | None = None,
) -> IoVolume:
    """Bytes moved per step for ``params`` parameters, and the saving versus ``reference``."""
    mode = PrecisionMode.parse(precision_mode)
    schedule = schedule or DEFAULT_SCHEDULES[mode]
    reference = reference or MIXED_SCHEDULE
    if params < 0:
        raise InvalidArgument("params must be >= 0")
    per = schedule.bytes_per_param
    return IoVolume(params * per, per, 1.0 - per / reference.bytes_per_param)
