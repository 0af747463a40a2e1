"""Deterministic offloaded training-step simulator.

One step runs the same pipeline as an SSD-offloaded trainer:

1. prefetch: a producer thread checks out pool buffers and reads compute
   weights block by block, staying up to ``inflight_blocks`` blocks ahead;
   the embedding and LM head are held for the whole step.
2. gradients: a pseudo-gradient stands in for forward/backward. It is cast
   to fp16 after loss scaling, as a GPU would produce it, and accumulated
   into the fp32 flat buffer.
3. check: one fused overflow scan over the flat buffer.
4. optimizer: for every subgroup (one transformer block by default) the
   master weights and moments are swapped in, updated with Adam and swapped
   out; fresh compute weights are written back.

The pseudo-gradient for element ``i`` of the model at step ``s`` is::

    noise = 2 * u(seed, s, i) - 1           # u in [0, 1) from a counter hash
    g     = (noise + 0.5 * w_i) * 1e-3      # float32
    grad  = fp16(g * loss_scale)

where ``w_i`` is the element's compute-precision weight.
"""

from __future__ import annotations

import hashlib
import json
import os
import queue
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .directio import DeviceSet, DirectEngine, pad
from .errors import InvalidArgument, SimulationError
from .model import ModelSpec, TensorDescriptor, enumerate_offload_tensors, load_model_spec
from .optimizer import (
    DEFAULT_SCHEDULES,
    AdamHyper,
    LossScaler,
    OptimizerState,
    PrecisionMode,
    adam_step,
    bf16_from_f32,
    f32_from_bf16,
)
from .overflow import GradFlatBuffer, ScanConfig, fused_overflow_check
from .pinned import AllocationPolicy, PinnedAllocator
from .pool import BufferPool, PoolConfig, PoolMode

GRAD_SCALE = np.float32(1e-3)
WEIGHT_MIX = np.float32(0.5)
INIT_STD = np.float32(0.02)


@dataclass
class SimConfig:
    model: ModelSpec | str = "toy-dense"
    steps: int = 10
    inflight_blocks: int = 2
    precision_mode: PrecisionMode | str = PrecisionMode.MIXED
    seed: int = 0
    hyper: AdamHyper = field(default_factory=AdamHyper)
    fault_injection: tuple[int, ...] = ()  # steps (1-based) whose gradient gets a +inf
    init_scale: float = 2.0**16
    growth_interval: int = 2000
    batch: int = 1
    context: int = 16
    pool_mode: PoolMode | str = PoolMode.ADAPTIVE
    pinned_policy: AllocationPolicy = field(default_factory=AllocationPolicy.alignment_free)
    devices: int = 2
    workers: int = 2
    queue_depth: int = 4
    workdir: str | None = None
    device_paths: tuple[str, ...] = ()
    scan: ScanConfig = field(default_factory=lambda: ScanConfig(worker_count=2, chunk_bytes=1 << 16))
    optimizer_threads: int = 1

    def __post_init__(self):
        self.precision_mode = PrecisionMode.parse(self.precision_mode)
        self.pool_mode = PoolMode(self.pool_mode)
        self.fault_injection = tuple(sorted(set(int(s) for s in self.fault_injection)))
        if self.steps < 0:
            raise InvalidArgument("steps must be >= 0")
        if self.inflight_blocks < 1:
            raise InvalidArgument("inflight_blocks must be >= 1")
        if self.batch < 0 or self.context < 0:
            raise InvalidArgument("batch and context must be >= 0")

    @property
    def spec(self) -> ModelSpec:
        return self.model if isinstance(self.model, ModelSpec) else load_model_spec(self.model)


@dataclass
class SimReport:
    model: str
    precision_mode: str
    seed: int
    steps: int
    params: int
    weight_digest: str
    final_loss_scale: float
    overflow_events: list[dict] = field(default_factory=list)
    io: dict = field(default_factory=dict)
    memory: dict = field(default_factory=dict)
    pool: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def to_dict(self, with_timings: bool = True) -> dict:
        d = asdict(self)
        if not with_timings:
            d.pop("timings")
            d["pool"].pop("blocked_time_s", None)
        return d


# -- model layout ---------------------------------------------------------------


@dataclass(frozen=True)
class Subgroup:
    name: str
    start: int
    stop: int
    tensors: tuple[str, ...]

    @property
    def size(self) -> int:
        return self.stop - self.start


class Layout:
    """Flat element order of a toy model and its optimizer subgroups."""

    def __init__(self, inventory: list[TensorDescriptor]):
        self.inventory = inventory
        self.offsets: dict[str, tuple[int, int]] = {}
        pos = 0
        for t in inventory:
            self.offsets[t.name] = (pos, pos + t.numel)
            pos += t.numel
        self.total = pos
        groups: list[Subgroup] = []
        current: list[TensorDescriptor] = []

        def close():
            if current:
                a = self.offsets[current[0].name][0]
                b = self.offsets[current[-1].name][1]
                label = current[0].name if current[0].layer is None else f"block{current[0].layer}"
                groups.append(Subgroup(label, a, b, tuple(t.name for t in current)))

        for t in inventory:
            if current and (t.layer != current[-1].layer or t.layer is None):
                close()
                current = []
            current.append(t)
        close()
        self.subgroups = groups
        # streaming order: embedding, blocks in order, head
        self.standalone = [t for t in inventory if t.layer is None]
        layers = sorted({t.layer for t in inventory if t.layer is not None})
        self.blocks = [[t for t in inventory if t.layer == i] for i in layers]


def _hash_uniform(seed: int, step: int, idx: np.ndarray) -> np.ndarray:
    """Counter-based uniform floats in [0, 1) (splitmix64 finalizer)."""
    with np.errstate(over="ignore"):
        x = idx.astype(np.uint64) + np.uint64((seed * 0x9E3779B97F4A7C15 + step * 0xBF58476D1CE4E5B9) % 2**64)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return (x >> np.uint64(40)).astype(np.float32) * np.float32(2.0**-24)


def pseudo_gradient(weights: np.ndarray, step: int, seed: int, start: int, scale: float) -> np.ndarray:
    """Loss-scaled fp16 gradient for a contiguous slice starting at flat index ``start``."""
    idx = np.arange(start, start + weights.size, dtype=np.uint64)
    noise = np.float32(2) * _hash_uniform(seed, step, idx) - np.float32(1)
    g = (noise + WEIGHT_MIX * weights.astype(np.float32)) * GRAD_SCALE
    return (g * np.float32(scale)).astype(np.float16)


def initial_weights(layout: Layout, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return (rng.standard_normal(layout.total, dtype=np.float32) * INIT_STD).astype(np.float32)


def weight_digest(master: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(master).tobytes()).hexdigest()


# -- in-memory reference ----------------------------------------------------------


@dataclass
class ReferenceResult:
    master: np.ndarray  # float32 view of the final master weights
    history: list[np.ndarray]  # master after every step (index 0 = initial)
    scales: list[float]
    overflow_steps: list[int]


def reference_training(cfg: SimConfig, keep_history: bool = False) -> ReferenceResult:
    """Same arithmetic as :func:`run_training`, everything held in memory."""
    spec = cfg.spec
    layout = Layout(enumerate_offload_tensors(spec))
    mode = cfg.precision_mode
    init = initial_weights(layout, cfg.seed)
    states = [
        OptimizerState.zeros_like_params(init[sg.start : sg.stop], cfg.hyper, mode) for sg in layout.subgroups
    ]
    scaler = LossScaler(cfg.init_scale, cfg.growth_interval)

    def master_f32():
        parts = [s.master if mode is PrecisionMode.MIXED else f32_from_bf16(s.master) for s in states]
        return np.concatenate(parts).astype(np.float32)

    history = [master_f32()] if keep_history else []
    scales = []
    overflow_steps = []
    for step in range(1, cfg.steps + 1):
        cur = master_f32()
        compute = cur.astype(np.float16) if mode is PrecisionMode.MIXED else truncate_to_bf16_f32(cur)
        flat = np.zeros(layout.total, dtype=np.float32)
        flat += pseudo_gradient(compute, step, cfg.seed, 0, scaler.scale).astype(np.float32)
        if step in cfg.fault_injection:
            flat[0] = np.inf
        overflow = not bool(np.all(np.isfinite(flat)))
        if overflow:
            overflow_steps.append(step)
        else:
            for sg, st in zip(layout.subgroups, states):
                adam_step(st, flat[sg.start : sg.stop], scaler)
        scaler.update(overflow)
        scales.append(scaler.scale)
        if keep_history:
            history.append(master_f32())
    return ReferenceResult(master_f32(), history, scales, overflow_steps)


def truncate_to_bf16_f32(x: np.ndarray) -> np.ndarray:
    return f32_from_bf16(bf16_from_f32(x))


# -- offloaded run ------------------------------------------------------------------


class _Prefetcher(threading.Thread):
    """Streams blocks into the pool ahead of the consumer.

    Puts ``(block_index, [(tensor, handle), ...])`` on ``out``; ``None`` ends the step.
    """

    def __init__(self, sim: "_Simulation", out: queue.Queue):
        super().__init__(name="prefetch", daemon=True)
        self.sim = sim
        self.out = out
        self.error: BaseException | None = None

    def run(self):
        try:
            for bi, block in enumerate(self.sim.layout.blocks):
                self.out.put((bi, [(t, self.sim.stage(t)) for t in block]))
        except BaseException as e:  # surfaced by the consumer
            self.error = e
        finally:
            self.out.put(None)


class _Simulation:
    def __init__(self, cfg: SimConfig, workdir: Path):
        self.cfg = cfg
        self.mode = cfg.precision_mode
        self.spec = cfg.spec
        self.inventory = enumerate_offload_tensors(self.spec)
        self.layout = Layout(self.inventory)
        self.allocator = PinnedAllocator(name="sim.pinned")
        self.pool = BufferPool(
            self.inventory,
            PoolConfig(mode=cfg.pool_mode, inflight_blocks=cfg.inflight_blocks, blocking=True),
            allocator=self.allocator,
        )
        self.flat = GradFlatBuffer(self.layout.total, self.allocator)
        largest = max(sg.size for sg in self.layout.subgroups)
        esize = 2 if self.mode is PrecisionMode.PURE_BF16 else 4
        # swap-in buffers for master, m, v of one subgroup, plus a compute-weight staging buffer
        self.swap = [self.allocator.allocate(pad(largest * esize)) for _ in range(3)]
        self.shadow = self.allocator.allocate(pad(max(t.numel for t in self.inventory) * 2))
        act = cfg.batch * cfg.context * self.spec.layers * self.spec.hidden * 2
        self.activations = self.allocator.allocate(act, cfg.pinned_policy) if act > 0 else None
        self.scaler = LossScaler(cfg.init_scale, cfg.growth_interval)
        self.devset, self.engine = self._open_storage(workdir)
        self.host_bf16: np.ndarray | None = None
        self.updates_done = 0  # Adam step count, advanced on clean steps only
        self.timings = {"prefetch_wait_s": 0.0, "gradient_s": 0.0, "check_s": 0.0, "optimizer_s": 0.0}

    def _open_storage(self, workdir: Path):
        per_tensor = sum(pad(-(-t.nbytes // self.cfg.devices)) for t in self.inventory)
        per_group = sum(3 * pad(-(-sg.size * 4 // self.cfg.devices)) for sg in self.layout.subgroups)
        size = pad(2 * (per_tensor + per_group) + (1 << 20))
        if self.cfg.device_paths:
            devset = DeviceSet.from_paths(self.cfg.device_paths, size)
        else:
            devset = DeviceSet.virtual(workdir, self.cfg.devices, size)
        engine = DirectEngine(devset, self.cfg.workers, self.cfg.queue_depth)
        return devset, engine

    def close(self):
        self.engine.close()
        self.devset.close()
        self.pool.close()
        self.flat.release()
        for r in self.swap + [self.shadow] + ([self.activations] if self.activations else []):
            self.allocator.release(r)

    # -- setup ------------------------------------------------------------------

    def initialise(self):
        init = initial_weights(self.layout, self.cfg.seed)
        for sg in self.layout.subgroups:
            values = init[sg.start : sg.stop]
            if self.mode is PrecisionMode.MIXED:
                self._put(f"master/{sg.name}", self.swap[0], values.astype(np.float32))
                zeros = np.zeros(sg.size, np.float32)
                for i, k in ((1, "m"), (2, "v")):
                    self._put(f"{k}/{sg.name}", self.swap[i], zeros)
                self._write_compute(sg, values)
            else:
                bits = bf16_from_f32(values)
                self._put(f"param/{sg.name}", self.swap[0], bits)
                zeros = np.zeros(sg.size, np.uint16)
                for i, k in ((1, "m"), (2, "v")):
                    self._put(f"{k}/{sg.name}", self.swap[i], zeros)
        if self.mode is PrecisionMode.PURE_BF16:
            self.host_bf16 = bf16_from_f32(init)

    def _put(self, key: str, region, values: np.ndarray):
        view = region.bytes_view(0, values.nbytes)
        view[:] = values.view(np.uint8)
        self.engine.write_tensor(key, region.bytes_view(0, pad(values.nbytes)), values.nbytes)

    def _get(self, key: str, region, count: int, dtype) -> np.ndarray:
        nbytes = count * np.dtype(dtype).itemsize
        self.engine.read_tensor(key, region.bytes_view(0, pad(nbytes)))
        return region.as_array(dtype, count)

    def _write_compute(self, sg: Subgroup, master_f32: np.ndarray):
        # one key per tensor so the prefetcher reads exactly one tensor at a time
        for name in sg.tensors:
            a, b = self.layout.offsets[name]
            self.shadow.as_array(np.float16, b - a)[:] = master_f32[a - sg.start : b - sg.start].astype(np.float16)
            n = (b - a) * 2
            self.engine.write_tensor(f"w16/{name}", self.shadow.bytes_view(0, pad(n)), n)

    # -- per step ---------------------------------------------------------------

    def stage(self, t: TensorDescriptor):
        h = self.pool.checkout(t.name, t.nbytes)
        if self.mode is PrecisionMode.MIXED:
            self.engine.read_tensor(f"w16/{t.name}", self.pool.view(h, padded=True))
        else:
            a, b = self.layout.offsets[t.name]
            self.pool.view(h)[:] = self.host_bf16[a:b].view(np.uint8)
        return h

    def _weights_of(self, t: TensorDescriptor, h) -> np.ndarray:
        raw = self.pool.view(h)
        if self.mode is PrecisionMode.MIXED:
            return raw.view(np.float16).astype(np.float32)
        return f32_from_bf16(raw.view(np.uint16))

    def _accumulate(self, t: TensorDescriptor, h, step: int):
        a, b = self.layout.offsets[t.name]
        g = pseudo_gradient(self._weights_of(t, h), step, self.cfg.seed, a, self.scaler.scale)
        self.flat.values[a:b] += g.astype(np.float32)

    def run_step(self, step: int) -> bool:
        self.flat.zero_()
        held = [(t, self.stage(t)) for t in self.layout.standalone]
        q: queue.Queue = queue.Queue()
        producer = _Prefetcher(self, q)
        producer.start()
        staged = []
        done = False
        n_blocks = len(self.layout.blocks)
        consumed = 0
        try:
            while consumed < n_blocks:
                # start on a block only once the prefetch window is full
                want = min(self.cfg.inflight_blocks, n_blocks - consumed)
                wait0 = time.perf_counter()
                while len(staged) < want and not done:
                    item = q.get()
                    if item is None:
                        done = True
                    else:
                        staged.append(item)
                self.timings["prefetch_wait_s"] += time.perf_counter() - wait0
                if producer.error is not None:
                    raise producer.error
                if not staged:
                    raise SimulationError(f"step {step}: prefetch ended early")
                _, handles = staged.pop(0)
                g0 = time.perf_counter()
                for t, h in handles:
                    self._accumulate(t, h, step)
                    self.pool.checkin(h)
                self.timings["gradient_s"] += time.perf_counter() - g0
                consumed += 1
            for t, h in held:
                self._accumulate(t, h, step)
        finally:
            for t, h in held:
                self.pool.checkin(h)
            for _, handles in staged:
                for _, h in handles:
                    self.pool.checkin(h)
            producer.join()
        if producer.error is not None:
            raise producer.error

        if step in self.cfg.fault_injection:
            self.flat.values[0] = np.inf
        c0 = time.perf_counter()
        overflow = fused_overflow_check(self.flat, self.cfg.scan).overflow
        self.timings["check_s"] += time.perf_counter() - c0
        if not overflow:
            o0 = time.perf_counter()
            for sg in self.layout.subgroups:
                self._optimize(sg)
            self.updates_done += 1
            self.timings["optimizer_s"] += time.perf_counter() - o0
        self.scaler.update(overflow)
        return overflow

    def _optimize(self, sg: Subgroup):
        n = sg.size
        grads = self.flat.values[sg.start : sg.stop]
        if self.mode is PrecisionMode.MIXED:
            p = self._get(f"master/{sg.name}", self.swap[0], n, np.float32)
            m = self._get(f"m/{sg.name}", self.swap[1], n, np.float32)
            v = self._get(f"v/{sg.name}", self.swap[2], n, np.float32)
            st = OptimizerState(p, m, v, self.updates_done, self.cfg.hyper, self.mode)
            adam_step(st, grads, self.scaler, self.cfg.optimizer_threads)
            for key, region, arr in ((f"master/{sg.name}", self.swap[0], p), (f"m/{sg.name}", self.swap[1], m),
                                     (f"v/{sg.name}", self.swap[2], v)):
                self.engine.write_tensor(key, region.bytes_view(0, pad(arr.nbytes)), arr.nbytes)
            self._write_compute(sg, p)
        else:
            p = self._get(f"param/{sg.name}", self.swap[0], n, np.uint16)
            m = self._get(f"m/{sg.name}", self.swap[1], n, np.uint16)
            v = self._get(f"v/{sg.name}", self.swap[2], n, np.uint16)
            st = OptimizerState(p, m, v, self.updates_done, self.cfg.hyper, self.mode)
            adam_step(st, grads, self.scaler, self.cfg.optimizer_threads)
            for key, region, arr in ((f"param/{sg.name}", self.swap[0], p), (f"m/{sg.name}", self.swap[1], m),
                                     (f"v/{sg.name}", self.swap[2], v)):
                self.engine.write_tensor(key, region.bytes_view(0, pad(arr.nbytes)), arr.nbytes)
            self.host_bf16[sg.start : sg.stop] = p

    def master_f32(self) -> np.ndarray:
        parts = []
        for sg in self.layout.subgroups:
            if self.mode is PrecisionMode.MIXED:
                parts.append(self._get(f"master/{sg.name}", self.swap[0], sg.size, np.float32).copy())
            else:
                parts.append(f32_from_bf16(self._get(f"param/{sg.name}", self.swap[0], sg.size, np.uint16)))
        return np.concatenate(parts).astype(np.float32)


def _empty_report(cfg: SimConfig) -> SimReport:
    spec = cfg.spec
    layout = Layout(enumerate_offload_tensors(spec))
    init = initial_weights(layout, cfg.seed)
    if cfg.precision_mode is PrecisionMode.PURE_BF16:
        init = truncate_to_bf16_f32(init)
    return SimReport(
        model=spec.name,
        precision_mode=cfg.precision_mode.value,
        seed=cfg.seed,
        steps=0,
        params=layout.total,
        weight_digest=weight_digest(init),
        final_loss_scale=cfg.init_scale,
        io={"logical_bytes_read": 0, "logical_bytes_written": 0, "padded_bytes_read": 0,
            "padded_bytes_written": 0, "per_step_logical_bytes": [], "bytes_per_clean_step": 0,
            "schedule_bytes_per_step": 0, "io_requests": 0},
        memory={"peak_host_bytes": 0},
        timings={"total_s": 0.0},
    )


def run_training(cfg: SimConfig, return_master: bool = False):
    """Run ``cfg.steps`` offloaded steps. Returns a :class:`SimReport`
    (and the final float32 master weights when ``return_master``)."""
    if cfg.steps == 0:
        rep = _empty_report(cfg)
        if return_master:
            layout = Layout(enumerate_offload_tensors(cfg.spec))
            init = initial_weights(layout, cfg.seed)
            if cfg.precision_mode is PrecisionMode.PURE_BF16:
                init = truncate_to_bf16_f32(init)
            return rep, init
        return rep
    t_start = time.perf_counter()
    base = cfg.workdir or os.environ.get("OFFLOADKIT_WORKDIR")
    with tempfile.TemporaryDirectory(prefix="offloadkit-sim-", dir=base) as tmp:
        sim = _Simulation(cfg, Path(tmp))
        try:
            sim.initialise()
            setup = sim.engine.stats.to_dict()
            events = []
            per_step = []
            for step in range(1, cfg.steps + 1):
                before = sim.scaler.scale
                s0 = sim.engine.stats.to_dict()
                try:
                    overflow = sim.run_step(step)
                except Exception as e:
                    raise SimulationError(f"step {step}: {e}") from e
                s1 = sim.engine.stats.to_dict()
                per_step.append(
                    s1["logical_bytes_read"] + s1["logical_bytes_written"]
                    - s0["logical_bytes_read"] - s0["logical_bytes_written"]
                )
                if overflow:
                    events.append({"step": step, "scale_before": before, "scale_after": sim.scaler.scale})
            after = sim.engine.stats.to_dict()
            io = {k: after[k] - setup[k] for k in
                  ("logical_bytes_read", "logical_bytes_written", "padded_bytes_read", "padded_bytes_written")}
            skipped = {e["step"] for e in events}
            clean = [b for i, b in enumerate(per_step, 1) if i not in skipped]
            io["per_step_logical_bytes"] = per_step
            io["bytes_per_clean_step"] = max(clean) if clean else 0
            io["schedule_bytes_per_step"] = DEFAULT_SCHEDULES[cfg.precision_mode].bytes_per_param * sim.layout.total
            io["io_requests"] = after["io_requests"] - setup["io_requests"]
            master = sim.master_f32()
            pool_stats = sim.pool.stats.to_dict()
            memory = {
                "peak_host_bytes": sim.allocator.peak_bytes,
                "pool_backing_bytes": sim.pool.stats.backing_bytes,
                "pool_capacity_bytes": sim.pool.capacity_bytes,
                "flat_buffer_bytes": sim.flat.nbytes,
                "flat_buffer_backing_bytes": sim.flat.backing.capacity_bytes,
                "activation_bytes": sim.activations.capacity_bytes if sim.activations else 0,
            }
            timings = dict(sim.timings, total_s=time.perf_counter() - t_start)
        finally:
            sim.close()
    rep = SimReport(
        model=sim.spec.name,
        precision_mode=cfg.precision_mode.value,
        seed=cfg.seed,
        steps=cfg.steps,
        params=sim.layout.total,
        weight_digest=weight_digest(master),
        final_loss_scale=sim.scaler.scale,
        overflow_events=events,
        io=io,
        memory=memory,
        pool=pool_stats,
        timings=timings,
    )
    return (rep, master) if return_master else rep


def report_json(rep: SimReport, with_timings: bool = True) -> str:
    return json.dumps(rep.to_dict(with_timings), indent=2, sort_keys=True)
