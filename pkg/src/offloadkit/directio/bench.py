"""Write/read latency of the striped engine against the per-file baseline."""

from __future__ import annotations

import statistics
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import InvalidArgument
from .devices import DeviceSet
from .engine import DirectEngine, _aligned_scratch, pad
from .fsbaseline import FsTensorStore


@dataclass
class IoBenchRow:
    size: int
    engine_write_ns: int
    fs_write_ns: int
    engine_read_ns: int
    fs_read_ns: int
    engine_write_mib_s: float
    fs_write_mib_s: float


def _median(samples: list[int]) -> int:
    return int(statistics.median(samples))


def bench_io(
    sizes: Sequence[int],
    workdir: str | None = None,
    devices: int = 2,
    workers: int = 4,
    queue_depth: int = 8,
    repeats: int = 5,
    keys_per_size: int = 4,
    seed: int = 0,
    device_paths: Sequence[str] | None = None,
    virtual_device_size: int | None = None,
) -> list[IoBenchRow]:
    """Median latencies per size. Each repetition writes ``keys_per_size`` fresh keys."""
    rng = np.random.default_rng(seed)
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        tmp = Path(tmp)
        total = sum(pad(s) for s in sizes) * keys_per_size * (repeats + 1)
        per_dev = pad(total // devices + len(sizes) * keys_per_size * 4096 * 2)
        if virtual_device_size is not None:
            if virtual_device_size < per_dev:
                raise InvalidArgument(f"virtual devices need at least {per_dev} B for this sweep")
            per_dev = pad(virtual_device_size)
        if device_paths:
            devset = DeviceSet.from_paths(device_paths, per_dev)
        else:
            devset = DeviceSet.virtual(tmp / "dev", devices, per_dev)
        rows = []
        with devset, DirectEngine(devset, workers, queue_depth) as eng, FsTensorStore(tmp / "fs", queue_depth) as fs:
            for size in sizes:
                src = _aligned_scratch(size)[:size]
                src[:] = rng.integers(0, 256, size, dtype=np.uint8)
                dst = _aligned_scratch(size)[:size]
                ew, fw, er, fr = [], [], [], []
                for rep in range(repeats + 1):
                    for k in range(keys_per_size):
                        key = f"s{size}.r{rep}.k{k}"
                        t0 = time.perf_counter_ns()
                        eng.write_tensor(key, src)
                        t1 = time.perf_counter_ns()
                        fs.write(key, src)
                        t2 = time.perf_counter_ns()
                        eng.read_tensor(key, dst)
                        t3 = time.perf_counter_ns()
                        fs.read(key, dst)
                        t4 = time.perf_counter_ns()
                        if rep:  # first round warms up
                            ew.append(t1 - t0)
                            fw.append(t2 - t1)
                            er.append(t3 - t2)
                            fr.append(t4 - t3)
                e_w, f_w = _median(ew), _median(fw)
                rows.append(
                    IoBenchRow(
                        size=size,
                        engine_write_ns=e_w,
                        fs_write_ns=f_w,
                        engine_read_ns=_median(er),
                        fs_read_ns=_median(fr),
                        engine_write_mib_s=size / 2**20 / (e_w / 1e9),
                        fs_write_mib_s=size / 2**20 / (f_w / 1e9),
                    )
                )
        return rows
