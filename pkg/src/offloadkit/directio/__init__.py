"""Direct-I/O tensor storage: striped engine, per-file baseline, benchmark."""

from .aio import IoRequest, KernelAio, SyncBackend, open_backend
from .bench import IoBenchRow, bench_io
from .devices import ALIGN, DeviceInfo, DeviceKind, DeviceSet, create_virtual_device, open_direct
from .engine import DirectEngine, EngineStats, Extent, SharedCursor, TensorRecord, equal_split, open_engine, pad
from .fsbaseline import FsTensorStore
from .manifest import read_manifest, write_manifest

__all__ = [
    "ALIGN", "DeviceInfo", "DeviceKind", "DeviceSet", "DirectEngine", "EngineStats", "Extent",
    "FsTensorStore", "IoBenchRow", "IoRequest", "KernelAio", "SharedCursor", "SyncBackend",
    "TensorRecord", "bench_io", "create_virtual_device", "equal_split", "open_backend",
    "open_direct", "open_engine", "pad", "read_manifest", "write_manifest",
]
