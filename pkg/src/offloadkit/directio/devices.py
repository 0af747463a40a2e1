"""Storage devices opened with page-cache bypass.

A device is either a raw block device or a preallocated file standing in
for one (a "virtual" device). Both are opened with ``O_DIRECT``, so every
transfer must be 4096-aligned in offset, length and host address.
"""

from __future__ import annotations

import enum
import errno
import os
import stat
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from ..errors import CapabilityError, DeviceError, InvalidArgument

ALIGN = 4096
DEVICES_ENV = "OFFLOADKIT_DEVICES"
_FILL_CHUNK = 8 << 20


class DeviceKind(str, enum.Enum):
    RAW_BLOCK = "raw_block"
    FILE_BACKED_VIRTUAL = "file_backed_virtual"


@dataclass(frozen=True)
class DeviceInfo:
    path: str
    capacity_bytes: int
    kind: DeviceKind

    def to_dict(self) -> dict:
        return {"path": self.path, "capacity_bytes": self.capacity_bytes, "kind": self.kind.value}


def _block_device_size(fd: int) -> int:
    return os.lseek(fd, 0, os.SEEK_END)


def create_virtual_device(path: str | os.PathLike, size: int) -> DeviceInfo:
    """Create (or extend) a zero-filled backing file of ``size`` bytes."""
    if size <= 0 or size % ALIGN:
        raise InvalidArgument(f"virtual device size must be a positive multiple of {ALIGN}, got {size}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
    try:
        start = os.fstat(fd).st_size
        if start < size:
            # Write real zeros rather than fallocate: unwritten extents make the
            # first write to every block pay for extent conversion, which a raw
            # device never does.
            zeros = bytes(min(_FILL_CHUNK, size - start))
            pos = start
            while pos < size:
                pos += os.pwrite(fd, zeros[: size - pos], pos)
            os.fsync(fd)
    finally:
        os.close(fd)
    return DeviceInfo(str(path), size, DeviceKind.FILE_BACKED_VIRTUAL)


class DeviceSet:
    """An ordered set of open devices. Use as a context manager or call :meth:`close`."""

    def __init__(self, devices: Sequence[DeviceInfo]):
        if not devices:
            raise InvalidArgument("a device set needs at least one device")
        self.devices = list(devices)
        self.fds: list[int] = []
        try:
            for d in self.devices:
                if d.capacity_bytes <= 0:
                    raise InvalidArgument(f"device capacity must be > 0: {d.path}")
                self.fds.append(open_direct(d.path))
        except BaseException:
            self.close()
            raise

    @classmethod
    def from_paths(cls, paths: Sequence[str | os.PathLike], virtual_size: int | None = None) -> "DeviceSet":
        """Open existing devices; missing paths become virtual devices when ``virtual_size`` is given."""
        infos = []
        for p in paths:
            p = str(p)
            if os.path.exists(p):
                st = os.stat(p)
                if stat.S_ISBLK(st.st_mode):
                    fd = os.open(p, os.O_RDONLY)
                    try:
                        size = _block_device_size(fd)
                    finally:
                        os.close(fd)
                    infos.append(DeviceInfo(p, size - size % ALIGN, DeviceKind.RAW_BLOCK))
                    continue
                if virtual_size is not None and st.st_size < virtual_size:
                    infos.append(create_virtual_device(p, virtual_size))
                else:
                    infos.append(DeviceInfo(p, st.st_size - st.st_size % ALIGN, DeviceKind.FILE_BACKED_VIRTUAL))
            elif virtual_size is not None:
                infos.append(create_virtual_device(p, virtual_size))
            else:
                raise DeviceError("device not found", p)
        return cls(infos)

    @classmethod
    def virtual(cls, directory: str | os.PathLike, count: int, size: int) -> "DeviceSet":
        if count < 1:
            raise InvalidArgument("need at least one device")
        d = Path(directory)
        return cls([create_virtual_device(d / f"vdev{i}.img", size) for i in range(count)])

    @classmethod
    def from_env(cls, virtual_size: int | None = None) -> "DeviceSet | None":
        raw = os.environ.get(DEVICES_ENV)
        if not raw:
            return None
        return cls.from_paths([p for p in raw.split(",") if p], virtual_size)

    @property
    def total_capacity(self) -> int:
        return sum(d.capacity_bytes for d in self.devices)

    def __len__(self) -> int:
        return len(self.devices)

    def describe(self) -> list[dict]:
        return [d.to_dict() for d in self.devices]

    def sync(self) -> None:
        for fd in self.fds:
            os.fsync(fd)

    def close(self) -> None:
        for fd in self.fds:
            try:
                os.close(fd)
            except OSError:
                pass
        self.fds = []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open_direct(path: str, flags: int = os.O_RDWR) -> int:
    """Open ``path`` with ``O_DIRECT``; unsupported filesystems raise :class:`CapabilityError`."""
    try:
        return os.open(path, flags | os.O_DIRECT)
    except OSError as e:
        if e.errno == errno.EINVAL:
            raise CapabilityError(f"filesystem does not support O_DIRECT: {path}") from e
        raise DeviceError(f"cannot open device ({e.strerror})", path) from e
