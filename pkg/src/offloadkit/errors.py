"""Exception hierarchy shared by all subsystems."""

from __future__ import annotations


class OffloadError(Exception):
    """Base class for every error raised by offloadkit."""


class InvalidArgument(OffloadError, ValueError):
    pass


class InvalidSpec(InvalidArgument):
    pass


class ByteCountOverflow(OffloadError, OverflowError):
    pass


class OutOfMemory(OffloadError, MemoryError):
    pass


class LifecycleError(OffloadError):
    """An object was used outside its allowed state transitions."""


class DoubleFree(LifecycleError):
    pass


class UnknownRegion(LifecycleError):
    pass


class PoolError(OffloadError):
    pass


class PoolExhausted(PoolError):
    pass


class SizeViolation(PoolError, InvalidArgument):
    pass


class AlreadyCheckedOut(PoolError):
    pass


class StorageError(OffloadError, OSError):
    pass


class DeviceError(StorageError):
    def __init__(self, message: str, path: str | None = None):
        super().__init__(message if path is None else f"{message}: {path}")
        self.path = path


class CapabilityError(StorageError):
    pass


class StorageFull(StorageError):
    pass


class AlignmentError(StorageError, InvalidArgument):
    pass


class ShortIO(StorageError):
    def __init__(self, message: str, device: int | str, offset: int):
        super().__init__(f"{message} (device={device}, offset={offset})")
        self.device = device
        self.offset = offset


class TensorNotFound(StorageError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else "tensor not found"


class KeyBusy(StorageError):
    """Concurrent operations on the same tensor key."""


class InvariantViolation(OffloadError, AssertionError):
    pass


class UncalibratedPreset(OffloadError):
    pass


class SimulationError(OffloadError):
    pass
