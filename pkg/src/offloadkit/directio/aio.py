"""I/O submission backends.

``KernelAio`` talks to the Linux native asynchronous I/O syscalls directly
through ctypes (no libaio dependency). ``SyncBackend`` issues positional
reads and writes one at a time and is the portable fallback. Both expose the
same ``run(requests)`` contract: every request is submitted, all completions
are collected, and short or failed transfers raise.
"""

from __future__ import annotations

import ctypes
import errno
import os
import platform
import threading
from dataclasses import dataclass

from ..errors import DeviceError, ShortIO

IOCB_CMD_PREAD = 0
IOCB_CMD_PWRITE = 1

# x86_64 and aarch64 syscall numbers
_SYSCALLS = {
    "x86_64": {"io_setup": 206, "io_destroy": 207, "io_getevents": 208, "io_submit": 209},
    "aarch64": {"io_setup": 0, "io_destroy": 1, "io_submit": 2, "io_getevents": 4},
}


@dataclass(frozen=True)
class IoRequest:
    """One aligned transfer between host memory at ``address`` and a device."""

    fd: int
    device: int
    offset: int
    address: int
    nbytes: int
    write: bool
    # reads at end of file may legitimately return fewer bytes
    min_bytes: int | None = None


class _Iocb(ctypes.Structure):
    _fields_ = [
        ("aio_data", ctypes.c_uint64),
        ("aio_key", ctypes.c_uint32),
        ("aio_rw_flags", ctypes.c_uint32),
        ("aio_lio_opcode", ctypes.c_uint16),
        ("aio_reqprio", ctypes.c_int16),
        ("aio_fildes", ctypes.c_uint32),
        ("aio_buf", ctypes.c_uint64),
        ("aio_nbytes", ctypes.c_uint64),
        ("aio_offset", ctypes.c_int64),
        ("aio_reserved2", ctypes.c_uint64),
        ("aio_flags", ctypes.c_uint32),
        ("aio_resfd", ctypes.c_uint32),
    ]


class _IoEvent(ctypes.Structure):
    _fields_ = [
        ("data", ctypes.c_uint64),
        ("obj", ctypes.c_uint64),
        ("res", ctypes.c_int64),
        ("res2", ctypes.c_int64),
    ]


assert ctypes.sizeof(_Iocb) == 64 and ctypes.sizeof(_IoEvent) == 32


def _check_result(req: IoRequest, res: int) -> None:
    if res < 0:
        code = -res
        raise DeviceError(
            f"{'write' if req.write else 'read'} failed at device {req.device} offset {req.offset}: "
            f"{os.strerror(code)}"
        )
    want = req.nbytes if req.min_bytes is None else req.min_bytes
    if res < want or res > req.nbytes:
        raise ShortIO(f"transferred {res} of {req.nbytes} bytes", req.device, req.offset)


class SyncBackend:
    name = "pread-pwrite"

    def run(self, requests: list[IoRequest]) -> int:
        done = 0
        for r in requests:
            buf = (ctypes.c_char * r.nbytes).from_address(r.address)
            try:
                if r.write:
                    res = os.pwritev(r.fd, [buf], r.offset)
                else:
                    res = os.preadv(r.fd, [buf], r.offset)
            except OSError as e:
                res = -(e.errno or errno.EIO)
            _check_result(r, res)
            done += res
        return done

    def close(self) -> None:
        pass


class KernelAio:
    """Native AIO with one context per calling thread.

    Each thread gets its own context sized for ``queue_depth`` in-flight
    requests, so concurrent workers never contend on a context.
    """

    name = "linux-aio"

    def __init__(self, queue_depth: int = 8):
        nums = _SYSCALLS.get(platform.machine())
        if nums is None:
            raise OSError(errno.ENOSYS, "native AIO syscall numbers unknown for this architecture")
        self._nr = nums
        self.queue_depth = max(1, queue_depth)
        self._libc = ctypes.CDLL(None, use_errno=True)
        self._syscall = self._libc.syscall
        self._syscall.restype = ctypes.c_long
        self._local = threading.local()
        self._contexts: list[ctypes.c_ulong] = []
        self._lock = threading.Lock()
        self._closed = False
        self._context()  # probe: raises if the syscalls are unavailable

    def _context(self) -> ctypes.c_ulong:
        ctx = getattr(self._local, "ctx", None)
        if ctx is None:
            ctx = ctypes.c_ulong(0)
            rc = self._syscall(self._nr["io_setup"], ctypes.c_uint(self.queue_depth), ctypes.byref(ctx))
            if rc != 0:
                err = ctypes.get_errno()
                raise OSError(err, f"io_setup failed: {os.strerror(err)}")
            self._local.ctx = ctx
            with self._lock:
                self._contexts.append(ctx)
        return ctx

    def run(self, requests: list[IoRequest]) -> int:
        ctx = self._context()
        done = 0
        qd = self.queue_depth
        for start in range(0, len(requests), qd):
            batch = requests[start : start + qd]
            n = len(batch)
            iocbs = (_Iocb * n)()
            ptrs = (ctypes.POINTER(_Iocb) * n)()
            for i, r in enumerate(batch):
                cb = iocbs[i]
                cb.aio_data = i
                cb.aio_lio_opcode = IOCB_CMD_PWRITE if r.write else IOCB_CMD_PREAD
                cb.aio_fildes = r.fd
                cb.aio_buf = r.address
                cb.aio_nbytes = r.nbytes
                cb.aio_offset = r.offset
                ptrs[i] = ctypes.pointer(cb)
            submitted = 0
            while submitted < n:
                rc = self._syscall(
                    self._nr["io_submit"], ctx, ctypes.c_long(n - submitted), ctypes.byref(ptrs, submitted * 8)
                )
                if rc < 0:
                    err = ctypes.get_errno()
                    if err == errno.EAGAIN:
                        continue
                    # reap what was accepted before reporting
                    self._reap(ctx, batch, submitted)
                    raise DeviceError(f"io_submit failed: {os.strerror(err)}")
                submitted += rc
            done += self._reap(ctx, batch, n)
        return done

    def _reap(self, ctx, batch: list[IoRequest], n: int) -> int:
        events = (_IoEvent * max(n, 1))()
        got = 0
        total = 0
        first_error: Exception | None = None
        while got < n:
            rc = self._syscall(
                self._nr["io_getevents"], ctx, ctypes.c_long(1), ctypes.c_long(n - got),
                ctypes.byref(events, got * ctypes.sizeof(_IoEvent)), None,
            )
            if rc < 0:
                err = ctypes.get_errno()
                if err == errno.EINTR:
                    continue
                raise DeviceError(f"io_getevents failed: {os.strerror(err)}")
            for ev in events[got : got + rc]:
                req = batch[ev.data]
                try:
                    _check_result(req, ev.res)
                    total += ev.res
                except Exception as e:  # keep reaping so no request stays in flight
                    first_error = first_error or e
            got += rc
        if first_error is not None:
            raise first_error
        return total

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            for ctx in self._contexts:
                self._syscall(self._nr["io_destroy"], ctx)
            self._contexts.clear()


def open_backend(kind: str = "auto", queue_depth: int = 8):
    """``auto`` probes for native AIO and falls back to positional I/O."""
    if kind in ("auto", "aio", "linux-aio"):
        try:
            return KernelAio(queue_depth)
        except OSError:
            if kind != "auto":
                raise
    return SyncBackend()
