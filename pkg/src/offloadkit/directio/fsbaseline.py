"""Filesystem baseline: one direct-I/O file per tensor.

Every write creates (or truncates) the tensor's file, writes the padded
payload and trims the file back to the logical size, the way per-tensor
swap files are handled by the stock offload path. It uses the same
submission backend as the striped engine so the comparison isolates the
filesystem cost.
"""

from __future__ import annotations

import os
from pathlib import Path
from urllib.parse import quote

from ..errors import InvalidArgument, SizeViolation, TensorNotFound
from .aio import IoRequest, open_backend
from .devices import ALIGN
from .engine import _aligned_scratch, _buffer_of, pad


class FsTensorStore:
    def __init__(
        self,
        directory: str | os.PathLike,
        queue_depth: int = 8,
        backend: str = "auto",
        max_request_bytes: int = 1 << 20,
    ):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.queue_depth = queue_depth
        self.max_request_bytes = max_request_bytes
        self.backend = open_backend(backend, queue_depth)

    def path_for(self, key: str) -> Path:
        return self.directory / (quote(key, safe="") + ".tensor")

    def _requests(self, fd: int, addr: int, padded: int, write: bool, logical: int) -> list[IoRequest]:
        sub = min(padded, self.max_request_bytes)
        reqs = []
        for s in range(0, padded, sub):
            n = min(sub, padded - s)
            min_bytes = None if write else max(0, min(n, logical - s))
            reqs.append(IoRequest(fd, 0, s, addr + s, n, write, min_bytes))
        return reqs

    def write(self, key: str, src, logical_length: int | None = None) -> int:
        buf = _buffer_of(src)
        n = buf.size if logical_length is None else logical_length
        if n <= 0:
            raise InvalidArgument(f"{key}: empty payload (minimum one {ALIGN}-byte page)")
        if n > buf.size:
            raise SizeViolation(f"{key}: logical length {n} exceeds buffer of {buf.size} B")
        padded = pad(n)
        staging = buf
        if buf.ctypes.data % ALIGN or buf.size < padded:
            staging = _aligned_scratch(padded)
            staging[:n] = buf[:n]
        fd = os.open(self.path_for(key), os.O_WRONLY | os.O_CREAT | os.O_TRUNC | os.O_DIRECT, 0o644)
        try:
            self.backend.run(self._requests(fd, staging.ctypes.data, padded, True, n))
            os.ftruncate(fd, n)
        finally:
            os.close(fd)
        return padded

    def read(self, key: str, dst) -> int:
        buf = _buffer_of(dst)
        path = self.path_for(key)
        try:
            fd = os.open(path, os.O_RDONLY | os.O_DIRECT)
        except FileNotFoundError:
            raise TensorNotFound(f"no tensor file for {key!r}") from None
        try:
            n = os.fstat(fd).st_size
            if buf.size < n:
                raise SizeViolation(f"{key}: destination holds {buf.size} B, tensor has {n} B")
            padded = pad(n)
            staging = buf
            if buf.ctypes.data % ALIGN or buf.size < padded:
                staging = _aligned_scratch(padded)
            self.backend.run(self._requests(fd, staging.ctypes.data, padded, False, n))
        finally:
            os.close(fd)
        if staging is not buf:
            buf[:n] = staging[:n]
        return n

    def close(self) -> None:
        self.backend.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
