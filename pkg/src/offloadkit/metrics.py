"""Process-wide metrics sink.

Subsystems publish counters and gauges under dotted names; reports pull a
snapshot. Deliberately tiny: no exporters, no histograms.
"""

from __future__ import annotations

import threading
from collections import defaultdict


class MetricsSink:
    def __init__(self):
        self._lock = threading.Lock()
        self._values: dict[str, float] = defaultdict(float)

    def incr(self, name: str, value: float = 1) -> None:
        with self._lock:
            self._values[name] += value

    def set(self, name: str, value: float) -> None:
        with self._lock:
            self._values[name] = value

    def set_max(self, name: str, value: float) -> None:
        with self._lock:
            if value > self._values.get(name, float("-inf")):
                self._values[name] = value

    def snapshot(self, prefix: str = "") -> dict[str, float]:
        with self._lock:
            return {k: v for k, v in sorted(self._values.items()) if k.startswith(prefix)}

    def reset(self) -> None:
        with self._lock:
            self._values.clear()


sink = MetricsSink()
