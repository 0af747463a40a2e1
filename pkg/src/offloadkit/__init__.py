"""Host-memory and storage toolkit for SSD-offloaded LLM training.

Subsystems: model inventories (:mod:`.model`), pinned allocation
(:mod:`.pinned`), staging pools (:mod:`.pool`), the fused overflow scan
(:mod:`.overflow`), direct-I/O tensor storage (:mod:`.directio`), the CPU
optimizer (:mod:`.optimizer`), the training simulator (:mod:`.sim`) and the
memory planner (:mod:`.analyzer`).
"""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import OffloadError  # noqa: E402
from .model import ModelSpec, TensorDescriptor, enumerate_offload_tensors, load_model_spec  # noqa: E402

__all__ = ["ModelSpec", "OffloadError", "TensorDescriptor", "__version__", "enumerate_offload_tensors",
           "load_model_spec"]
