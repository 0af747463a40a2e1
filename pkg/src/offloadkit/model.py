"""Offloadable tensor inventories and shape classes.

A model is described by a handful of dimensions (:class:`ModelSpec`). From
those we enumerate every weight tensor that is staged through host memory on
its way between SSD and GPU, optionally sharded across data-parallel ranks,
and group the tensors into shape classes. One shape class backs one exactly
sized sub-pool in the adaptive buffer pool.
"""

from __future__ import annotations

import enum
import json
import os
from collections import defaultdict
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

from .errors import ByteCountOverflow, InvalidSpec

__all__ = [
    "DEFAULT_RESIDENT_THRESHOLD",
    "ModelSpec",
    "Precision",
    "Role",
    "ShapeClass",
    "TensorDescriptor",
    "classify",
    "enumerate_offload_tensors",
    "load_model_spec",
    "preset_names",
    "tensor_bytes",
]

# Tensors below this many elements stay resident in DRAM and are never staged.
DEFAULT_RESIDENT_THRESHOLD = 2_000_000

_MAX_BYTES = 2**63 - 1


class Precision(str, enum.Enum):
    FP32 = "fp32"
    FP16 = "fp16"
    BF16 = "bf16"

    @property
    def bytes_per_element(self) -> int:
        return 4 if self is Precision.FP32 else 2


class Role(str, enum.Enum):
    EMBEDDING = "embedding"
    LM_HEAD = "lm_head"
    FFN_UP = "ffn_up"
    FFN_GATE = "ffn_gate"
    FFN_DOWN = "ffn_down"
    Q_PROJ = "q_proj"
    K_PROJ = "k_proj"
    V_PROJ = "v_proj"
    O_PROJ = "o_proj"
    EXPERT_FFN = "expert_ffn"
    OTHER = "other"


@dataclass(frozen=True)
class TensorDescriptor:
    """One offloadable weight tensor (or the per-rank shard of one).

    ``rows`` and ``cols`` are the full tensor shape; ``shard_ranks`` > 1 means
    this descriptor is the ceil-divided share held by a single rank.
    """

    name: str
    rows: int
    cols: int
    precision: Precision = Precision.FP16
    role: Role = Role.OTHER
    layer: int | None = None
    shard_ranks: int = 1

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise InvalidSpec(f"{self.name}: dimensions must be >= 1, got {self.rows}x{self.cols}")
        if self.shard_ranks < 1:
            raise InvalidSpec(f"{self.name}: shard_ranks must be >= 1")

    @property
    def numel(self) -> int:
        return -(-self.rows * self.cols // self.shard_ranks)

    @property
    def nbytes(self) -> int:
        return tensor_bytes(self)

    @property
    def shape_key(self) -> tuple[int, int, int]:
        # A weight and its transpose stage into the same buffer size.
        return (max(self.rows, self.cols), min(self.rows, self.cols), self.shard_ranks)


@dataclass(frozen=True)
class ShapeClass:
    class_id: str
    element_count: int
    member_count: int
    members: tuple[str, ...] = ()
    # how many members belong to a single transformer block; the rest are
    # model-level tensors (embedding, head) that get dedicated buffers
    per_block_members: int = 0
    standalone_members: int = 0


@dataclass(frozen=True)
class ModelSpec:
    vocab: int
    hidden: int
    intermediate: int
    layers: int
    kv_dim: int
    num_experts: int = 0
    params_total: int | None = None
    ranks: int = 1
    precision: Precision = Precision.FP16
    q_dim: int | None = None
    expert_intermediate: int | None = None
    resident_threshold: int = DEFAULT_RESIDENT_THRESHOLD
    name: str = "custom"

    def __post_init__(self):
        for fname in ("vocab", "hidden", "intermediate", "layers", "kv_dim", "ranks"):
            if getattr(self, fname) < 1:
                raise InvalidSpec(f"{fname} must be >= 1, got {getattr(self, fname)}")
        if self.num_experts < 0:
            raise InvalidSpec("num_experts must be >= 0")
        for fname in ("q_dim", "expert_intermediate", "params_total"):
            value = getattr(self, fname)
            if value is not None and value < 1:
                raise InvalidSpec(f"{fname} must be >= 1 when given")
        if self.resident_threshold < 0:
            raise InvalidSpec("resident_threshold must be >= 0")
        if not isinstance(self.precision, Precision):
            object.__setattr__(self, "precision", Precision(self.precision))

    @property
    def is_moe(self) -> bool:
        return self.num_experts > 0

    @property
    def attn_q_dim(self) -> int:
        return self.q_dim or self.hidden

    @property
    def ffn_dim(self) -> int:
        if self.is_moe:
            return self.expert_intermediate or self.intermediate
        return self.intermediate

    @property
    def total_params(self) -> int:
        """Declared parameter count, or the count of enumerated weights."""
        if self.params_total is not None:
            return self.params_total
        return sum(t.numel for t in _full_inventory(self))

    def with_(self, **changes: Any) -> "ModelSpec":
        return replace(self, **changes)


def tensor_bytes(t: TensorDescriptor) -> int:
    """Byte size of a (possibly sharded) tensor.

    >>> tensor_bytes(TensorDescriptor("emb", 128256, 5120))
    1313341440
    """
    n = t.numel * t.precision.bytes_per_element
    if n > _MAX_BYTES:
        raise ByteCountOverflow(f"{t.name}: {n} bytes exceeds the 64-bit byte counter")
    return n


def _full_inventory(spec: ModelSpec) -> list[TensorDescriptor]:
    p = spec.precision
    H = spec.hidden
    out = [TensorDescriptor("embed_tokens", spec.vocab, H, p, Role.EMBEDDING)]
    for i in range(spec.layers):
        pre = f"layers.{i}."
        q = spec.attn_q_dim
        attn = [
            TensorDescriptor(pre + "self_attn.q_proj", q, H, p, Role.Q_PROJ, i),
            TensorDescriptor(pre + "self_attn.k_proj", spec.kv_dim, H, p, Role.K_PROJ, i),
            TensorDescriptor(pre + "self_attn.v_proj", spec.kv_dim, H, p, Role.V_PROJ, i),
            TensorDescriptor(pre + "self_attn.o_proj", H, q, p, Role.O_PROJ, i),
        ]
        if spec.is_moe:
            F = spec.ffn_dim
            ffn = [TensorDescriptor(pre + "mlp.router", spec.num_experts, H, p, Role.OTHER, i)]
            for e in range(spec.num_experts):
                ep = f"{pre}mlp.experts.{e}."
                ffn += [
                    TensorDescriptor(ep + "gate_proj", F, H, p, Role.EXPERT_FFN, i),
                    TensorDescriptor(ep + "up_proj", F, H, p, Role.EXPERT_FFN, i),
                    TensorDescriptor(ep + "down_proj", H, F, p, Role.EXPERT_FFN, i),
                ]
        else:
            I = spec.intermediate
            ffn = [
                TensorDescriptor(pre + "mlp.up_proj", I, H, p, Role.FFN_UP, i),
                TensorDescriptor(pre + "mlp.gate_proj", I, H, p, Role.FFN_GATE, i),
                TensorDescriptor(pre + "mlp.down_proj", H, I, p, Role.FFN_DOWN, i),
            ]
        out += ffn + attn
    out.append(TensorDescriptor("lm_head", spec.vocab, H, p, Role.LM_HEAD))
    return out


def enumerate_offload_tensors(
    spec: ModelSpec,
    partition_ranks: int = 1,
    *,
    resident_threshold: int | None = None,
) -> list[TensorDescriptor]:
    """List the tensors staged through host memory for one rank.

    Parameters
    ----------
    spec
        Model dimensions.
    partition_ranks
        Number of data-parallel ranks sharing each tensor; every element
        count is ceil-divided by it.
    resident_threshold
        Tensors with fewer elements (unsharded) stay in DRAM and are left
        out. Defaults to ``spec.resident_threshold``.
    """
    if partition_ranks < 1:
        raise InvalidSpec("partition_ranks must be >= 1")
    threshold = spec.resident_threshold if resident_threshold is None else resident_threshold
    out = []
    for t in _full_inventory(spec):
        if t.rows * t.cols < threshold:
            continue
        out.append(replace(t, shard_ranks=partition_ranks) if partition_ranks > 1 else t)
    return out


def classify(tensors: Iterable[TensorDescriptor]) -> list[ShapeClass]:
    """Group tensors by shape; each group becomes one exactly-sized sub-pool.

    Classes are returned largest element count first, ties broken by id.
    """
    groups: dict[tuple[int, int, int], list[TensorDescriptor]] = defaultdict(list)
    for t in tensors:
        groups[t.shape_key].append(t)
    classes = []
    for key, members in groups.items():
        a, b, r = key
        cid = f"{a}x{b}" if r == 1 else f"{a}x{b}/{r}"
        layered = [m for m in members if m.layer is not None]
        layers = {m.layer for m in layered}
        per_block = -(-len(layered) // len(layers)) if layers else 0
        classes.append(
            ShapeClass(
                class_id=cid,
                element_count=members[0].numel,
                member_count=len(members),
                members=tuple(m.name for m in members),
                per_block_members=per_block,
                standalone_members=len(members) - len(layered),
            )
        )
    classes.sort(key=lambda c: (-c.element_count, c.class_id))
    return classes


# -- config loading ---------------------------------------------------------

_CONFIG_KEYS = {
    "name", "vocab", "hidden", "intermediate", "kv_dim", "layers", "experts",
    "precision", "ranks", "q_dim", "expert_intermediate", "params_total",
    "resident_threshold", "note",
}


def _load_presets() -> dict[str, dict]:
    text = resources.files("offloadkit").joinpath("data/presets.json").read_text()
    return json.loads(text)


def preset_names() -> list[str]:
    return sorted(_load_presets())


def spec_from_mapping(cfg: dict) -> ModelSpec:
    unknown = set(cfg) - _CONFIG_KEYS
    if unknown:
        raise InvalidSpec(f"unknown model config keys: {sorted(unknown)}")
    try:
        return ModelSpec(
            vocab=int(cfg["vocab"]),
            hidden=int(cfg["hidden"]),
            intermediate=int(cfg["intermediate"]),
            layers=int(cfg["layers"]),
            kv_dim=int(cfg["kv_dim"]),
            num_experts=int(cfg.get("experts", 0)),
            params_total=cfg.get("params_total"),
            ranks=int(cfg.get("ranks", 1)),
            precision=Precision(cfg.get("precision", "fp16")),
            q_dim=cfg.get("q_dim"),
            expert_intermediate=cfg.get("expert_intermediate"),
            resident_threshold=int(cfg.get("resident_threshold", DEFAULT_RESIDENT_THRESHOLD)),
            name=str(cfg.get("name", "custom")),
        )
    except KeyError as e:
        raise InvalidSpec(f"model config missing required key {e.args[0]!r}") from None
    except (TypeError, ValueError) as e:
        if isinstance(e, InvalidSpec):
            raise
        raise InvalidSpec(f"bad model config: {e}") from None


def load_model_spec(source: str | os.PathLike) -> ModelSpec:
    """Load a preset by name (case-insensitive) or a JSON model config file."""
    presets = _load_presets()
    key = str(source).lower()
    if key in presets:
        return spec_from_mapping(presets[key])
    path = Path(source)
    if not path.is_file():
        raise FileNotFoundError(f"no preset or model config named {str(source)!r}")
    return spec_from_mapping(json.loads(path.read_text()))


def offload_params(spec: ModelSpec, partition_ranks: int = 1) -> int:
    return sum(t.numel for t in enumerate_offload_tensors(spec, partition_ranks))


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def gib(n: float) -> float:
    return n / 2**30


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0

