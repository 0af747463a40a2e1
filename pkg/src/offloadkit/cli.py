"""Command-line entry point: ``offloadkit <subcommand> [options]``.

Every subcommand writes ``<subcommand>.json`` (plus CSV and PNG files for
tabular results) into ``--output``. JSON reports are deterministic for fixed
inputs and seed; wall-clock measurements go to separate timing files or, for
the benchmarks, are the payload and exempt.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Environment: ``OFFLOADKIT_DEVICES`` (comma-separated device paths),
``OFFLOADKIT_PAGE_SIZE``, ``OFFLOADKIT_WORKERS``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import platform
import re
import subprocess
import sys
import tempfile
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .errors import InvalidArgument, OffloadError, StorageError, UncalibratedPreset

log = logging.getLogger("offloadkit")

_UNITS = {"": 1, "b": 1, "k": 2**10, "kib": 2**10, "kb": 10**3, "m": 2**20, "mib": 2**20, "mb": 10**6,
          "g": 2**30, "gib": 2**30, "gb": 10**9, "t": 2**40, "tib": 2**40, "tb": 10**12}


class UsageError(Exception):
    pass


def parse_bytes(text: str) -> int:
    """``"128GiB"`` -> 137438953472. Bare numbers are bytes; ``1e6`` is allowed."""
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+(?:e[0-9]+)?)\s*([a-zA-Z]*)\s*", text)
    if not m or m.group(2).lower() not in _UNITS:
        raise argparse.ArgumentTypeError(f"not a byte size: {text!r}")
    value = float(m.group(1)) * _UNITS[m.group(2).lower()]
    if value != int(value):
        raise argparse.ArgumentTypeError(f"byte size must be whole: {text!r}")
    return int(value)


def parse_limit(text: str) -> float:
    if text.lower() in ("inf", "none", "unlimited"):
        return math.inf
    return float(parse_bytes(text))


def parse_size_list(text: str) -> list[int]:
    sizes = [parse_bytes(s) for s in text.split(",") if s.strip()]
    if not sizes or min(sizes) <= 0:
        raise argparse.ArgumentTypeError("sizes must be a non-empty list of positive values")
    return sizes


def positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


# -- report plumbing ------------------------------------------------------------


def git_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 else "unknown"


def machine_descriptor() -> dict:
    return {
        "system": platform.system(),
        "machine": platform.machine(),
        "python": platform.python_version(),
        "cpu_count": os.cpu_count() or 1,
    }


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    if hasattr(o, "value"):
        return o.value
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def provenance(command: str, config: dict) -> dict:
    cfg = json.loads(json.dumps(config, sort_keys=True, default=_json_default))
    digest = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()
    return {
        "tool": "offloadkit",
        "version": __version__,
        "git_revision": git_revision(),
        "config_digest": digest,
        "machine": machine_descriptor(),
        "command": command,
        "config": cfg,
    }


def write_json(path: Path, obj) -> Path:
    path.write_text(canonical_json(obj))
    return path


def write_csv(path: Path, rows: Sequence[dict]) -> Path:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path


def _config_stage(fn: Callable):
    """Run configuration code, turning bad input into a usage error."""
    try:
        return fn()
    except (FileNotFoundError, IsADirectoryError, json.JSONDecodeError, InvalidArgument, UncalibratedPreset,
            KeyError, TypeError, ValueError) as e:
        raise UsageError(str(e)) from e


def _load_spec(source: str):
    from .model import load_model_spec

    return _config_stage(lambda: load_model_spec(source))


def _emit(args, report: dict, csv_rows: Sequence[dict] | None = None) -> None:
    out: Path = args.output
    stem = args.command
    written = [write_json(out / f"{stem}.json", report)]
    if csv_rows:
        written.append(write_csv(out / f"{stem}.csv", csv_rows))
    if args.format == "csv" and csv_rows:
        sys.stdout.write((out / f"{stem}.csv").read_text())
    else:
        sys.stdout.write(canonical_json(report))
    for p in written:
        log.info("wrote %s", p)


def _device_paths(args) -> list[str] | None:
    if args.devices:
        return [p for p in args.devices.split(",") if p]
    env = os.environ.get("OFFLOADKIT_DEVICES")
    return [p for p in env.split(",") if p] if env else None


# -- subcommands ----------------------------------------------------------------


def cmd_analyze(args) -> int:
    from . import analyzer

    spec = _load_spec(args.model)
    modes = ["baseline", "optimized"] if args.mode == "both" else [args.mode]
    _config_stage(lambda: analyzer.load_calibration(spec))
    limit = args.limit
    breakdowns = {m: analyzer.peak_breakdown(spec, m, args.batch, args.context) for m in modes}
    max_ctx = {m: analyzer.max_context_under_limit(spec, limit, m, batch=args.batch) for m in modes}
    max_batch = {m: analyzer.max_batch_under_limit(spec, limit, m, context=args.context) for m in modes}
    rows = analyzer.sweep(spec, args.sweep, modes, limit, batch=args.batch, context=args.context)
    config = {"model": args.model, "modes": modes, "limit": None if math.isinf(limit) else int(limit),
              "sweep": args.sweep, "batch": args.batch, "context": args.context}
    flat = breakdowns[modes[0]].grad_flat_buffer
    report = {
        "provenance": provenance("analyze", config),
        "model": spec.name,
        "modes": modes,
        "limit_bytes": None if math.isinf(limit) else int(limit),
        "batch": args.batch,
        "context": args.context,
        "breakdown": {m: dataclasses.asdict(b) for m, b in breakdowns.items()},
        "breakdown_gib": {m: b.gib() for m, b in breakdowns.items()},
        "overflow_stage_peaks": analyzer.overflow_stage_peaks(flat),
        "max_context": max_ctx,
        "max_batch": max_batch,
        "sweep": [dataclasses.asdict(r) for r in rows],
    }
    if not args.no_plots:
        from . import plotting

        plotting.plot_sweep(rows, limit, args.output / "analyze_sweep.png")
        plotting.plot_breakdown(breakdowns, args.output / "analyze_breakdown.png")
    _emit(args, report, [dataclasses.asdict(r) for r in rows])
    return 0


def cmd_bench_pool(args) -> int:
    from .analyzer import load_calibration
    from .model import enumerate_offload_tensors
    from .pool import Backing, BufferPool, PoolConfig, class_plan, replay_prefetch

    spec = _load_spec(args.model)
    n = args.inflight_blocks
    if n is None:
        try:
            n = load_calibration(spec).inflight_blocks
        except UncalibratedPreset:
            n = 1
    inventory = _config_stage(lambda: enumerate_offload_tensors(spec))
    modes = ["monolithic", "adaptive"] if args.mode == "both" else [args.mode]
    pools = {}
    for mode in modes:
        cap = sum(b * c for _, b, c in class_plan(inventory, mode, n))
        backing = args.backing
        if backing == "auto":
            backing = "pinned" if cap <= args.pinned_limit else "virtual"
        with BufferPool(inventory, PoolConfig(mode=mode, inflight_blocks=n, backing=Backing(backing))) as pool:
            stats = replay_prefetch(pool, inventory, n)
            d = stats.to_dict()
            d["backing"] = backing
            d["classes"] = [dataclasses.asdict(lay) for lay in pool.layouts]
            pools[mode] = d
    reduction = None
    if len(pools) == 2:
        reduction = 1.0 - pools["adaptive"]["capacity_bytes"] / pools["monolithic"]["capacity_bytes"]
    config = {"model": args.model, "inflight_blocks": n, "modes": modes, "backing": args.backing}
    report = {
        "provenance": provenance("bench-pool", config),
        "model": spec.name,
        "inflight_blocks": n,
        "pools": pools,
        "capacity_reduction": reduction if reduction is not None else 0.0,
    }
    rows = [
        {"mode": m, "capacity_gib": d["capacity_bytes"] / 2**30, "peak_live_gib": d["peak_live_bytes"] / 2**30,
         "fragmentation": d["fragmentation"], "checkout_count": d["checkout_count"],
         "blocked_time_s": d["blocked_time_s"]}
        for m, d in pools.items()
    ]
    if not args.no_plots:
        from . import plotting

        plotting.plot_pool(pools, args.output / "bench-pool.png")
    _emit(args, report, rows)
    return 0


def cmd_bench_overflow(args) -> int:
    from .overflow import ScanConfig, bench_overflow, default_workers

    workers = args.workers or default_workers()
    cfg = _config_stage(lambda: ScanConfig(worker_count=workers, chunk_bytes=args.chunk_bytes))
    rows = bench_overflow(args.sizes, cfg, repeats=args.repeats, seed=args.seed)
    config = {"sizes": args.sizes, "workers": workers, "chunk_bytes": args.chunk_bytes, "repeats": args.repeats,
              "seed": args.seed}
    dicts = [dataclasses.asdict(r) for r in rows]
    report = {"provenance": provenance("bench-overflow", config), "rows": dicts}
    if not args.no_plots:
        from . import plotting

        plotting.plot_latency(
            args.sizes,
            {"fused": [r.fused_ns / 1e6 for r in rows], "naive": [r.naive_ns / 1e6 for r in rows]},
            args.output / "bench-overflow.png",
            xlabel="fp32 elements",
        )
    _emit(args, report, dicts)
    return 0


def cmd_bench_io(args) -> int:
    from .directio.bench import bench_io

    paths = _device_paths(args)
    config = {"sizes": args.sizes, "devices": paths or args.device_count, "workers": args.workers,
              "queue_depth": args.queue_depth, "repeats": args.repeats, "seed": args.seed,
              "virtual_device_size": args.virtual_device_size}
    rows = bench_io(
        args.sizes, workdir=args.workdir, devices=len(paths) if paths else args.device_count,
        workers=args.workers, queue_depth=args.queue_depth, repeats=args.repeats, seed=args.seed,
        device_paths=paths, virtual_device_size=args.virtual_device_size,
    )
    dicts = [dataclasses.asdict(r) for r in rows]
    report = {"provenance": provenance("bench-io", config), "devices": len(paths) if paths else args.device_count,
              "rows": dicts}
    if not args.no_plots:
        from . import plotting

        plotting.plot_latency(
            args.sizes,
            {
                "engine write": [r.engine_write_ns / 1e6 for r in rows],
                "fs write": [r.fs_write_ns / 1e6 for r in rows],
                "engine read": [r.engine_read_ns / 1e6 for r in rows],
                "fs read": [r.fs_read_ns / 1e6 for r in rows],
            },
            args.output / "bench-io.png",
            xlabel="tensor bytes",
        )
    _emit(args, report, dicts)
    return 0


_SIM_KEYS = {"model", "steps", "inflight_blocks", "precision_mode", "precision", "seed", "hyper", "fault_injection",
             "init_scale", "growth_interval", "batch", "context", "pool_mode", "devices", "workers", "queue_depth",
             "optimizer_threads"}


def _sim_config(args):
    from .model import spec_from_mapping
    from .optimizer import AdamHyper
    from .sim import SimConfig

    raw: dict = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        if not isinstance(raw, dict):
            raise InvalidArgument("simulation config must be a JSON object")
        unknown = set(raw) - _SIM_KEYS
        if unknown:
            raise InvalidArgument(f"unknown simulation config keys: {sorted(unknown)}")
    if "precision" in raw:
        raw["precision_mode"] = raw.pop("precision")
    overrides = {
        "model": args.model, "seed": args.seed, "steps": args.steps, "precision_mode": args.precision,
        "inflight_blocks": args.inflight_blocks, "workers": args.workers, "queue_depth": args.queue_depth,
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if args.inject_overflow_at:
        raw["fault_injection"] = list(raw.get("fault_injection", [])) + args.inject_overflow_at
    raw.setdefault("seed", 0)
    raw.setdefault("steps", 10)
    model = raw.get("model", "toy-dense")
    if isinstance(model, dict):
        model = spec_from_mapping(model)
    else:
        model = _load_spec(model)
    kwargs = dict(raw, model=model)
    if "hyper" in kwargs:
        kwargs["hyper"] = AdamHyper(**kwargs["hyper"])
    if "fault_injection" in kwargs:
        kwargs["fault_injection"] = tuple(kwargs["fault_injection"])
    paths = _device_paths(args)
    if paths:
        kwargs["device_paths"] = tuple(paths)
    kwargs["workdir"] = args.workdir
    return SimConfig(**kwargs), raw


def cmd_simulate(args) -> int:
    from .sim import run_training

    cfg, raw = _config_stage(lambda: _sim_config(args))
    rep = run_training(cfg)
    report = {"provenance": provenance("simulate", raw), **rep.to_dict(with_timings=False)}
    timings = dict(rep.timings, blocked_time_s=rep.pool.get("blocked_time_s", 0.0))
    write_json(args.output / "simulate_timings.json", timings)
    steps = list(range(1, len(rep.io.get("per_step_logical_bytes", [])) + 1))
    rows = [
        {"step": s, "logical_bytes": b, "schedule_bytes": rep.io["schedule_bytes_per_step"],
         "overflow": any(e["step"] == s for e in rep.overflow_events)}
        for s, b in zip(steps, rep.io.get("per_step_logical_bytes", []))
    ]
    if rows and not args.no_plots:
        from . import plotting

        plotting.plot_latency(
            steps,
            {"measured": [r["logical_bytes"] for r in rows], "schedule": [r["schedule_bytes"] for r in rows]},
            args.output / "simulate.png",
            xlabel="step",
            ylabel="SSD bytes per step",
        )
    _emit(args, report, rows or None)
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output", "-o", type=Path, default=Path("offloadkit-report"),
                        help="directory for JSON/CSV/PNG reports (created if missing)")
    common.add_argument("--format", choices=["json", "csv"], default="json", help="what to print on stdout")
    common.add_argument("--seed", type=int, default=None, help="RNG seed (default 0)")
    common.add_argument("--no-plots", action="store_true", help="skip figure rendering")
    common.add_argument("-v", "--verbose", action="store_true")

    io = argparse.ArgumentParser(add_help=False)
    io.add_argument("--devices", help="comma-separated device or backing-file paths (env OFFLOADKIT_DEVICES)")
    io.add_argument("--workers", type=positive_int, default=None)
    io.add_argument("--queue-depth", type=positive_int, default=None)
    io.add_argument("--workdir", help="directory for virtual devices (default: system temp)")

    p = argparse.ArgumentParser(prog="offloadkit", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"offloadkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", parents=[common], help="peak host-memory planner")
    a.add_argument("--model", required=True, help="preset name or JSON model config file")
    a.add_argument("--mode", choices=["baseline", "optimized", "both"], default="both")
    a.add_argument("--limit", type=parse_limit, default=math.inf, help="host memory limit, e.g. 128GiB")
    a.add_argument("--sweep", choices=["context", "batch"], default="context")
    a.add_argument("--batch", type=int, default=1, help="batch size for context sweeps")
    a.add_argument("--context", type=int, default=4096, help="context length for batch sweeps")
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("bench-pool", parents=[common], help="staging pool capacity and fragmentation")
    b.add_argument("--model", default="toy-dense")
    b.add_argument("--mode", choices=["monolithic", "adaptive", "both"], default="both")
    b.add_argument("--inflight-blocks", type=positive_int, default=None)
    b.add_argument("--backing", choices=["auto", "pinned", "virtual"], default="auto")
    b.add_argument("--pinned-limit", type=parse_bytes, default=256 << 20,
                   help="largest pool backed by real memory when --backing=auto")
    b.set_defaults(func=cmd_bench_pool)

    o = sub.add_parser("bench-overflow", parents=[common], help="fused vs tensor-op overflow check")
    o.add_argument("--sizes", type=parse_size_list, default=[10**4, 10**5, 10**6, 10**7],
                   help="comma-separated element counts")
    o.add_argument("--workers", type=positive_int, default=None, help="scan threads (env OFFLOADKIT_WORKERS)")
    o.add_argument("--chunk-bytes", type=parse_bytes, default=1 << 20)
    o.add_argument("--repeats", type=positive_int, default=5)
    o.set_defaults(func=cmd_bench_overflow)

    i = sub.add_parser("bench-io", parents=[common, io], help="direct engine vs per-file baseline")
    i.add_argument("--sizes", type=parse_size_list, default=[4 << 10, 64 << 10, 1 << 20, 8 << 20, 32 << 20])
    i.add_argument("--device-count", type=positive_int, default=2, help="virtual devices when --devices is unset")
    i.add_argument("--virtual-device-size", type=parse_bytes, default=None)
    i.add_argument("--repeats", type=positive_int, default=5)
    i.set_defaults(func=cmd_bench_io, workers=4, queue_depth=8)

    s = sub.add_parser("simulate", parents=[common, io], help="offloaded training simulator")
    s.add_argument("--config", help="JSON simulation config; flags override its values")
    s.add_argument("--model", default=None, help="preset or model config file (default toy-dense)")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--precision", choices=["fp16", "bf16"], default=None)
    s.add_argument("--inject-overflow-at", type=positive_int, action="append", default=[], metavar="N",
                   help="poison the gradient at step N (repeatable)")
    s.add_argument("--inflight-blocks", type=positive_int, default=None)
    s.set_defaults(func=cmd_simulate)
    return p


def _fail(code: int, exc: BaseException) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    sys.stderr.write(json.dumps(err) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", None) is None and args.command != "simulate":
        args.seed = 0
    if args.command == "bench-io" and args.workdir is None:
        args.workdir = tempfile.gettempdir()
    try:
        args.output.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        return _fail(2, e)
    try:
        return args.func(args)
    except UsageError as e:
        return _fail(2, e.__cause__ or e)
    except InvalidArgument as e:
        if isinstance(e, StorageError):
            return _fail(1, e)
        return _fail(2, e)  # a parameter the workflow rejected late
    except (OffloadError, OSError, RuntimeError, MemoryError) as e:
        log.debug("runtime failure", exc_info=True)
        return _fail(1, e)


if __name__ == "__main__":
    sys.exit(main())
