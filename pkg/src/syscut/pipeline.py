"""End-to-end pipeline: call graphs, mappings, whitelist, metrics, policy.

Each stage is also exposed as a function taking already-loaded inputs so
that the CLI subcommands and the full pipeline share one code path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from syscut._jsonio import read_json, write_json
from syscut.corpus import BuiltinRegistry, ModuleGraph, load_corpus, load_registry
from syscut.enforce import DEFAULT_POOL_SIZE, evaluate_payloads, load_payloads, payload_table
from syscut.errors import InputError, SyscutError
from syscut.jscg import (
    CallGraph,
    DynamicTrace,
    FunctionId,
    build_static_cg,
    extract_command_sites,
    load_trace,
    merge_dynamic,
    reachable_builtins,
)
from syscut.mapping import ComposedMapping, Method, build_mappings, compose, mapping_db_json
from syscut.native_cg import CloneReport, NativeCallGraph, build_base_cg, refine, resolve_syscalls
from syscut.nir import NirProgram, parse_nir
from syscut.policy import Whitelist, compute_metrics, emit_policy, generate_whitelist
from syscut.syscalls import EngineBaseline, SyscallTable, data_path, load_baseline, load_profile, load_table

logger = logging.getLogger(__name__)

ARTIFACTS = {
    "app_cg": "app_cg.json",
    "builtin_cg": "builtin_cg.json",
    "native_base": "native_cg_base.json",
    "native_refined": "native_cg_refined.json",
    "clones": "clone_report.json",
    "nir_refined": "nir_refined.json",
    "native_syscalls": "native_syscalls.json",
    "mapping": "mapping.json",
    "whitelist": "whitelist.json",
    "metrics": "metrics.json",
    "policy": "policy.json",
    "rules": "policy.rules",
    "payloads": "payloads.json",
}

_PATH_KEYS = ("corpus", "builtin_corpus", "registry", "nir", "table", "baseline", "trace", "profile", "payloads")
_REQUIRED = ("corpus", "builtin_corpus", "nir")


@dataclass
class PipelineConfig:
    corpus: Path | None = None
    builtin_corpus: Path | None = None
    nir: Path | None = None
    registry: Path | None = None
    table: Path | None = None
    baseline: Path | None = None
    trace: Path | None = None
    profile: Path | None = None
    payloads: Path | None = None
    output_dir: Path = Path("syscut-out")
    strict: bool = True
    refine: bool = True
    use_registry: bool = True
    pool_size: int = DEFAULT_POOL_SIZE
    injection_thread: int = 0
    fs_advisory: dict | None = None

    @classmethod
    def from_dict(cls, data: dict[str, Any], base: Path) -> PipelineConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InputError(f"unknown config key {unknown[0]!r}")
        cfg = cls()
        for key, value in data.items():
            if key in _PATH_KEYS or key == "output_dir":
                value = None if value is None else base / value
            setattr(cfg, key, value)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> PipelineConfig:
        path = Path(path)
        data = read_json(path, "pipeline config")
        if not isinstance(data, dict):
            raise InputError(f"{path}: config must be a JSON object")
        return cls.from_dict(data, path.parent)

    def resolved(self) -> PipelineConfig:
        """Fill shipped defaults and check that required inputs exist."""
        for key in _REQUIRED:
            if getattr(self, key) is None:
                raise InputError(f"config is missing required path {key!r}")
        if self.registry is None:
            self.registry = data_path("registry.json")
        if self.table is None:
            self.table = data_path("syscalls_x86_64.tsv")
        if self.baseline is None:
            self.baseline = data_path("engine_baseline.json")
        for key in _PATH_KEYS:
            value = getattr(self, key)
            if value is not None and not Path(value).exists():
                raise InputError(f"config path {key!r} does not exist: {value}")
        return self


# -- individual stages -------------------------------------------------------


def stage_app_cg(graph: ModuleGraph, registry: BuiltinRegistry, trace: DynamicTrace | None) -> CallGraph:
    cg = build_static_cg(graph, registry)
    return merge_dynamic(cg, trace) if trace is not None else cg


@dataclass
class NativeStage:
    program: NirProgram
    base: NativeCallGraph
    refined_program: NirProgram
    refined: NativeCallGraph
    report: CloneReport


def stage_native(program: NirProgram, do_refine: bool = True) -> NativeStage:
    base = build_base_cg(program)
    if do_refine:
        refined_program, report = refine(program)
        refined = build_base_cg(refined_program)
    else:
        refined_program, report, refined = program, CloneReport(), base
    return NativeStage(program, base, refined_program, refined, report)


def stage_map(builtin_cg: CallGraph, program: NirProgram, refined: NativeCallGraph, table: SyscallTable,
              strict: bool = True) -> tuple[dict, ComposedMapping, dict]:
    resolution = resolve_syscalls(program, refined, table, strict)
    mappings = build_mappings(builtin_cg, program, refined, resolution, strict)
    composed = compose(mappings)
    for d in composed.dangling:
        logger.warning("dangling mapping for %s at %s layer: %s", d.builtin, d.layer, d.link)
    return mapping_db_json(mappings, composed), composed, resolution.to_json()


def builtin_owners(graph: ModuleGraph, composed: ComposedMapping) -> frozenset[str]:
    return frozenset(graph.builtin_names) | {m for m, _ in composed.entries}


@dataclass
class AppUsage:
    reachable: frozenset[Method]
    commands: list[str]
    unresolved_commands: int = 0


def stage_usage(graph: ModuleGraph, app_cg: CallGraph, composed: ComposedMapping,
                trace: DynamicTrace | None) -> AppUsage:
    if graph.entry is None:
        raise InputError("application corpus has no entry module")
    entry = FunctionId.top(graph.entry)
    owners = builtin_owners(graph, composed)
    reachable = frozenset(m for m in reachable_builtins(app_cg, entry) if m[0] in owners)
    extraction = extract_command_sites(graph, app_cg, trace, entry)
    return AppUsage(reachable, extraction.commands, len(extraction.unresolved_sites))


def stage_whitelist(usage: AppUsage, composed: ComposedMapping, baseline: EngineBaseline,
                    profile: dict, table: SyscallTable, strict: bool = True) -> Whitelist:
    return generate_whitelist(usage.reachable, composed, baseline, usage.commands, profile, table, strict)


# -- full run ----------------------------------------------------------------


@dataclass
class PipelineResult:
    artifacts: dict[str, Path] = field(default_factory=dict)
    summary: str = ""
    warnings: int = 0


class StageError(SyscutError):
    def __init__(self, stage: str, error: SyscutError) -> None:
        super().__init__(f"stage {stage}: {error}")
        self.stage = stage
        self.exit_code = error.exit_code


class _WarningCounter(logging.Handler):
    def __init__(self) -> None:
        super().__init__(logging.WARNING)
        self.count = 0

    def emit(self, record: logging.LogRecord) -> None:
        self.count += 1


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    cfg = cfg.resolved()
    out = Path(cfg.output_dir)
    result = PipelineResult()
    counter = _WarningCounter()
    root = logging.getLogger("syscut")
    root.addHandler(counter)

    def save(key: str, payload: Any) -> None:
        path = out / ARTIFACTS[key]
        if isinstance(payload, str):
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(payload, encoding="utf-8")
        else:
            write_json(path, payload)
        result.artifacts[key] = path

    stage = "load"
    try:
        table = load_table(cfg.table)
        baseline = load_baseline(cfg.baseline, table)
        registry = load_registry(cfg.registry) if cfg.use_registry else BuiltinRegistry()
        profile = load_profile(cfg.profile, table) if cfg.profile else {}

        stage = "cg-js"
        graph = load_corpus(cfg.corpus)
        trace = load_trace(cfg.trace, graph.module_ids) if cfg.trace else None
        app_cg = stage_app_cg(graph, registry, trace)
        save("app_cg", app_cg.to_json())
        builtin_graph = load_corpus(cfg.builtin_corpus)
        builtin_cg = build_static_cg(builtin_graph, registry)
        save("builtin_cg", builtin_cg.to_json())

        stage = "cg-native"
        native = stage_native(parse_nir(cfg.nir), cfg.refine)
        save("native_base", native.base.to_json())
        save("native_refined", native.refined.to_json())
        save("clones", native.report.to_json())
        save("nir_refined", native.refined_program.to_json())

        stage = "map"
        db, composed, resolution = stage_map(builtin_cg, native.refined_program, native.refined, table, cfg.strict)
        save("native_syscalls", resolution)
        save("mapping", db)

        stage = "whitelist"
        usage = stage_usage(graph, app_cg, composed, trace)
        wl = stage_whitelist(usage, composed, baseline, profile, table, cfg.strict)
        save("whitelist", wl.to_json())

        stage = "metrics"
        metrics = compute_metrics(wl, table)
        save("metrics", metrics.to_json())

        stage = "emit"
        policy = emit_policy(wl, cfg.fs_advisory)
        save("policy", policy.to_json())
        save("rules", policy.to_rules())

        lines = [metrics.summary(), f"mode {wl.mode}; main {metrics.main_count}, pool {metrics.pool_count}"]
        if cfg.payloads:
            stage = "payloads"
            results = evaluate_payloads(policy, load_payloads(cfg.payloads), cfg.injection_thread, table, cfg.pool_size)
            save("payloads", {"results": [r.to_json() for r in results]})
            lines.append(payload_table(results).rstrip())
    except SyscutError as exc:
        raise StageError(stage, exc) from exc
    finally:
        root.removeHandler(counter)
    result.warnings = counter.count
    lines.append(f"warnings: {counter.count}")
    result.summary = "\n".join(lines) + "\n"
    return result
