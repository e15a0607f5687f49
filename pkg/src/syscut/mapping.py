"""Layer mappings from builtin methods down to syscalls, and their composition.

builtin method -> binding method   (from the builtin-layer JS call graph)
binding method -> native function  (from the NIR bindings section)
native function -> syscalls        (from syscall resolution over the native graph)

Syscalls reached through functions submitted with ``submit_pool`` belong to
the thread pool; everything else runs on the main thread.
"""

from __future__ import annotations

import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path

from syscut._jsonio import read_json, write_json
from syscut.errors import AnalysisError, InputError
from syscut.jscg import CallGraph
from syscut.native_cg import NativeCallGraph, SyscallResolution
from syscut.nir import FnRef, NirProgram, SubmitPool, fnptr_targets, operand_functions, operands, walk

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

Method = tuple[str, str]


def method_label(method: Method) -> str:
    return f"{method[0]}.{method[1]}"


def map_builtin(cg: CallGraph) -> dict[Method, frozenset[Method]]:
    """Binding methods reachable from each exported builtin method."""
    succ = cg.successors()
    by_caller: dict = defaultdict(set)
    for call in cg.binding_calls:
        by_caller[call.caller].add((call.binding, call.method))
    for warning in cg.warnings:
        logger.warning("%s", warning)
    out: dict[Method, set[Method]] = {}
    for export in sorted(cg.exports):
        seen = {export.function}
        queue = deque([export.function])
        found: set[Method] = set()
        while queue:
            fid = queue.popleft()
            found |= by_caller.get(fid, set())
            for nxt in succ.get(fid, ()):
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        out.setdefault((export.package, export.name), set()).update(found)
    return {k: frozenset(v) for k, v in out.items()}


def map_binding(program: NirProgram) -> dict[Method, str]:
    out: dict[Method, str] = {}
    for b in program.bindings:
        if b.function not in program:
            raise InputError(f"binding {b.module}.{b.method} names unknown function {b.function!r}")
        key = (b.module, b.method)
        if key in out and out[key] != b.function:
            raise InputError(f"binding {b.module}.{b.method} registered to both {out[key]!r} and {b.function!r}")
        out[key] = b.function
    return out


def _tasks_from(
    program: NirProgram, cg: NativeCallGraph, roots: set[str], strict: bool, closure: dict
) -> frozenset[str]:
    """Pool tasks submitted anywhere below ``roots``, including nested submissions."""
    every_fnref = frozenset(
        op.name
        for fn in program.functions
        for stmt in walk(fn.body)
        for op in operands(stmt)
        if isinstance(op, FnRef)
    )
    tasks: set[str] = set()
    frontier = set(roots)
    while frontier:
        reach = cg.reachable(frontier)
        frontier = set()
        for name in sorted(reach):
            fn = program.function(name)
            for stmt in walk(fn.body):
                if not isinstance(stmt, SubmitPool):
                    continue
                targets = operand_functions(program, fn, stmt.task, closure)
                if not targets:
                    if strict:
                        raise AnalysisError(f"unresolved pool task at {name} statement {stmt.sid}")
                    logger.warning("unresolved pool task at %s statement %s; assuming any function", name, stmt.sid)
                    targets = every_fnref
                for task in targets - tasks:
                    tasks.add(task)
                    frontier.add(task)
    return frozenset(tasks)


def identify_pool(
    program: NirProgram,
    refined_cg: NativeCallGraph,
    m_builtin: dict[Method, frozenset[Method]],
    m_binding: dict[Method, str],
    strict: bool = True,
) -> tuple[frozenset[Method], dict[Method, frozenset[str]], dict[str, frozenset[str]]]:
    """Returns (pool builtins, tasks per builtin, tasks per native function)."""
    closure = fnptr_targets(program)
    native_tasks: dict[str, frozenset[str]] = {}
    for native in sorted(set(m_binding.values())):
        native_tasks[native] = _tasks_from(program, refined_cg, {native}, strict, closure)
    pool_tasks: dict[Method, frozenset[str]] = {}
    for method, bindings in m_builtin.items():
        tasks: set[str] = set()
        for b in bindings:
            if b in m_binding:
                tasks |= native_tasks[m_binding[b]]
        if tasks:
            pool_tasks[method] = frozenset(tasks)
    return frozenset(pool_tasks), pool_tasks, native_tasks


def map_depend(
    program: NirProgram,
    refined_cg: NativeCallGraph,
    resolution: SyscallResolution,
    m_binding: dict[Method, str],
    tasks: frozenset[str] | set[str] = frozenset(),
) -> dict[str, frozenset[str]]:
    """Transitive syscalls of every bound native function and every pool task."""
    out = {}
    for name in sorted(set(m_binding.values()) | set(tasks)):
        if name not in resolution.syscalls:
            raise AnalysisError(f"no syscall resolution for native function {name!r}")
        out[name] = resolution.syscalls[name]
    return out


@dataclass(frozen=True)
class LayerMappings:
    m_builtin: dict[Method, frozenset[Method]] = field(default_factory=dict)
    m_binding: dict[Method, str] = field(default_factory=dict)
    m_depend: dict[str, frozenset[str]] = field(default_factory=dict)
    pool_builtins: frozenset[Method] = frozenset()
    pool_tasks: dict[Method, frozenset[str]] = field(default_factory=dict)
    native_tasks: dict[str, frozenset[str]] = field(default_factory=dict)


@dataclass(frozen=True)
class Dangling:
    builtin: Method
    layer: str
    link: str

    def to_json(self) -> dict:
        return {"builtin": method_label(self.builtin), "layer": self.layer, "link": self.link}


@dataclass(frozen=True)
class ComposedMapping:
    entries: dict[Method, tuple[frozenset[str], frozenset[str]]] = field(default_factory=dict)
    pool_builtins: frozenset[Method] = frozenset()
    witnesses: dict[tuple[str, str, str], tuple[str, ...]] = field(default_factory=dict)
    dangling: tuple[Dangling, ...] = ()

    def main_syscalls(self, method: Method) -> frozenset[str]:
        return self.entries[method][0]

    def pool_syscalls(self, method: Method) -> frozenset[str]:
        return self.entries[method][1]

    def witness(self, method: Method, syscall: str) -> tuple[str, ...]:
        return self.witnesses.get((*method, syscall), ())


def compose(mappings: LayerMappings) -> ComposedMapping:
    entries = {}
    witnesses: dict[tuple[str, str, str], set[str]] = defaultdict(set)
    dangling = []
    for method in sorted(mappings.m_builtin):
        main: set[str] = set()
        pool: set[str] = set()
        label = method_label(method)
        for b in sorted(mappings.m_builtin[method]):
            native = mappings.m_binding.get(b)
            if native is None:
                dangling.append(Dangling(method, "binding", method_label(b)))
                continue
            prefix = f"{label} -> {method_label(b)} -> {native}"
            if native not in mappings.m_depend:
                # still follow its pool tasks below
                dangling.append(Dangling(method, "depend", native))
            for sc in mappings.m_depend.get(native, ()):
                main.add(sc)
                witnesses[(*method, sc)].add(f"{prefix} -> {sc}")
            for task in sorted(mappings.native_tasks.get(native, ())):
                if task not in mappings.m_depend:
                    dangling.append(Dangling(method, "depend", task))
                    continue
                for sc in mappings.m_depend[task]:
                    pool.add(sc)
                    witnesses[(*method, sc)].add(f"{prefix} => pool {task} -> {sc}")
        entries[method] = (frozenset(main), frozenset(pool))
    return ComposedMapping(
        entries,
        frozenset(m for m in mappings.pool_builtins if m in entries),
        {k: tuple(sorted(v)) for k, v in witnesses.items()},
        tuple(dangling),
    )


def build_mappings(
    builtin_cg: CallGraph,
    program: NirProgram,
    refined_cg: NativeCallGraph,
    resolution: SyscallResolution,
    strict: bool = True,
) -> LayerMappings:
    m_builtin = map_builtin(builtin_cg)
    m_binding = map_binding(program)
    pool_builtins, pool_tasks, native_tasks = identify_pool(program, refined_cg, m_builtin, m_binding, strict)
    all_tasks = set().union(*native_tasks.values()) if native_tasks else set()
    m_depend = map_depend(program, refined_cg, resolution, m_binding, all_tasks)
    return LayerMappings(m_builtin, m_binding, m_depend, pool_builtins, pool_tasks, native_tasks)


# -- mapping database --------------------------------------------------------


def mapping_db_json(mappings: LayerMappings, composed: ComposedMapping) -> dict:
    def methods(items) -> list[str]:
        return sorted(method_label(m) for m in items)

    return {
        "schema_version": SCHEMA_VERSION,
        "layers": {
            "m_builtin": [
                {"builtin": list(k), "bindings": [list(b) for b in sorted(v)]}
                for k, v in sorted(mappings.m_builtin.items())
            ],
            "m_binding": [
                {"binding": list(k), "function": v} for k, v in sorted(mappings.m_binding.items())
            ],
            "m_depend": {k: sorted(v) for k, v in sorted(mappings.m_depend.items())},
            "pool_builtins": methods(mappings.pool_builtins),
            "pool_tasks": {method_label(k): sorted(v) for k, v in sorted(mappings.pool_tasks.items())},
            "native_tasks": {k: sorted(v) for k, v in sorted(mappings.native_tasks.items()) if v},
        },
        "composed": [
            {
                "builtin": list(k),
                "main_syscalls": sorted(main),
                "pool_syscalls": sorted(pool),
            }
            for k, (main, pool) in sorted(composed.entries.items())
        ],
        "pool_builtins": [list(m) for m in sorted(composed.pool_builtins)],
        "witnesses": [
            {"builtin": [k[0], k[1]], "syscall": k[2], "chains": list(v)}
            for k, v in sorted(composed.witnesses.items())
        ],
        "dangling": [d.to_json() for d in composed.dangling],
    }


def composed_from_json(data: dict) -> ComposedMapping:
    if not isinstance(data, dict) or data.get("schema_version") != SCHEMA_VERSION:
        raise InputError(f"mapping database schema_version must be {SCHEMA_VERSION}")
    try:
        entries = {
            (e["builtin"][0], e["builtin"][1]): (frozenset(e["main_syscalls"]), frozenset(e["pool_syscalls"]))
            for e in data["composed"]
        }
        pool = frozenset((m[0], m[1]) for m in data.get("pool_builtins", []))
        witnesses = {
            (w["builtin"][0], w["builtin"][1], w["syscall"]): tuple(w["chains"]) for w in data.get("witnesses", [])
        }
    except (KeyError, IndexError, TypeError) as exc:
        raise InputError(f"malformed mapping database: {exc}") from None
    return ComposedMapping(entries, pool, witnesses)  # type: ignore[arg-type]


def load_mapping_db(path: str | Path) -> ComposedMapping:
    return composed_from_json(read_json(path, "mapping database"))


def save_mapping_db(path: str | Path, mappings: LayerMappings, composed: ComposedMapping) -> None:
    write_json(path, mapping_db_json(mappings, composed))
