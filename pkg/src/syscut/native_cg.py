"""Native call graphs over NIR with clone-based partial context sensitivity.

Two refinements remove the classic false positives of context-insensitive
analysis:

* switch specialization: when a caller fixes the value that selects a
  branch of a callee's ``switch``, the callee is cloned as ``F.<value>``
  with only the chosen branch and the call site is redirected;
* function-pointer specialization: when a call site passes a known
  function into a parameter that is eventually called indirectly, the
  callee is cloned as ``F.<fn>`` with the pointer substituted, repeated
  down the chain until the indirect call becomes a direct one.

Both run to a fixpoint, so applying either to its own output is a no-op.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable

from syscut.errors import AnalysisError, InputError
from syscut.nir import (
    Assign,
    Call,
    CallIndirect,
    Case,
    Const,
    FieldRef,
    FnRef,
    LocalRef,
    NirFunction,
    NirProgram,
    Operand,
    ParamRef,
    Stmt,
    SubmitPool,
    Switch,
    Syscall,
    fnptr_targets,
    local_sources,
    operand_functions,
    pool_task_targets,
    walk,
)
from syscut.syscalls import SyscallTable

Edge = tuple[str, int, str]


@dataclass(frozen=True)
class NativeCallGraph:
    nodes: frozenset[str]
    edges: frozenset[Edge] = frozenset()

    def __post_init__(self) -> None:
        for caller, _, callee in self.edges:
            if caller not in self.nodes or callee not in self.nodes:
                raise InputError(f"native edge endpoint missing: {caller} -> {callee}")

    def successors(self) -> dict[str, set[str]]:
        succ: dict[str, set[str]] = defaultdict(set)
        for caller, _, callee in self.edges:
            succ[caller].add(callee)
        return succ

    def reachable(self, roots: Iterable[str]) -> set[str]:
        succ = self.successors()
        seen = set(roots)
        stack = list(seen)
        while stack:
            for nxt in succ.get(stack.pop(), ()):
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return seen

    def to_json(self) -> dict:
        return {
            "nodes": sorted(self.nodes),
            "edges": [{"caller": a, "site": s, "callee": b} for a, s, b in sorted(self.edges)],
        }

    @classmethod
    def from_json(cls, data: dict) -> NativeCallGraph:
        return cls(
            frozenset(data["nodes"]),
            frozenset((e["caller"], e["site"], e["callee"]) for e in data["edges"]),
        )


def build_base_cg(program: NirProgram) -> NativeCallGraph:
    """Context-insensitive graph: every switch branch, every pointer target."""
    closure = fnptr_targets(program)
    edges = set()
    for fn in program.functions:
        for stmt in walk(fn.body):
            if isinstance(stmt, Call):
                edges.add((fn.name, stmt.sid, stmt.callee))
            elif isinstance(stmt, CallIndirect):
                for target in closure.get((fn.name, stmt.target), ()):
                    edges.add((fn.name, stmt.sid, target))
    return NativeCallGraph(frozenset(program.names), frozenset(edges))


# -- clone bookkeeping -------------------------------------------------------


@dataclass(frozen=True, order=True)
class CloneEntry:
    original: str
    clone: str
    reason: str
    context: int | str
    depth: int = 1

    def to_json(self) -> dict:
        return {
            "original": self.original,
            "clone": self.clone,
            "reason": self.reason,
            "context": self.context,
            "depth": self.depth,
        }


@dataclass(frozen=True)
class CloneReport:
    clones: tuple[CloneEntry, ...] = ()
    # call sites (caller, sid, callee) left context-insensitive
    indeterminate: tuple[Edge, ...] = ()

    def merge(self, other: CloneReport) -> CloneReport:
        return CloneReport(
            tuple(sorted(set(self.clones) | set(other.clones), key=lambda c: c.clone)),
            tuple(sorted(set(self.indeterminate) | set(other.indeterminate))),
        )

    def original_of(self, name: str) -> str:
        parents = {c.clone: c.original for c in self.clones}
        while name in parents:
            name = parents[name]
        return name

    def project_edges(self, edges: Iterable[Edge]) -> set[Edge]:
        return {(self.original_of(a), s, self.original_of(b)) for a, s, b in edges}

    def to_json(self) -> dict:
        return {
            "clones": [c.to_json() for c in sorted(self.clones, key=lambda c: c.clone)],
            "indeterminate": [{"caller": a, "site": s, "callee": b} for a, s, b in self.indeterminate],
        }

    @classmethod
    def from_json(cls, data: dict) -> CloneReport:
        return cls(
            tuple(
                CloneEntry(c["original"], c["clone"], c["reason"], c["context"], c.get("depth", 1))
                for c in data.get("clones", [])
            ),
            tuple((e["caller"], e["site"], e["callee"]) for e in data.get("indeterminate", [])),
        )


def _map_body(body: tuple[Stmt, ...], fn) -> tuple[Stmt, ...]:
    """Rebuild a body; ``fn`` maps a statement to a replacement tuple."""
    out: list[Stmt] = []
    for stmt in body:
        if isinstance(stmt, Switch):
            stmt = Switch(
                stmt.sid,
                stmt.selector,
                tuple(Case(c.value, _map_body(c.body, fn)) for c in stmt.cases),
                _map_body(stmt.default_body, fn),
            )
        out.extend(fn(stmt))
    return tuple(out)


def _redirect(fn: NirFunction, sid: int, callee: str) -> NirFunction:
    def swap(stmt: Stmt) -> tuple[Stmt, ...]:
        if isinstance(stmt, Call) and stmt.sid == sid:
            return (Call(sid, callee, stmt.args),)
        return (stmt,)

    return NirFunction(fn.name, fn.params, _map_body(fn.body, swap))


def _clone_name(base: str, context: object, taken: set[str], suffix: str) -> str:
    name = f"{base}.{context}"
    return name if name not in taken else f"{name}~{suffix}"


# -- prefix-based constant tracing ------------------------------------------


def _prefix(body: tuple[Stmt, ...], sid: int) -> tuple[Stmt, ...] | None:
    """Statements that always execute before statement ``sid`` on its path."""
    for i, stmt in enumerate(body):
        if stmt.sid == sid:
            return body[:i]
        if isinstance(stmt, Switch):
            for branch in stmt.branches():
                inner = _prefix(branch, sid)
                if inner is not None:
                    return body[:i] + inner
    return None


def _struct_args(fn: NirFunction, args: tuple[Operand, ...]) -> bool:
    return any(
        isinstance(a, LocalRef) or (isinstance(a, ParamRef) and fn.param_kind(a.name) == "value")
        for a in args
    )


class _ConstTracer:
    """Backward search for the constant(s) a location holds at a program point.

    Locations are ``("local", l)``, ``("param", p)`` or ``("field", p, f)``.
    Field locations are killed conservatively: a write to the same field
    name through any parameter, or any call that receives a struct.
    """

    def __init__(self, program: NirProgram) -> None:
        self.program = program
        self.callers: dict[str, list[tuple[NirFunction, Call]]] = defaultdict(list)
        external = set(program.entries) | {b.function for b in program.bindings}
        for fn in program.functions:
            for stmt in walk(fn.body):
                if isinstance(stmt, Call):
                    self.callers[stmt.callee].append((fn, stmt))
                for op in _all_operands(stmt):
                    if isinstance(op, FnRef):
                        external.add(op.name)
        self.external = frozenset(external)
        self.trace = lru_cache(maxsize=None)(self._trace)

    def at_call(self, caller: NirFunction, call: Call, callee: NirFunction, loc: tuple) -> frozenset[int] | None:
        """Value of callee location ``loc`` (a param or param field) at entry via ``call``."""
        prefix = _prefix(caller.body, call.sid) or ()
        arg = call.args[callee.param_index(loc[1])]
        if loc[0] == "param":
            return self.operand(caller.name, prefix, arg)
        if isinstance(arg, ParamRef):
            return self.trace(caller.name, prefix, ("field", arg.name, loc[2]))
        return None

    def operand(self, fname: str, prefix: tuple[Stmt, ...], op: Operand) -> frozenset[int] | None:
        if isinstance(op, Const):
            return frozenset({op.value})
        if isinstance(op, ParamRef):
            return self.trace(fname, prefix, ("param", op.name))
        if isinstance(op, LocalRef):
            return self.trace(fname, prefix, ("local", op.name))
        if isinstance(op, FieldRef):
            return self.trace(fname, prefix, ("field", op.param, op.field))
        return None

    def _trace(self, fname: str, prefix: tuple[Stmt, ...], loc: tuple) -> frozenset[int] | None:
        fn = self.program.function(fname)
        for i in range(len(prefix) - 1, -1, -1):
            stmt = prefix[i]
            if isinstance(stmt, Switch):
                inner = [s for branch in stmt.branches() for s in walk(branch)]
                if any(_kills(fn, s, loc) or _writes(s, loc) for s in inner):
                    return None
            elif _writes(stmt, loc):
                return self.operand(fname, prefix[:i], stmt.src)
            elif _kills(fn, stmt, loc):
                return None
        if loc[0] == "local" or fname in self.external or not self.callers.get(fname):
            return None
        values: set[int] = set()
        for caller, call in self.callers[fname]:
            got = self.at_call(caller, call, fn, loc)
            if got is None:
                return None
            values |= got
        return frozenset(values)


def _all_operands(stmt: Stmt) -> tuple[Operand, ...]:
    if isinstance(stmt, Assign):
        return (stmt.dst, stmt.src)
    if isinstance(stmt, (Call, CallIndirect)):
        return stmt.args
    if isinstance(stmt, Switch):
        return (stmt.selector,)
    if isinstance(stmt, Syscall):
        return (stmt.number,)
    return (stmt.task,)


def _writes(stmt: Stmt, loc: tuple) -> bool:
    if not isinstance(stmt, Assign):
        return False
    dst = stmt.dst
    if loc[0] == "local":
        return isinstance(dst, LocalRef) and dst.name == loc[1]
    if loc[0] == "field":
        return isinstance(dst, FieldRef) and (dst.param, dst.field) == loc[1:]
    return False


def _kills(fn: NirFunction, stmt: Stmt, loc: tuple) -> bool:
    if loc[0] != "field":
        return False
    if isinstance(stmt, Assign):
        dst = stmt.dst
        return isinstance(dst, FieldRef) and dst.field == loc[2] and dst.param != loc[1]
    if isinstance(stmt, (Call, CallIndirect)):
        return _struct_args(fn, stmt.args)
    return False


# -- switch specialization ---------------------------------------------------


@dataclass(frozen=True, order=True)
class SwitchCandidate:
    function: str
    switch_sid: int
    caller: str
    call_sid: int
    value: int

    def to_json(self) -> dict:
        return {
            "function": self.function,
            "switch": self.switch_sid,
            "caller": self.caller,
            "site": self.call_sid,
            "value": self.value,
        }


def _branch_callees(branch: tuple[Stmt, ...]) -> frozenset[str]:
    out = set()
    for stmt in walk(branch):
        if isinstance(stmt, Call):
            out.add(stmt.callee)
        elif isinstance(stmt, CallIndirect):
            out.add(f"*{stmt.target}")
    return frozenset(out)


def switch_patterns(program: NirProgram) -> list[tuple[NirFunction, Switch, tuple]]:
    """Switches whose selector is a parameter (or its field) untouched before
    the switch, and whose branches call different sets of functions."""
    found = []
    for fn in program.functions:
        for stmt in walk(fn.body):
            if not isinstance(stmt, Switch):
                continue
            sel = stmt.selector
            if isinstance(sel, ParamRef):
                loc: tuple = ("param", sel.name)
            elif isinstance(sel, FieldRef):
                loc = ("field", sel.param, sel.field)
            else:
                continue
            if len({_branch_callees(b) for b in stmt.branches()}) < 2:
                continue
            prefix = _prefix(fn.body, stmt.sid) or ()
            if any(_writes(s, loc) or _kills(fn, s, loc) for s in walk(prefix)):
                continue
            found.append((fn, stmt, loc))
    return found


def _switch_sites(program: NirProgram) -> tuple[list[SwitchCandidate], list[Edge]]:
    tracer = _ConstTracer(program)
    found, loose = [], []
    for fn, switch, loc in switch_patterns(program):
        for caller, call in tracer.callers.get(fn.name, ()):
            values = tracer.at_call(caller, call, fn, loc)
            if values is not None and len(values) == 1:
                found.append(SwitchCandidate(fn.name, switch.sid, caller.name, call.sid, next(iter(values))))
            else:
                loose.append((caller.name, call.sid, fn.name))
    return sorted(found), sorted(set(loose))


def find_switch_candidates(program: NirProgram) -> list[SwitchCandidate]:
    return _switch_sites(program)[0]


def specialize_switch(program: NirProgram) -> tuple[NirProgram, CloneReport]:
    entries: list[CloneEntry] = []
    keys: dict[tuple[str, int, int], str] = {}
    while True:
        candidates = find_switch_candidates(program)
        if not candidates:
            break
        per_site: dict[tuple[str, int], SwitchCandidate] = {}
        for cand in candidates:
            per_site.setdefault((cand.caller, cand.call_sid), cand)
        changed: dict[str, NirFunction] = {}
        taken = set(program.names)

        def current(name: str) -> NirFunction:
            return changed.get(name) or program.function(name)

        for cand in sorted(per_site.values()):
            key = (cand.function, cand.switch_sid, cand.value)
            name = keys.get(key)
            if name is None:
                name = _clone_name(cand.function, cand.value, taken, str(cand.switch_sid))
                keys[key] = name
                taken.add(name)
                original = program.function(cand.function)

                def inline(stmt: Stmt, sid=cand.switch_sid, value=cand.value) -> tuple[Stmt, ...]:
                    if isinstance(stmt, Switch) and stmt.sid == sid:
                        return stmt.body_for(value)
                    return (stmt,)

                changed[name] = NirFunction(name, original.params, _map_body(original.body, inline))
                entries.append(CloneEntry(cand.function, name, "switch", cand.value))
            changed[cand.caller] = _redirect(current(cand.caller), cand.call_sid, name)
        program = program.replace_functions(changed)
    loose = _switch_sites(program)[1]
    return program, CloneReport(tuple(entries), tuple(loose))


# -- function-pointer specialization ----------------------------------------


def dependent_params(program: NirProgram) -> frozenset[tuple[str, str]]:
    """Function-pointer parameters that are invoked, submitted, or forwarded
    to another such parameter."""
    dep: set[tuple[str, str]] = set()
    for fn in program.functions:
        for stmt in walk(fn.body):
            if isinstance(stmt, CallIndirect):
                dep.add((fn.name, stmt.target))
            elif isinstance(stmt, SubmitPool) and isinstance(stmt.task, ParamRef):
                dep.add((fn.name, stmt.task.name))
    changed = True
    while changed:
        changed = False
        for fn in program.functions:
            for stmt in walk(fn.body):
                if not isinstance(stmt, Call):
                    continue
                callee = program.function(stmt.callee)
                for p, arg in zip(callee.params, stmt.args):
                    if (callee.name, p.name) in dep and isinstance(arg, ParamRef):
                        key = (fn.name, arg.name)
                        if fn.param_kind(arg.name) == "fnptr" and key not in dep:
                            dep.add(key)
                            changed = True
    return frozenset(dep)


def _static_fn_arg(fn: NirFunction, call: Call, arg: Operand) -> str | None:
    if isinstance(arg, FnRef):
        return arg.name
    if isinstance(arg, LocalRef):
        sources = [
            s for s in walk(fn.body)
            if isinstance(s, Assign) and isinstance(s.dst, LocalRef) and s.dst.name == arg.name
        ]  # fmt: skip
        prefix = _prefix(fn.body, call.sid) or ()
        if len(sources) == 1 and isinstance(sources[0].src, FnRef) and sources[0] in prefix:
            return sources[0].src.name
    return None


def _substitute(fn: NirFunction, name: str, param: str, target: NirFunction) -> NirFunction:
    def op(o: Operand) -> Operand:
        return FnRef(target.name) if isinstance(o, ParamRef) and o.name == param else o

    def rewrite(stmt: Stmt) -> tuple[Stmt, ...]:
        if isinstance(stmt, CallIndirect):
            args = tuple(op(a) for a in stmt.args)
            if stmt.target == param and _args_fit(target, fn, args):
                return (Call(stmt.sid, target.name, args),)
            return (CallIndirect(stmt.sid, stmt.target, args),)
        if isinstance(stmt, Call):
            return (Call(stmt.sid, stmt.callee, tuple(op(a) for a in stmt.args)),)
        if isinstance(stmt, Assign):
            return (Assign(stmt.sid, stmt.dst, op(stmt.src)),)
        if isinstance(stmt, SubmitPool):
            return (SubmitPool(stmt.sid, op(stmt.task)),)
        return (stmt,)

    return NirFunction(name, fn.params, _map_body(fn.body, rewrite))


def _args_fit(callee: NirFunction, caller: NirFunction, args: tuple[Operand, ...]) -> bool:
    if len(args) != len(callee.params):
        return False
    for p, a in zip(callee.params, args):
        is_fn = isinstance(a, (FnRef, LocalRef)) or (
            isinstance(a, ParamRef) and caller.param_kind(a.name) == "fnptr"
        )
        if p.kind == "fnptr" and not is_fn:
            return False
        if p.kind == "value" and (isinstance(a, FnRef) or (isinstance(a, ParamRef) and caller.param_kind(a.name) == "fnptr")):
            return False
    return True


def specialize_fnptr(program: NirProgram) -> tuple[NirProgram, CloneReport]:
    entries: list[CloneEntry] = []
    depth: dict[str, int] = {}
    keys: dict[tuple[str, str, str], str] = {}
    while True:
        dep = dependent_params(program)
        sites = []
        for fn in program.functions:
            for stmt in walk(fn.body):
                if not isinstance(stmt, Call):
                    continue
                callee = program.function(stmt.callee)
                for p, arg in zip(callee.params, stmt.args):
                    if (callee.name, p.name) not in dep:
                        continue
                    target = _static_fn_arg(fn, stmt, arg)
                    if target is not None:
                        sites.append((fn.name, stmt.sid, callee.name, p.name, target))
                        break
        if not sites:
            break
        changed: dict[str, NirFunction] = {}
        taken = set(program.names)
        for caller, sid, callee, param, target in sorted(sites):
            key = (callee, param, target)
            name = keys.get(key)
            if name is None:
                name = _clone_name(callee, target, taken, param)
                keys[key] = name
                taken.add(name)
                changed[name] = _substitute(
                    program.function(callee), name, param, program.function(target)
                )
                depth[name] = depth.get(caller, 0) + 1
                entries.append(CloneEntry(callee, name, "fnptr", target, depth[name]))
            base = changed.get(caller) or program.function(caller)
            changed[caller] = _redirect(base, sid, name)
        program = program.replace_functions(changed)
    return program, CloneReport(tuple(entries), tuple(_ambiguous_fn_sites(program)))


def _ambiguous_fn_sites(program: NirProgram) -> list[Edge]:
    dep = dependent_params(program)
    closure = fnptr_targets(program)
    out = set()
    for fn in program.functions:
        for stmt in walk(fn.body):
            if isinstance(stmt, Call):
                callee = program.function(stmt.callee)
                for p, arg in zip(callee.params, stmt.args):
                    if (callee.name, p.name) in dep and len(operand_functions(program, fn, arg, closure)) > 1:
                        out.add((fn.name, stmt.sid, callee.name))
    return sorted(out)


def refine(program: NirProgram) -> tuple[NirProgram, CloneReport]:
    """Apply both specializations until neither produces a clone."""
    report = CloneReport()
    while True:
        program, fn_report = specialize_fnptr(program)
        program, sw_report = specialize_switch(program)
        report = CloneReport(
            report.clones + fn_report.clones + sw_report.clones,
            tuple(sorted(set(fn_report.indeterminate) | set(sw_report.indeterminate))),
        )
        if not fn_report.clones and not sw_report.clones:
            return program, report


# -- syscall resolution ------------------------------------------------------


@dataclass(frozen=True)
class SyscallResolution:
    syscalls: dict[str, frozenset[str]] = field(default_factory=dict)
    unresolved_sites: tuple[tuple[str, int], ...] = ()

    def to_json(self) -> dict:
        return {
            "syscalls": {k: sorted(v) for k, v in sorted(self.syscalls.items())},
            "unresolved_sites": [{"function": f, "site": s} for f, s in self.unresolved_sites],
        }


def resolve_syscalls(
    program: NirProgram,
    cg: NativeCallGraph,
    table: SyscallTable,
    strict: bool = False,
) -> SyscallResolution:
    """Per-function transitive syscall sets.

    Syscall numbers are constants, single-assignment locals, or parameters;
    a parameter resolves to the constants all incoming call sites pass. A
    parameter fed by several constants resolves to all of them.
    """
    missing = set(program.names) ^ set(cg.nodes)
    if missing:
        raise AnalysisError(f"call graph does not match program (e.g. {sorted(missing)[0]!r})")
    incoming: dict[str, list[tuple[str, int]]] = defaultdict(list)
    for caller, sid, callee in cg.edges:
        incoming[callee].append((caller, sid))
    external = set(program.entries) | {b.function for b in program.bindings}
    for targets in pool_task_targets(program).values():
        external |= targets
    locals_of = {fn.name: local_sources(fn) for fn in program.functions}

    @lru_cache(maxsize=None)
    def param_values(fname: str, pname: str) -> frozenset[int] | None:
        if fname in external or not incoming.get(fname):
            return None
        index = program.function(fname).param_index(pname)
        values: set[int] = set()
        for caller, sid in incoming[fname]:
            try:
                stmt = program.function(caller).stmt(sid)
            except KeyError:
                raise AnalysisError(f"edge {caller}@{sid} -> {fname} has no call statement") from None
            if not isinstance(stmt, (Call, CallIndirect)) or index >= len(stmt.args):
                return None
            got = consts(caller, stmt.args[index], frozenset())
            if got is None:
                return None
            values |= got
        return frozenset(values)

    def consts(fname: str, op: Operand, seen: frozenset[str]) -> frozenset[int] | None:
        if isinstance(op, Const):
            return frozenset({op.value})
        if isinstance(op, ParamRef):
            return param_values(fname, op.name)
        if isinstance(op, LocalRef) and op.name not in seen:
            sources = locals_of[fname].get(op.name, [])
            if len(sources) == 1:
                return consts(fname, sources[0], seen | {op.name})
        return None

    everything = table.names
    own: dict[str, frozenset[str]] = {}
    unresolved: list[tuple[str, int]] = []
    for fn in program.functions:
        names: set[str] = set()
        for stmt in walk(fn.body):
            if not isinstance(stmt, Syscall):
                continue
            numbers = consts(fn.name, stmt.number, frozenset())
            if numbers is None:
                unresolved.append((fn.name, stmt.sid))
                if strict:
                    raise AnalysisError(f"unresolved syscall number at {fn.name} statement {stmt.sid}")
                names |= everything
                continue
            for number in numbers:
                try:
                    names.add(table.name_of(number))
                except KeyError:
                    raise AnalysisError(
                        f"syscall number {number} at {fn.name} statement {stmt.sid} is not in the table"
                    ) from None
        own[fn.name] = frozenset(names)

    succ = cg.successors()
    total: dict[str, frozenset[str]] = {}

    def closure(name: str) -> frozenset[str]:
        if name not in total:
            acc = set(own[name])
            for nxt in succ.get(name, ()):
                acc |= closure(nxt)
            total[name] = frozenset(acc)
        return total[name]

    for name in sorted(program.names):
        closure(name)
    return SyscallResolution(total, tuple(sorted(unresolved)))
