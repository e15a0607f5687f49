"""A loop-free native IR for the binding, dependency and libc layers.

Programs are small: functions with value or function-pointer parameters,
field writes on struct parameters, direct and indirect calls, integer
switches, syscall statements and thread-pool submissions. Every statement
carries a ``sid`` (its preorder index in the original function body); clones
keep the sids of the statements they copy so call sites stay comparable
across refinements.

The interpreter here is the ground truth that the static analyses in
``native_cg`` are tested against.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Union

from syscut._jsonio import read_json
from syscut.errors import InputError, SyscutError

PARAM_KINDS = ("value", "fnptr")


# -- operands ----------------------------------------------------------------


@dataclass(frozen=True)
class Const:
    value: int

    def to_json(self) -> dict:
        return {"const": self.value}


@dataclass(frozen=True)
class ParamRef:
    name: str

    def to_json(self) -> dict:
        return {"param": self.name}


@dataclass(frozen=True)
class FieldRef:
    param: str
    field: str

    def to_json(self) -> dict:
        return {"field": [self.param, self.field]}


@dataclass(frozen=True)
class LocalRef:
    name: str

    def to_json(self) -> dict:
        return {"local": self.name}


@dataclass(frozen=True)
class FnRef:
    name: str

    def to_json(self) -> dict:
        return {"fnref": self.name}


Operand = Union[Const, ParamRef, FieldRef, LocalRef, FnRef]
Dest = Union[LocalRef, FieldRef]


# -- statements --------------------------------------------------------------


@dataclass(frozen=True)
class Assign:
    sid: int
    dst: Dest
    src: Operand

    def to_json(self) -> dict:
        return {"op": "assign", "sid": self.sid, "dst": self.dst.to_json(), "src": self.src.to_json()}


@dataclass(frozen=True)
class Call:
    sid: int
    callee: str
    args: tuple[Operand, ...] = ()

    def to_json(self) -> dict:
        return {"op": "call", "sid": self.sid, "callee": self.callee, "args": [a.to_json() for a in self.args]}


@dataclass(frozen=True)
class CallIndirect:
    sid: int
    target: str
    args: tuple[Operand, ...] = ()

    def to_json(self) -> dict:
        return {
            "op": "call_indirect",
            "sid": self.sid,
            "target": self.target,
            "args": [a.to_json() for a in self.args],
        }


@dataclass(frozen=True)
class Case:
    value: int
    body: tuple[Stmt, ...]

    def to_json(self) -> dict:
        return {"value": self.value, "body": [s.to_json() for s in self.body]}


@dataclass(frozen=True)
class Switch:
    sid: int
    selector: Operand
    cases: tuple[Case, ...]
    default_body: tuple[Stmt, ...] = ()

    def to_json(self) -> dict:
        return {
            "op": "switch",
            "sid": self.sid,
            "selector": self.selector.to_json(),
            "cases": [c.to_json() for c in self.cases],
            "default_body": [s.to_json() for s in self.default_body],
        }

    def branches(self) -> list[tuple[Stmt, ...]]:
        return [c.body for c in self.cases] + [self.default_body]

    def body_for(self, value: int) -> tuple[Stmt, ...]:
        for case in self.cases:
            if case.value == value:
                return case.body
        return self.default_body


@dataclass(frozen=True)
class Syscall:
    sid: int
    number: Operand

    def to_json(self) -> dict:
        return {"op": "syscall", "sid": self.sid, "number": self.number.to_json()}


@dataclass(frozen=True)
class SubmitPool:
    sid: int
    task: Operand

    def to_json(self) -> dict:
        return {"op": "submit_pool", "sid": self.sid, "task": self.task.to_json()}


Stmt = Union[Assign, Call, CallIndirect, Switch, Syscall, SubmitPool]


def walk(body: tuple[Stmt, ...]) -> Iterator[Stmt]:
    """All statements of a body in preorder, descending into switch branches."""
    for stmt in body:
        yield stmt
        if isinstance(stmt, Switch):
            for branch in stmt.branches():
                yield from walk(branch)


def operands(stmt: Stmt) -> tuple[Operand, ...]:
    if isinstance(stmt, Assign):
        return (stmt.src,)
    if isinstance(stmt, (Call, CallIndirect)):
        return stmt.args
    if isinstance(stmt, Switch):
        return (stmt.selector,)
    if isinstance(stmt, Syscall):
        return (stmt.number,)
    return (stmt.task,)


# -- program -----------------------------------------------------------------


@dataclass(frozen=True)
class NirParam:
    name: str
    kind: str = "value"


@dataclass(frozen=True)
class NirFunction:
    name: str
    params: tuple[NirParam, ...] = ()
    body: tuple[Stmt, ...] = ()

    def param_index(self, name: str) -> int:
        for i, p in enumerate(self.params):
            if p.name == name:
                return i
        raise KeyError(name)

    def param_kind(self, name: str) -> str | None:
        for p in self.params:
            if p.name == name:
                return p.kind
        return None

    def stmt(self, sid: int) -> Stmt:
        for s in walk(self.body):
            if s.sid == sid:
                return s
        raise KeyError(f"{self.name} has no statement {sid}")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "params": [{"name": p.name, "kind": p.kind} for p in self.params],
            "body": [s.to_json() for s in self.body],
        }


@dataclass(frozen=True)
class NirBinding:
    module: str
    method: str
    function: str


@dataclass(frozen=True)
class NirProgram:
    functions: tuple[NirFunction, ...]
    bindings: tuple[NirBinding, ...] = ()
    entries: tuple[str, ...] = ()
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_index", {f.name: f for f in self.functions})

    def function(self, name: str) -> NirFunction:
        return self._index[name]

    def __contains__(self, name: object) -> bool:
        return name in self._index

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.functions]

    def replace_functions(self, functions: dict[str, NirFunction]) -> NirProgram:
        """New program with ``functions`` substituted or appended (sorted by name)."""
        merged = dict(self._index)
        merged.update(functions)
        return NirProgram(tuple(merged[n] for n in sorted(merged)), self.bindings, self.entries)

    def to_json(self) -> dict:
        return {
            "functions": [f.to_json() for f in sorted(self.functions, key=lambda f: f.name)],
            "bindings": [
                {"module": b.module, "method": b.method, "function": b.function}
                for b in sorted(self.bindings, key=lambda b: (b.module, b.method))
            ],
            "entries": sorted(self.entries),
        }


# -- parsing -----------------------------------------------------------------


def _operand(raw: object, where: str) -> Operand:
    if not isinstance(raw, dict) or len(raw) != 1:
        raise InputError(f"{where}: operand must be a single-key object, got {raw!r}")
    ((key, value),) = raw.items()
    if key == "const" and isinstance(value, int) and not isinstance(value, bool):
        return Const(value)
    if key == "param" and isinstance(value, str):
        return ParamRef(value)
    if key == "local" and isinstance(value, str):
        return LocalRef(value)
    if key == "fnref" and isinstance(value, str):
        return FnRef(value)
    if key == "field" and isinstance(value, list) and len(value) == 2 and all(isinstance(v, str) for v in value):
        return FieldRef(value[0], value[1])
    raise InputError(f"{where}: malformed operand {raw!r}")


class _StmtParser:
    def __init__(self, fn_name: str) -> None:
        self.fn_name = fn_name
        self.next_sid = 0

    def body(self, raw: object, where: str) -> tuple[Stmt, ...]:
        if not isinstance(raw, list):
            raise InputError(f"{where}: body must be a list")
        return tuple(self.stmt(s, f"{where}[{i}]") for i, s in enumerate(raw))

    def stmt(self, raw: object, where: str) -> Stmt:
        if not isinstance(raw, dict) or "op" not in raw:
            raise InputError(f"{where}: statement needs an 'op'")
        sid = raw.get("sid", self.next_sid)
        if not isinstance(sid, int):
            raise InputError(f"{where}: sid must be an integer")
        self.next_sid = max(self.next_sid, sid) + 1
        op = raw["op"]
        try:
            if op == "assign":
                dst = _operand(raw["dst"], where)
                if not isinstance(dst, (LocalRef, FieldRef)):
                    raise InputError(f"{where}: assign destination must be a local or a field")
                return Assign(sid, dst, _operand(raw["src"], where))
            if op == "call":
                return Call(sid, raw["callee"], tuple(_operand(a, where) for a in raw.get("args", [])))
            if op == "call_indirect":
                return CallIndirect(sid, raw["target"], tuple(_operand(a, where) for a in raw.get("args", [])))
            if op == "switch":
                selector = _operand(raw["selector"], where)
                cases = []
                for i, case in enumerate(raw.get("cases", [])):
                    value = case["value"]
                    if not isinstance(value, int) or isinstance(value, bool):
                        raise InputError(f"{where}: case value must be an integer")
                    cases.append(Case(value, self.body(case.get("body", []), f"{where}.cases[{i}]")))
                default = self.body(raw.get("default_body", []), f"{where}.default_body")
                return Switch(sid, selector, tuple(cases), default)
            if op == "syscall":
                return Syscall(sid, _operand(raw["number"], where))
            if op == "submit_pool":
                return SubmitPool(sid, _operand(raw["task"], where))
        except (KeyError, TypeError) as exc:
            raise InputError(f"{where}: malformed {op!r} statement ({exc})") from None
        raise InputError(f"{where}: unknown op {op!r}")


def program_from_json(data: object, source: str = "<nir>") -> NirProgram:
    if not isinstance(data, dict) or not isinstance(data.get("functions"), list):
        raise InputError(f"{source}: NIR program needs a 'functions' list")
    functions = []
    for i, raw in enumerate(data["functions"]):
        where = f"{source}: functions[{i}]"
        if not isinstance(raw, dict) or not isinstance(raw.get("name"), str):
            raise InputError(f"{where}: function needs a name")
        name = raw["name"]
        params = []
        for p in raw.get("params", []):
            if isinstance(p, str):
                p = {"name": p}
            if not isinstance(p, dict) or not isinstance(p.get("name"), str):
                raise InputError(f"{where} ({name}): malformed parameter {p!r}")
            params.append(NirParam(p["name"], p.get("kind", "value")))
        body = _StmtParser(name).body(raw.get("body", []), f"{source}: {name}")
        functions.append(NirFunction(name, tuple(params), body))
    bindings = []
    for b in data.get("bindings", []):
        try:
            bindings.append(NirBinding(b["module"], b["method"], b["function"]))
        except (KeyError, TypeError):
            raise InputError(f"{source}: binding needs module, method and function: {b!r}") from None
    program = NirProgram(tuple(functions), tuple(bindings), tuple(data.get("entries", [])))
    validate(program, source)
    return program


def parse_nir(path: str | Path) -> NirProgram:
    return program_from_json(read_json(path, "NIR program"), str(path))


# -- validation --------------------------------------------------------------


def validate(program: NirProgram, source: str = "<nir>") -> None:
    seen: set[str] = set()
    for fn in program.functions:
        if fn.name in seen:
            raise InputError(f"{source}: duplicate function {fn.name!r}")
        seen.add(fn.name)
    for fn in program.functions:
        _validate_function(program, fn, source)
    for b in program.bindings:
        if b.function not in program:
            raise InputError(f"{source}: binding {b.module}.{b.method} names unknown function {b.function!r}")
    for entry in program.entries:
        if entry not in program:
            raise InputError(f"{source}: entry {entry!r} is not a function")
    cycle = find_cycle(program)
    if cycle:
        raise InputError(f"{source}: recursion is not supported: {' -> '.join(cycle)}")


def _validate_function(program: NirProgram, fn: NirFunction, source: str) -> None:
    names = [p.name for p in fn.params]
    if len(set(names)) != len(names):
        raise InputError(f"{source}: {fn.name}: duplicate parameter names")
    for p in fn.params:
        if p.kind not in PARAM_KINDS:
            raise InputError(f"{source}: {fn.name}: parameter {p.name!r} has unknown kind {p.kind!r}")
    sids: set[int] = set()

    def where(stmt: Stmt) -> str:
        return f"{source}: {fn.name} statement {stmt.sid}"

    def check(op: Operand, stmt: Stmt, role: str) -> None:
        if isinstance(op, (ParamRef, FieldRef)):
            pname = op.name if isinstance(op, ParamRef) else op.param
            kind = fn.param_kind(pname)
            if kind is None:
                raise InputError(f"{where(stmt)}: unknown parameter {pname!r}")
            if isinstance(op, FieldRef) and kind == "fnptr":
                raise InputError(f"{where(stmt)}: field access on function pointer {pname!r}")
            if isinstance(op, ParamRef) and kind == "fnptr" and role == "value":
                raise InputError(f"{where(stmt)}: function pointer {pname!r} used as a value")
        if isinstance(op, FnRef):
            if op.name not in program:
                raise InputError(f"{where(stmt)}: fnref to unknown function {op.name!r}")
            if role == "value":
                raise InputError(f"{where(stmt)}: fnref {op.name!r} used as a value")

    def check_args(stmt: Stmt, callee: NirFunction | None, args: tuple[Operand, ...]) -> None:
        if callee is not None and len(args) != len(callee.params):
            raise InputError(
                f"{where(stmt)}: {callee.name} takes {len(callee.params)} arguments, got {len(args)}"
            )
        for i, arg in enumerate(args):
            role = "any"
            if callee is not None:
                role = "fn" if callee.params[i].kind == "fnptr" else "value"
            if role == "fn" and isinstance(arg, (Const, FieldRef)):
                raise InputError(f"{where(stmt)}: argument {i} of {callee.name} must be a function")
            if role == "fn" and isinstance(arg, ParamRef) and fn.param_kind(arg.name) == "value":
                raise InputError(f"{where(stmt)}: argument {i} of {callee.name} must be a function")
            check(arg, stmt, role)

    for stmt in walk(fn.body):
        if stmt.sid in sids:
            raise InputError(f"{where(stmt)}: duplicate statement id")
        sids.add(stmt.sid)
        if isinstance(stmt, Assign):
            if isinstance(stmt.dst, FieldRef):
                check(stmt.dst, stmt, "value")
            check(stmt.src, stmt, "any")
        elif isinstance(stmt, Call):
            if stmt.callee not in program:
                raise InputError(f"{where(stmt)}: call to undefined function {stmt.callee!r}")
            check_args(stmt, program.function(stmt.callee), stmt.args)
        elif isinstance(stmt, CallIndirect):
            if fn.param_kind(stmt.target) != "fnptr":
                raise InputError(f"{where(stmt)}: indirect call target {stmt.target!r} is not a fnptr parameter")
            check_args(stmt, None, stmt.args)
        elif isinstance(stmt, Switch):
            check(stmt.selector, stmt, "value")
            values = [c.value for c in stmt.cases]
            if len(set(values)) != len(values):
                raise InputError(f"{where(stmt)}: duplicate case values")
        elif isinstance(stmt, Syscall):
            check(stmt.number, stmt, "value")
        elif isinstance(stmt, SubmitPool):
            if isinstance(stmt.task, (Const, FieldRef)):
                raise InputError(f"{where(stmt)}: pool task must be a function")
            check(stmt.task, stmt, "fn")


# -- function-pointer flow ---------------------------------------------------


def local_sources(fn: NirFunction) -> dict[str, list[Operand]]:
    out: dict[str, list[Operand]] = defaultdict(list)
    for stmt in walk(fn.body):
        if isinstance(stmt, Assign) and isinstance(stmt.dst, LocalRef):
            out[stmt.dst.name].append(stmt.src)
    return out


def fnptr_targets(program: NirProgram) -> dict[tuple[str, str], frozenset[str]]:
    """Flow-insensitive closure: functions that may reach each fnptr parameter."""
    targets: dict[tuple[str, str], set[str]] = defaultdict(set)
    sites = []  # (caller, callee, param, operand)
    for fn in program.functions:
        for stmt in walk(fn.body):
            if isinstance(stmt, Call):
                callee = program.function(stmt.callee)
                for p, arg in zip(callee.params, stmt.args):
                    if p.kind == "fnptr":
                        sites.append((fn, callee.name, p.name, arg))
    locals_by_fn = {fn.name: local_sources(fn) for fn in program.functions}

    def values(fn: NirFunction, op: Operand, seen: frozenset[str] = frozenset()) -> set[str]:
        if isinstance(op, FnRef):
            return {op.name}
        if isinstance(op, ParamRef):
            return set(targets.get((fn.name, op.name), ()))
        if isinstance(op, LocalRef) and op.name not in seen:
            out: set[str] = set()
            for src in locals_by_fn[fn.name].get(op.name, ()):
                out |= values(fn, src, seen | {op.name})
            return out
        return set()

    changed = True
    while changed:
        changed = False
        for caller, callee, pname, arg in sites:
            new = values(caller, arg) - targets[(callee, pname)]
            if new:
                targets[(callee, pname)] |= new
                changed = True
    return {k: frozenset(v) for k, v in targets.items()}


def operand_functions(
    program: NirProgram,
    fn: NirFunction,
    op: Operand,
    closure: dict[tuple[str, str], frozenset[str]] | None = None,
) -> frozenset[str]:
    """Functions a function-valued operand may denote inside ``fn``."""
    closure = fnptr_targets(program) if closure is None else closure
    if isinstance(op, FnRef):
        return frozenset({op.name})
    if isinstance(op, ParamRef):
        return closure.get((fn.name, op.name), frozenset())
    if isinstance(op, LocalRef):
        out: set[str] = set()
        for src in local_sources(fn).get(op.name, ()):
            if not isinstance(src, LocalRef):
                out |= operand_functions(program, fn, src, closure)
        return frozenset(out)
    return frozenset()


def pool_task_targets(program: NirProgram) -> dict[tuple[str, int], frozenset[str]]:
    """For each submit_pool site (function, sid), the task functions it may submit."""
    closure = fnptr_targets(program)
    out = {}
    for fn in program.functions:
        for stmt in walk(fn.body):
            if isinstance(stmt, SubmitPool):
                out[(fn.name, stmt.sid)] = operand_functions(program, fn, stmt.task, closure)
    return out


def direct_successors(program: NirProgram) -> dict[str, set[str]]:
    closure = fnptr_targets(program)
    succ: dict[str, set[str]] = {fn.name: set() for fn in program.functions}
    for fn in program.functions:
        for stmt in walk(fn.body):
            if isinstance(stmt, Call):
                succ[fn.name].add(stmt.callee)
            elif isinstance(stmt, CallIndirect):
                succ[fn.name] |= closure.get((fn.name, stmt.target), frozenset())
    return succ


def find_cycle(program: NirProgram) -> list[str] | None:
    succ = direct_successors(program)
    state: dict[str, int] = {}
    stack: list[str] = []

    def visit(name: str) -> list[str] | None:
        state[name] = 1
        stack.append(name)
        for nxt in sorted(succ.get(name, ())):
            if state.get(nxt) == 1:
                return stack[stack.index(nxt):] + [nxt]
            if nxt not in state:
                found = visit(nxt)
                if found:
                    return found
        stack.pop()
        state[name] = 2
        return None

    for name in sorted(succ):
        if name not in state:
            found = visit(name)
            if found:
                return found
    return None


# -- interpreter -------------------------------------------------------------


class NirRuntimeError(SyscutError):
    """Concrete execution hit an unresolved syscall number or unbound pointer."""


class _Unknown:
    def __repr__(self) -> str:
        return "UNKNOWN"


UNKNOWN = _Unknown()


@dataclass
class ExecutionLog:
    call_edges: list[tuple[str, int, str]] = field(default_factory=list)
    syscalls: list[int] = field(default_factory=list)
    pool_tasks: list[str] = field(default_factory=list)


def interpret(program: NirProgram, entry: str, args: list | tuple = ()) -> ExecutionLog:
    """Run ``entry`` concretely.

    Value arguments are ints or dicts (structs, shared by reference); function
    pointer arguments are ``FnRef`` instances. Reading a missing field or an
    unassigned local yields an unknown value; a switch on an unknown value
    takes its default branch.
    """
    if entry not in program:
        raise InputError(f"entry {entry!r} is not a function")
    fn = program.function(entry)
    if len(args) != len(fn.params):
        raise InputError(f"{entry} takes {len(fn.params)} arguments, got {len(args)}")
    log = ExecutionLog()
    _run(program, fn, list(args), log)
    return log


def _run(program: NirProgram, fn: NirFunction, args: list, log: ExecutionLog) -> None:
    params = {p.name: a for p, a in zip(fn.params, args)}
    local: dict[str, object] = {}

    def value(op: Operand) -> object:
        if isinstance(op, Const):
            return op.value
        if isinstance(op, FnRef):
            return op
        if isinstance(op, ParamRef):
            return params.get(op.name, UNKNOWN)
        if isinstance(op, LocalRef):
            return local.get(op.name, UNKNOWN)
        struct = params.get(op.param)
        return struct.get(op.field, UNKNOWN) if isinstance(struct, dict) else UNKNOWN

    def execute(body: tuple[Stmt, ...]) -> None:
        for stmt in body:
            if isinstance(stmt, Assign):
                v = value(stmt.src)
                if isinstance(stmt.dst, LocalRef):
                    local[stmt.dst.name] = v
                else:
                    struct = params.get(stmt.dst.param)
                    if not isinstance(struct, dict):
                        raise NirRuntimeError(
                            f"{fn.name} statement {stmt.sid}: field write on non-struct {stmt.dst.param!r}"
                        )
                    struct[stmt.dst.field] = v
            elif isinstance(stmt, Call):
                log.call_edges.append((fn.name, stmt.sid, stmt.callee))
                _run(program, program.function(stmt.callee), [value(a) for a in stmt.args], log)
            elif isinstance(stmt, CallIndirect):
                target = params.get(stmt.target)
                if not isinstance(target, FnRef):
                    raise NirRuntimeError(f"{fn.name} statement {stmt.sid}: unbound function pointer {stmt.target!r}")
                callee = program.function(target.name)
                if len(callee.params) != len(stmt.args):
                    raise NirRuntimeError(f"{fn.name} statement {stmt.sid}: arity mismatch calling {callee.name}")
                log.call_edges.append((fn.name, stmt.sid, callee.name))
                _run(program, callee, [value(a) for a in stmt.args], log)
            elif isinstance(stmt, Switch):
                sel = value(stmt.selector)
                execute(stmt.body_for(sel) if isinstance(sel, int) else stmt.default_body)
            elif isinstance(stmt, Syscall):
                number = value(stmt.number)
                if not isinstance(number, int) or isinstance(number, bool):
                    raise NirRuntimeError(f"{fn.name} statement {stmt.sid}: unresolved syscall number")
                log.syscalls.append(number)
            elif isinstance(stmt, SubmitPool):
                task = value(stmt.task)
                if not isinstance(task, FnRef):
                    raise NirRuntimeError(f"{fn.name} statement {stmt.sid}: unbound pool task")
                log.pool_tasks.append(task.name)

    execute(fn.body)
