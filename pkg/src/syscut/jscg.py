"""Modular JavaScript call graphs: field-based static flow, builtin execution
patterns, dynamic-trace merging and command extraction.

The static analysis is a flow-insensitive fixpoint over abstract values.
Functions flow through variables (lexically scoped), object properties
(matched by name only), ``module.exports``/``exports`` and ``require``.
Calls whose callee is a member of a builtin module, a JS global object or
an ``internalBinding`` result become ``builtin_calls``/``binding_calls``
records instead of edges; the registry later turns callback arguments of
those records into ``builtin-pattern`` edges.
"""

from __future__ import annotations

import logging
import re
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

from syscut.corpus import (
    BuiltinRegistry,
    ModuleGraph,
    SourceModule,
    call_site_pos,
    iter_children,
    node_pos,
    string_literal,
)
from syscut.errors import InputError

logger = logging.getLogger(__name__)

TOP = "<top>"
EDGE_KINDS = ("static", "builtin-pattern", "dynamic")
COMMAND_METHODS = frozenset({"exec", "execSync", "spawn", "spawnSync"})

# Receivers of these names, when not locally bound, are engine globals.
GLOBAL_OBJECTS = frozenset(
    {
        "Array", "Boolean", "Buffer", "Date", "Error", "Function", "JSON", "Map",
        "Math", "Number", "Object", "Promise", "Proxy", "Reflect", "RegExp", "Set",
        "String", "Symbol", "WeakMap", "WeakSet", "console", "process",
    }
)  # fmt: skip
GLOBAL_FUNCTIONS = frozenset(
    {"setTimeout", "setInterval", "setImmediate", "queueMicrotask", "clearTimeout",
     "clearInterval", "clearImmediate", "eval"}
)  # fmt: skip

# Field-based owner inference for prototype methods on receivers we cannot type.
PROTOTYPE_METHODS = {
    **{m: "Array" for m in (
        "map", "forEach", "filter", "reduce", "reduceRight", "some", "every",
        "find", "findIndex", "findLast", "findLastIndex", "flatMap", "sort",
    )},
    **{m: "Promise" for m in ("then", "catch", "finally")},
    **{m: "Function" for m in ("bind", "call", "apply")},
}  # fmt: skip

_FUNCTION_TYPES = ("FunctionDeclaration", "FunctionExpression", "ArrowFunctionExpression")
_SPECIAL = frozenset({"module", "builtin", "global", "gmember", "binding", "require", "ibfn"})


@dataclass(frozen=True, order=True)
class FunctionId:
    module: str
    path: str

    def __str__(self) -> str:
        return f"{self.module}#{self.path}"

    @classmethod
    def parse(cls, text: str) -> FunctionId:
        module, sep, path = text.rpartition("#")
        if not sep or not module or not path.startswith(TOP):
            raise InputError(f"malformed function id {text!r}")
        return cls(module, path)

    @classmethod
    def top(cls, module: str) -> FunctionId:
        return cls(module, TOP)


@dataclass(frozen=True, order=True)
class Site:
    module: str
    line: int
    column: int

    def __str__(self) -> str:
        return f"{self.module}:{self.line}:{self.column}"

    @classmethod
    def parse(cls, text: str) -> Site:
        module, line, column = text.rsplit(":", 2)
        return cls(module, int(line), int(column))

    def to_json(self) -> dict:
        return {"module": self.module, "line": self.line, "column": self.column}


@dataclass(frozen=True, order=True)
class CallEdge:
    site: Site
    caller: FunctionId
    callee: FunctionId
    kind: str

    def to_json(self) -> dict:
        return {
            "site": self.site.to_json(),
            "caller": str(self.caller),
            "callee": str(self.callee),
            "kind": self.kind,
        }


@dataclass(frozen=True, order=True)
class BuiltinCall:
    site: Site
    caller: FunctionId
    owner: str
    method: str
    # Per argument: the function it is statically bound to, if any.
    fn_args: tuple[FunctionId | None, ...] = ()

    def to_json(self) -> dict:
        return {
            "site": self.site.to_json(),
            "caller": str(self.caller),
            "owner": self.owner,
            "method": self.method,
            "fn_args": [str(f) if f else None for f in self.fn_args],
        }


@dataclass(frozen=True, order=True)
class BindingCall:
    site: Site
    caller: FunctionId
    binding: str
    method: str

    def to_json(self) -> dict:
        return {
            "site": self.site.to_json(),
            "caller": str(self.caller),
            "binding": self.binding,
            "method": self.method,
        }


@dataclass(frozen=True, order=True)
class ExportRecord:
    module: str
    package: str
    name: str
    function: FunctionId

    def to_json(self) -> dict:
        return {
            "module": self.module,
            "package": self.package,
            "name": self.name,
            "function": str(self.function),
        }


@dataclass(frozen=True)
class CallGraph:
    nodes: frozenset[FunctionId]
    edges: frozenset[CallEdge] = frozenset()
    builtin_calls: frozenset[BuiltinCall] = frozenset()
    binding_calls: frozenset[BindingCall] = frozenset()
    exports: frozenset[ExportRecord] = frozenset()
    unresolved_calls: int = 0
    unresolved_callbacks: int = 0
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        triples = set()
        for edge in self.edges:
            if edge.kind not in EDGE_KINDS:
                raise InputError(f"unknown edge kind {edge.kind!r}")
            if edge.caller not in self.nodes or edge.callee not in self.nodes:
                raise InputError(f"edge endpoint missing from nodes: {edge.caller} -> {edge.callee}")
            triple = (edge.site, edge.caller, edge.callee)
            if triple in triples:
                raise InputError(f"duplicate edge at {edge.site}: {edge.caller} -> {edge.callee}")
            triples.add(triple)

    @property
    def triples(self) -> frozenset[tuple[Site, FunctionId, FunctionId]]:
        return frozenset((e.site, e.caller, e.callee) for e in self.edges)

    def successors(self) -> dict[FunctionId, set[FunctionId]]:
        succ: dict[FunctionId, set[FunctionId]] = defaultdict(set)
        for edge in self.edges:
            succ[edge.caller].add(edge.callee)
        return succ

    def to_json(self) -> dict:
        return {
            "nodes": sorted(str(n) for n in self.nodes),
            "edges": [e.to_json() for e in sorted(self.edges)],
            "builtin_calls": [b.to_json() for b in sorted(self.builtin_calls)],
            "binding_calls": [b.to_json() for b in sorted(self.binding_calls)],
            "exports": [x.to_json() for x in sorted(self.exports)],
            "unresolved_calls": self.unresolved_calls,
            "unresolved_callbacks": self.unresolved_callbacks,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json(cls, data: dict) -> CallGraph:
        fid = FunctionId.parse

        def site(d: dict) -> Site:
            return Site(d["module"], d["line"], d["column"])

        return cls(
            nodes=frozenset(fid(n) for n in data["nodes"]),
            edges=frozenset(
                CallEdge(site(e["site"]), fid(e["caller"]), fid(e["callee"]), e["kind"])
                for e in data["edges"]
            ),
            builtin_calls=frozenset(
                BuiltinCall(
                    site(b["site"]),
                    fid(b["caller"]),
                    b["owner"],
                    b["method"],
                    tuple(fid(a) if a else None for a in b["fn_args"]),
                )
                for b in data["builtin_calls"]
            ),
            binding_calls=frozenset(
                BindingCall(site(b["site"]), fid(b["caller"]), b["binding"], b["method"])
                for b in data.get("binding_calls", ())
            ),
            exports=frozenset(
                ExportRecord(x["module"], x["package"], x["name"], fid(x["function"]))
                for x in data.get("exports", ())
            ),
            unresolved_calls=data.get("unresolved_calls", 0),
            unresolved_callbacks=data.get("unresolved_callbacks", 0),
            warnings=tuple(data.get("warnings", ())),
        )


# --------------------------------------------------------------------------
# Per-module lexical index


class _ModuleIndex:
    """Function identities, lexical scopes and single-definition bindings."""

    def __init__(self, module: SourceModule) -> None:
        self.module = module
        self.top = FunctionId.top(module.id)
        self.fid: dict[int, FunctionId] = {id(module.ast): self.top}
        self.params: dict[FunctionId, list[str]] = {self.top: []}
        self.parent: dict[FunctionId, FunctionId | None] = {self.top: None}
        self.declared: dict[FunctionId, set[str]] = {self.top: {"exports", "module"}}
        self.functions: list[tuple[FunctionId, dict]] = [(self.top, module.ast)]
        # (scope, name) -> definitions; scope None collects implicit globals
        self.defs: dict[tuple[FunctionId | None, str], list[dict]] = defaultdict(list)
        self.calls: dict[tuple[int, int], dict] = {}
        self._assign(module.ast, self.top)
        self._collect(module.ast, self.top)

    def _assign(self, node: dict, current: FunctionId) -> None:
        taken: set[str] = set()
        stack = list(reversed(list(iter_children(node))))
        while stack:
            child = stack.pop()
            if child.get("type") in _FUNCTION_TYPES:
                name = (child.get("id") or {}).get("name")
                line, col = node_pos(child)
                label = name if name else f"anon@{line}:{col}"
                if label in taken:
                    label = f"{label}@{line}:{col}"
                taken.add(label)
                fid = FunctionId(self.module.id, f"{current.path}/{label}")
                self.fid[id(child)] = fid
                self.parent[fid] = current
                self.params[fid] = [
                    p.get("name") if p.get("type") == "Identifier" else None
                    for p in child.get("params") or []
                ]
                self.declared[fid] = {p for p in self.params[fid] if p}
                if child.get("type") == "FunctionExpression" and name:
                    self.declared[fid].add(name)
                self.functions.append((fid, child))
                if child.get("type") == "FunctionDeclaration" and name:
                    self.declared[current].add(name)
                    self.defs[(current, name)].append(child)
                self._assign(child, fid)
                continue
            if child.get("type") == "VariableDeclarator":
                target = child.get("id") or {}
                if target.get("type") == "Identifier":
                    self.declared[current].add(target["name"])
            stack.extend(reversed(list(iter_children(child))))

    def _collect(self, node: dict, current: FunctionId) -> None:
        # Second pass: binding definitions and call-site index (needs full scopes).
        for child in iter_children(node):
            ctype = child.get("type")
            inner = self.fid.get(id(child), current) if ctype in _FUNCTION_TYPES else current
            if ctype == "VariableDeclarator":
                target = child.get("id") or {}
                if target.get("type") == "Identifier" and child.get("init") is not None:
                    scope = self.scope_of(target["name"], current)
                    self.defs[(scope, target["name"])].append(child["init"])
            elif ctype == "AssignmentExpression" and child.get("operator") == "=":
                target = child.get("left") or {}
                if target.get("type") == "Identifier":
                    scope = self.scope_of(target["name"], current)
                    self.defs[(scope, target["name"])].append(child["right"])
            elif ctype in ("CallExpression", "NewExpression"):
                self.calls.setdefault(call_site_pos(child), child)
            self._collect(child, inner)

    def scope_of(self, name: str, fid: FunctionId) -> FunctionId | None:
        current: FunctionId | None = fid
        while current is not None:
            if name in self.declared[current]:
                return current
            current = self.parent[current]
        return None

    def static_value(self, node: dict | None, fid: FunctionId) -> dict | None:
        """Follow one level of single-definition variable binding."""
        if node is None:
            return None
        if node.get("type") != "Identifier":
            return node
        scope = self.scope_of(node["name"], fid)
        defs = self.defs.get((scope, node["name"]), [])
        return defs[0] if len(defs) == 1 else None

    def string_prefix(self, node: dict | None, fid: FunctionId, depth: int = 0) -> tuple[str, bool] | None:
        """Statically known leading text of a string expression.

        Returns ``(text, complete)``; ``complete`` is False when more text of
        unknown content may follow. Handles literals, single-definition
        variables, object-literal properties, ``+`` concatenation and
        ``[...].join(sep)`` over array literals.
        """
        if node is None or depth > 8:
            return None
        ntype = node.get("type")
        if ntype == "Literal":
            value = node.get("value")
            return (value, True) if isinstance(value, str) else None
        if ntype == "Identifier":
            value = self.static_value(node, fid)
            return self.string_prefix(value, fid, depth + 1) if value is not None else None
        if ntype == "MemberExpression":
            obj = self.static_value(node.get("object"), fid)
            name = _member_name(node)
            if obj is None or obj.get("type") != "ObjectExpression" or name is None:
                return None
            for prop in obj.get("properties") or []:
                key = prop.get("key") or {}
                if key.get("name") == name or key.get("value") == name:
                    return self.string_prefix(prop.get("value"), fid, depth + 1)
            return None
        if ntype == "BinaryExpression" and node.get("operator") == "+":
            left = self.string_prefix(node.get("left"), fid, depth + 1)
            if left is None:
                return None
            if not left[1]:
                return left
            right = self.string_prefix(node.get("right"), fid, depth + 1)
            if right is None:
                return (left[0], False)
            return (left[0] + right[0], right[1])
        if ntype == "CallExpression":
            callee = node.get("callee") or {}
            if callee.get("type") != "MemberExpression" or _member_name(callee) != "join":
                return None
            array = self.static_value(callee.get("object"), fid)
            if array is None or array.get("type") != "ArrayExpression":
                return None
            args = node.get("arguments") or []
            sep = self.string_prefix(args[0], fid, depth + 1) if args else (",", True)
            elements = array.get("elements") or []
            if not elements or sep is None or not sep[1]:
                return None
            first = self.string_prefix(elements[0], fid, depth + 1)
            if first is None:
                return None
            # Later pushes or elements are unknown; only the first is trusted.
            return (first[0] + sep[0], False) if first[1] else first
        return None

    def static_function(self, node: dict | None, fid: FunctionId) -> FunctionId | None:
        value = self.static_value(node, fid)
        if value is not None and value.get("type") in _FUNCTION_TYPES:
            return self.fid.get(id(value))
        return None


def _member_name(node: dict) -> str | None:
    prop = node.get("property") or {}
    if not node.get("computed") and prop.get("type") == "Identifier":
        return prop["name"]
    if node.get("computed"):
        return string_literal(prop)
    return None


# --------------------------------------------------------------------------
# Flow analysis


class _Flow:
    def __init__(self, graph: ModuleGraph, registry: BuiltinRegistry) -> None:
        self.graph = graph
        self.registry = registry
        self.index = {m.id: _ModuleIndex(m) for m in graph.modules}
        self.state: dict[tuple, set[tuple]] = defaultdict(set)
        self.changed = False
        # index of property-carrying locations per object id, for export listing
        self.obj_props: dict[tuple, set[str]] = defaultdict(set)
        for module in graph.modules:
            top = self.index[module.id].top
            self.state[("exports", module.id)].add(("exportsobj", module.id))
            self.state[("var", top, "exports")].add(("exportsobj", module.id))
            self.state[("var", top, "module")].add(("module", module.id))

    def add(self, loc: tuple, values: Iterable[tuple]) -> None:
        slot = self.state[loc]
        before = len(slot)
        slot.update(values)
        if len(slot) != before:
            self.changed = True

    def run(self) -> None:
        while True:
            self.changed = False
            self._reset_records()
            for module in self.graph.modules:
                idx = self.index[module.id]
                self.ev(module.ast, idx, idx.top)
            if not self.changed:
                break

    def _reset_records(self) -> None:
        self.edges: set[CallEdge] = set()
        self.builtin_calls: set[BuiltinCall] = set()
        self.binding_calls: set[BindingCall] = set()
        self.unresolved = 0
        self.warnings: list[str] = []

    # -- identifiers -------------------------------------------------------

    def _var_loc(self, name: str, idx: _ModuleIndex, fid: FunctionId) -> tuple:
        scope = idx.scope_of(name, fid)
        if scope is not None:
            return ("var", scope, name)
        return ("global", name)

    def _identifier(self, name: str, idx: _ModuleIndex, fid: FunctionId) -> set[tuple]:
        scope = idx.scope_of(name, fid)
        if scope is not None:
            return self.state[("var", scope, name)]
        if name == "require":
            return {("require",)}
        if name == "internalBinding":
            return {("ibfn",)}
        if name in GLOBAL_OBJECTS:
            return {("global", name)}
        if name in GLOBAL_FUNCTIONS:
            return {("gmember", "global", name)}
        return self.state[("global", name)]

    # -- properties --------------------------------------------------------

    def _read(self, base: set[tuple], prop: str) -> set[tuple]:
        out: set[tuple] = set()
        field_based = not base or any(v[0] not in _SPECIAL for v in base)
        for v in base:
            kind = v[0]
            if kind == "module" and prop == "exports":
                out |= self.state[("exports", v[1])]
            elif kind == "builtin":
                out.add(("bmember", v[1], prop))
            elif kind == "global":
                out.add(("gmember", v[1], prop))
            elif kind == "binding":
                out.add(("bdmember", v[1], prop))
        if field_based:
            out |= self.state[("prop", prop)]
        return out

    def _write(self, base: set[tuple], prop: str, values: set[tuple]) -> None:
        if not base or any(v[0] not in _SPECIAL for v in base):
            self.add(("prop", prop), values)
        for v in base:
            if v[0] == "module" and prop == "exports":
                self.add(("exports", v[1]), values)
            elif v[0] in ("exportsobj", "obj"):
                self.obj_props[v].add(prop)
                self.add(("objprop", v, prop), values)

    # -- evaluation --------------------------------------------------------

    def ev(self, node: dict | None, idx: _ModuleIndex, fid: FunctionId) -> set[tuple]:
        if not node:
            return set()
        ntype = node.get("type")
        if ntype in _FUNCTION_TYPES:
            return self._function(node, idx)
        if ntype in ("Program", "BlockStatement"):
            for stmt in node.get("body") or []:
                self.ev(stmt, idx, fid)
            return set()
        if ntype == "Identifier":
            return set(self._identifier(node["name"], idx, fid))
        if ntype == "Literal":
            return set()
        if ntype == "ExpressionStatement":
            self.ev(node.get("expression"), idx, fid)
            return set()
        if ntype == "VariableDeclaration":
            for decl in node.get("declarations") or []:
                self.ev(decl, idx, fid)
            return set()
        if ntype == "VariableDeclarator":
            values = self.ev(node.get("init"), idx, fid)
            target = node.get("id") or {}
            if target.get("type") == "Identifier":
                self.add(self._var_loc(target["name"], idx, fid), values)
            return set()
        if ntype == "ReturnStatement":
            self.add(("ret", fid), self.ev(node.get("argument"), idx, fid))
            return set()
        if ntype == "IfStatement":
            self.ev(node.get("test"), idx, fid)
            self.ev(node.get("consequent"), idx, fid)
            self.ev(node.get("alternate"), idx, fid)
            return set()
        if ntype == "ConditionalExpression":
            self.ev(node.get("test"), idx, fid)
            return self.ev(node.get("consequent"), idx, fid) | self.ev(
                node.get("alternate"), idx, fid
            )
        if ntype == "AssignmentExpression":
            return self._assignment(node, idx, fid)
        if ntype == "MemberExpression":
            base = self.ev(node.get("object"), idx, fid)
            if node.get("computed"):
                self.ev(node.get("property"), idx, fid)
            prop = _member_name(node)
            return self._read(base, prop) if prop is not None else set()
        if ntype == "ObjectExpression":
            obj = ("obj", idx.module.id, *node_pos(node))
            for prop in node.get("properties") or []:
                if prop.get("type") != "Property":
                    self.ev(prop, idx, fid)
                    continue
                values = self.ev(prop.get("value"), idx, fid)
                key = prop.get("key") or {}
                if prop.get("computed"):
                    self.ev(key, idx, fid)
                    name = string_literal(key)
                else:
                    name = key.get("name") if key.get("type") == "Identifier" else None
                    if name is None and key.get("type") == "Literal":
                        name = str(key.get("value"))
                if name is not None:
                    self._write({obj}, name, values)
            return {obj}
        if ntype in ("CallExpression", "NewExpression"):
            return self._call(node, idx, fid)
        # Unsupported node: no value of its own, but nested code still runs.
        for child in iter_children(node):
            self.ev(child, idx, fid)
        return set()

    def _function(self, node: dict, idx: _ModuleIndex) -> set[tuple]:
        fid = idx.fid[id(node)]
        value = ("fn", fid)
        name = (node.get("id") or {}).get("name")
        if name:
            if node.get("type") == "FunctionDeclaration":
                parent = idx.parent[fid]
                self.add(("var", parent, name), {value})
            else:
                self.add(("var", fid, name), {value})
        body = node.get("body")
        if node.get("type") == "ArrowFunctionExpression" and (body or {}).get("type") != (
            "BlockStatement"
        ):
            self.add(("ret", fid), self.ev(body, idx, fid))
        else:
            self.ev(body, idx, fid)
        return {value}

    def _assignment(self, node: dict, idx: _ModuleIndex, fid: FunctionId) -> set[tuple]:
        values = self.ev(node.get("right"), idx, fid)
        if node.get("operator") != "=":
            self.ev(node.get("left"), idx, fid)
            return set()
        target = node.get("left") or {}
        if target.get("type") == "Identifier":
            self.add(self._var_loc(target["name"], idx, fid), values)
        elif target.get("type") == "MemberExpression":
            base = self.ev(target.get("object"), idx, fid)
            if target.get("computed"):
                self.ev(target.get("property"), idx, fid)
            prop = _member_name(target)
            if prop is not None:
                self._write(base, prop, values)
        else:
            self.ev(target, idx, fid)
        return values

    def _call(self, node: dict, idx: _ModuleIndex, fid: FunctionId) -> set[tuple]:
        site = Site(idx.module.id, *call_site_pos(node))
        callee_node = node.get("callee") or {}
        args = node.get("arguments") or []
        base: set[tuple] = set()
        method: str | None = None
        if callee_node.get("type") == "MemberExpression":
            base = self.ev(callee_node.get("object"), idx, fid)
            if callee_node.get("computed"):
                self.ev(callee_node.get("property"), idx, fid)
            method = _member_name(callee_node)
            callees = self._read(base, method) if method is not None else set()
        else:
            callees = self.ev(callee_node, idx, fid)
        arg_values = [self.ev(a, idx, fid) for a in args]
        fn_args = tuple(idx.static_function(a, fid) for a in args)
        is_new = node.get("type") == "NewExpression"

        result: set[tuple] = set()
        handled = False
        owners: list[tuple[str, str]] = []
        for v in sorted(callees):
            kind = v[0]
            if kind == "fn":
                self._edge(site, fid, v[1], arg_values)
                result |= self.state[("ret", v[1])]
                handled = True
            elif kind == "require":
                handled = True
                result |= self._require(site, fid, idx)
            elif kind == "ibfn":
                handled = True
                name = string_literal(args[0]) if args else None
                if name is None:
                    self.warnings.append(f"{site}: non-literal internalBinding argument skipped")
                else:
                    result.add(("binding", name))
            elif kind in ("bmember", "gmember"):
                handled = True
                owners.append((v[1], v[2]))
            elif kind == "global":
                handled = True
                owners.append((v[1], "constructor"))
            elif kind == "bdmember":
                handled = True
                self.binding_calls.add(BindingCall(site, fid, v[1], v[2]))
        if method in PROTOTYPE_METHODS and (not base or any(v[0] not in _SPECIAL for v in base)):
            owners.append((PROTOTYPE_METHODS[method], method))
            handled = True
            if method in ("call", "apply"):
                for v in sorted(base):
                    if v[0] == "fn":
                        shifted = arg_values[1:] if method == "call" else []
                        self._edge(site, fid, v[1], shifted)
                        result |= self.state[("ret", v[1])]
        for owner, name in owners:
            self.builtin_calls.add(BuiltinCall(site, fid, owner, name, fn_args))
            entry = self.registry.get(owner, name)
            if entry is not None and entry.creates_function:
                result |= {v for v in base if v[0] == "fn"}
                if owner != "Function" and arg_values:
                    result |= arg_values[0]
        if not handled:
            self.unresolved += 1
        if is_new:
            result.add(("obj", idx.module.id, *node_pos(node)))
        return result

    def _edge(self, site: Site, caller: FunctionId, callee: FunctionId, args: list) -> None:
        self.edges.add(CallEdge(site, caller, callee, "static"))
        params = self.index[callee.module].params.get(callee, [])
        for name, values in zip(params, args):
            if name:
                self.add(("var", callee, name), values)

    def _require(self, site: Site, caller: FunctionId, idx: _ModuleIndex) -> set[tuple]:
        edge = self.graph.edge_at(site.module, site.line, site.column)
        if edge is None:
            return set()
        res = edge.resolution
        if res.kind == "local":
            self.edges.add(CallEdge(site, caller, FunctionId.top(res.target), "static"))
            return set(self.state[("exports", res.target)])
        if res.kind == "builtin":
            return {("builtin", res.target)}
        return set()

    # -- results -----------------------------------------------------------

    def nodes(self) -> frozenset[FunctionId]:
        return frozenset(fid for idx in self.index.values() for fid, _ in idx.functions)

    def exports(self) -> frozenset[ExportRecord]:
        out = set()
        for module in self.graph.modules:
            package = module.export_name
            for value in self.state[("exports", module.id)]:
                if value[0] == "fn":
                    out.add(ExportRecord(module.id, package, "default", value[1]))
                elif value[0] in ("exportsobj", "obj"):
                    for prop in self.obj_props.get(value, ()):
                        for v in self.state[("objprop", value, prop)]:
                            if v[0] == "fn":
                                out.add(ExportRecord(module.id, package, prop, v[1]))
        return frozenset(out)


# --------------------------------------------------------------------------
# Public operations


def build_static_cg(graph: ModuleGraph, registry: BuiltinRegistry | None = None) -> CallGraph:
    registry = registry or BuiltinRegistry()
    flow = _Flow(graph, registry)
    flow.run()
    cg = CallGraph(
        nodes=flow.nodes(),
        edges=frozenset(flow.edges),
        builtin_calls=frozenset(flow.builtin_calls),
        binding_calls=frozenset(flow.binding_calls),
        exports=flow.exports(),
        unresolved_calls=flow.unresolved,
        warnings=tuple(flow.warnings),
    )
    return annotate_builtin_edges(cg, registry)


def annotate_builtin_edges(cg: CallGraph, registry: BuiltinRegistry) -> CallGraph:
    """Add ``builtin-pattern`` edges from registry-described callback arguments.

    Function-creating entries (``Function.bind``) need no extra edges here:
    the flow analysis already models their result as the original function,
    whose node always exists.
    """
    if not len(registry):
        return cg
    nodes = set(cg.nodes)
    edges = set(cg.edges)
    triples = {(e.site, e.caller, e.callee) for e in edges}
    missed = 0
    for call in sorted(cg.builtin_calls):
        entry = registry.get(call.owner, call.method)
        if entry is None:
            continue
        if entry.creates_function:
            nodes.update(f for f in call.fn_args if f is not None)
        for pos in entry.positions(len(call.fn_args)):
            target = call.fn_args[pos]
            if target is None:
                missed += 1
                continue
            if (call.site, call.caller, target) in triples:
                continue
            triples.add((call.site, call.caller, target))
            nodes.add(target)
            edges.add(CallEdge(call.site, call.caller, target, "builtin-pattern"))
    return replace(
        cg,
        nodes=frozenset(nodes),
        edges=frozenset(edges),
        unresolved_callbacks=cg.unresolved_callbacks + missed,
    )


@dataclass(frozen=True, order=True)
class TraceCall:
    site: Site
    caller: FunctionId
    callee: FunctionId


@dataclass(frozen=True, order=True)
class TraceCommand:
    site: Site
    command: str


@dataclass(frozen=True)
class DynamicTrace:
    call_records: tuple[TraceCall, ...] = ()
    command_records: tuple[TraceCommand, ...] = ()

    @property
    def modules(self) -> frozenset[str]:
        mods = set()
        for r in self.call_records:
            mods |= {r.site.module, r.caller.module, r.callee.module}
        mods |= {r.site.module for r in self.command_records}
        return frozenset(mods)


_CALL_RE = re.compile(r"^CALL\s+(\S+)\s+@(\S+)\s+->\s+(\S+)\s*$")
_CMD_RE = re.compile(r"^CMD\s+@(\S+)\s+(.*\S)\s*$")


def parse_trace(text: str, module_ids: Iterable[str] | None = None, source: str = "<trace>") -> DynamicTrace:
    calls, commands = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            if m := _CALL_RE.match(line):
                calls.append(
                    TraceCall(Site.parse(m[2]), FunctionId.parse(m[1]), FunctionId.parse(m[3]))
                )
                continue
            if m := _CMD_RE.match(line):
                commands.append(TraceCommand(Site.parse(m[1]), m[2]))
                continue
        except (ValueError, InputError) as exc:
            raise InputError(f"{source}:{lineno}: malformed trace record: {exc}") from None
        raise InputError(f"{source}:{lineno}: unrecognized trace record {line!r}")
    trace = DynamicTrace(tuple(calls), tuple(commands))
    if module_ids is not None:
        _check_modules(trace, frozenset(module_ids))
    return trace


def load_trace(path: str | Path, module_ids: Iterable[str] | None = None) -> DynamicTrace:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read trace {path}: {exc}") from None
    return parse_trace(text, module_ids, str(path))


def _check_modules(trace: DynamicTrace, known: frozenset[str]) -> None:
    unknown = sorted(trace.modules - known)
    if unknown:
        raise InputError(f"trace references unknown module id {unknown[0]!r}")


def merge_dynamic(cg: CallGraph, trace: DynamicTrace) -> CallGraph:
    _check_modules(trace, frozenset(n.module for n in cg.nodes))
    nodes = set(cg.nodes)
    edges = set(cg.edges)
    triples = {(e.site, e.caller, e.callee) for e in edges}
    for record in trace.call_records:
        nodes |= {record.caller, record.callee}
        triple = (record.site, record.caller, record.callee)
        if triple not in triples:
            triples.add(triple)
            edges.add(CallEdge(record.site, record.caller, record.callee, "dynamic"))
    return replace(cg, nodes=frozenset(nodes), edges=frozenset(edges))


def reachable_functions(cg: CallGraph, entry: FunctionId) -> set[FunctionId]:
    if entry not in cg.nodes:
        raise InputError(f"entry {entry} is not a node of the call graph")
    succ = cg.successors()
    seen = {entry}
    queue = deque([entry])
    while queue:
        for nxt in succ.get(queue.popleft(), ()):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def reachable_builtins(cg: CallGraph, entry: FunctionId) -> frozenset[tuple[str, str]]:
    live = reachable_functions(cg, entry)
    return frozenset((b.owner, b.method) for b in cg.builtin_calls if b.caller in live)


def _first_token(command: str) -> str | None:
    parts = command.split()
    return parts[0] if parts else None


def _prefix_token(prefix: tuple[str, bool] | None) -> str | None:
    if prefix is None:
        return None
    text, complete = prefix
    if not complete:
        # Unknown text may follow; the token is certain only once it is delimited.
        stripped = text.lstrip()
        if not stripped or not any(c.isspace() for c in stripped):
            return None
    return _first_token(text)


@dataclass
class CommandExtraction:
    commands: list[str] = field(default_factory=list)
    unresolved_sites: list[Site] = field(default_factory=list)


def extract_command_sites(
    graph: ModuleGraph,
    cg: CallGraph,
    trace: DynamicTrace | None = None,
    entry: FunctionId | None = None,
) -> CommandExtraction:
    """Commands with the sites that could not be resolved.

    With ``entry`` given, only command-execution sites whose caller is
    reachable from it are considered; trace command records always count
    because they were observed at run time.
    """
    trace = trace or DynamicTrace()
    live = reachable_functions(cg, entry) if entry is not None else None
    by_site: dict[Site, list[str]] = defaultdict(list)
    for record in trace.command_records:
        by_site[record.site].append(record.command)
    index = {m.id: _ModuleIndex(m) for m in graph.modules}
    tokens: set[str] = set()
    unresolved: list[Site] = []
    for call in sorted(cg.builtin_calls):
        if call.owner != "child_process" or call.method not in COMMAND_METHODS:
            continue
        if live is not None and call.caller not in live:
            continue
        token = None
        idx = index.get(call.site.module)
        node = idx.calls.get((call.site.line, call.site.column)) if idx else None
        if node is not None:
            args = node.get("arguments") or []
            if args:
                token = _prefix_token(idx.string_prefix(args[0], call.caller))
        if token is not None:
            tokens.add(token)
        elif call.site not in by_site:
            unresolved.append(call.site)
            logger.warning("%s: command of %s.%s could not be resolved", call.site, call.owner, call.method)
    for record in trace.command_records:
        token = _first_token(record.command)
        if token is not None:
            tokens.add(token)
    return CommandExtraction(sorted(tokens), unresolved)


def extract_commands(
    graph: ModuleGraph,
    cg: CallGraph,
    trace: DynamicTrace | None = None,
    entry: FunctionId | None = None,
) -> list[str]:
    return extract_command_sites(graph, cg, trace, entry).commands
