"""Load CommonJS corpora from ESTree JSON and resolve their ``require`` graph.

A manifest enumerates every module explicitly; there is no node_modules
search. Bare specifiers resolve first against module ``package`` aliases
declared in the manifest, then against the engine's builtin names.
"""

from __future__ import annotations

import json
import logging
import posixpath
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

from syscut._jsonio import read_json
from syscut.errors import InputError

logger = logging.getLogger(__name__)

KINDS = ("app", "dependency", "builtin-js")

SUPPORTED_NODE_TYPES = frozenset(
    {
        "Program",
        "FunctionDeclaration",
        "FunctionExpression",
        "ArrowFunctionExpression",
        "VariableDeclaration",
        "VariableDeclarator",
        "AssignmentExpression",
        "MemberExpression",
        "CallExpression",
        "NewExpression",
        "Identifier",
        "Literal",
        "ObjectExpression",
        "Property",
        "ReturnStatement",
        "ExpressionStatement",
        "BlockStatement",
        "IfStatement",
        "ConditionalExpression",
    }
)

_NON_CHILD_KEYS = frozenset({"type", "loc", "range", "start", "end", "raw", "regex"})

LAST = "LAST"


def node_pos(node: dict) -> tuple[int, int]:
    """Return ``(line, column)`` of a node's start, or ``(0, 0)`` if absent."""
    loc = node.get("loc")
    if isinstance(loc, dict) and isinstance(loc.get("start"), dict):
        start = loc["start"]
        return int(start.get("line", 0)), int(start.get("column", 0))
    if isinstance(node.get("line"), int):
        return node["line"], int(node.get("column", 0))
    return 0, 0


def iter_children(node: dict) -> Iterator[dict]:
    for key, value in node.items():
        if key in _NON_CHILD_KEYS:
            continue
        if isinstance(value, dict) and "type" in value:
            yield value
        elif isinstance(value, list):
            for item in value:
                if isinstance(item, dict) and "type" in item:
                    yield item


def walk(node: dict) -> Iterator[dict]:
    """Pre-order traversal over every AST node."""
    stack = [node]
    while stack:
        current = stack.pop()
        yield current
        stack.extend(reversed(list(iter_children(current))))


def call_site_pos(node: dict) -> tuple[int, int]:
    """Position identifying a call site.

    Method calls use the position of the property name so that chained calls
    such as ``a.b().c()`` get distinct sites; other calls use their start.
    """
    callee = node.get("callee") or {}
    if node.get("type") == "CallExpression" and callee.get("type") == "MemberExpression":
        prop = callee.get("property") or {}
        pos = node_pos(prop)
        if pos != (0, 0):
            return pos
    return node_pos(node)


def is_require_call(node: dict) -> bool:
    callee = node.get("callee") or {}
    return (
        node.get("type") == "CallExpression"
        and callee.get("type") == "Identifier"
        and callee.get("name") == "require"
    )


def string_literal(node: dict | None) -> str | None:
    if node and node.get("type") == "Literal" and isinstance(node.get("value"), str):
        return node["value"]
    return None


@dataclass(frozen=True)
class SourceModule:
    id: str
    kind: str
    ast: dict[str, Any]
    package: str | None = None

    @property
    def export_name(self) -> str:
        """Name other modules use to refer to this one (package alias or file stem)."""
        if self.package:
            return self.package
        stem = posixpath.basename(self.id)
        return stem[:-3] if stem.endswith(".js") else stem


@dataclass(frozen=True, order=True)
class Resolution:
    kind: str  # local | builtin | unresolved
    target: str | None = None

    def to_json(self) -> dict:
        return {"kind": self.kind, "target": self.target}


@dataclass(frozen=True, order=True)
class RequireEdge:
    importer: str
    line: int
    column: int
    specifier: str | None  # None for non-literal specifiers
    resolution: Resolution

    def to_json(self) -> dict:
        return {
            "importer": self.importer,
            "line": self.line,
            "column": self.column,
            "specifier": self.specifier,
            "resolution": self.resolution.to_json(),
        }


@dataclass(frozen=True)
class ModuleGraph:
    modules: tuple[SourceModule, ...]
    edges: tuple[RequireEdge, ...]
    entry: str | None
    builtin_names: frozenset[str] = frozenset()
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        ids = [m.id for m in self.modules]
        if len(set(ids)) != len(ids):
            raise InputError("duplicate module id in corpus")
        by_id = {m.id: m for m in self.modules}
        if self.entry is not None:
            if self.entry not in by_id:
                raise InputError(f"entry module {self.entry!r} is not listed in the corpus")
            if by_id[self.entry].kind != "app":
                raise InputError(f"entry module {self.entry!r} must have kind 'app'")
        for edge in self.edges:
            if edge.resolution.kind == "local" and edge.resolution.target not in by_id:
                raise InputError(f"require edge targets unknown module {edge.resolution.target!r}")

    def module(self, module_id: str) -> SourceModule:
        for m in self.modules:
            if m.id == module_id:
                return m
        raise KeyError(module_id)

    @property
    def module_ids(self) -> frozenset[str]:
        return frozenset(m.id for m in self.modules)

    def edge_at(self, module_id: str, line: int, column: int) -> RequireEdge | None:
        for edge in self.edges:
            if (edge.importer, edge.line, edge.column) == (module_id, line, column):
                return edge
        return None

    def to_json(self) -> dict:
        return {
            "entry": self.entry,
            "builtin_names": sorted(self.builtin_names),
            "modules": [
                {"id": m.id, "kind": m.kind, "package": m.package, "ast": m.ast}
                for m in self.modules
            ],
            "edges": [e.to_json() for e in self.edges],
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json(cls, data: dict) -> ModuleGraph:
        modules = tuple(
            SourceModule(m["id"], m["kind"], m["ast"], m.get("package")) for m in data["modules"]
        )
        edges = tuple(
            RequireEdge(
                e["importer"],
                e["line"],
                e["column"],
                e["specifier"],
                Resolution(e["resolution"]["kind"], e["resolution"]["target"]),
            )
            for e in data["edges"]
        )
        return cls(
            modules,
            edges,
            data["entry"],
            frozenset(data.get("builtin_names", ())),
            tuple(data.get("warnings", ())),
        )


def normalize_id(raw: str) -> str:
    path = posixpath.normpath(raw.replace("\\", "/"))
    while path.startswith("./"):
        path = path[2:]
    return path


def _resolve(
    importer: str,
    specifier: str | None,
    module_ids: set[str],
    packages: dict[str, str],
    builtin_names: frozenset[str],
) -> Resolution:
    if specifier is None:
        return Resolution("unresolved")
    if specifier.startswith(("./", "../")):
        base = posixpath.normpath(posixpath.join(posixpath.dirname(importer), specifier))
        if base.startswith("../"):
            return Resolution("unresolved")
        for candidate in (base, base + ".js", base + "/index.js"):
            if candidate in module_ids:
                return Resolution("local", candidate)
        return Resolution("unresolved")
    if specifier in packages:
        return Resolution("local", packages[specifier])
    name = specifier[5:] if specifier.startswith("node:") else specifier
    if name in builtin_names:
        return Resolution("builtin", name)
    return Resolution("unresolved")


def build_module_graph(
    modules: list[SourceModule], entry: str | None, builtin_names: frozenset[str]
) -> ModuleGraph:
    """Resolve require sites of already-parsed modules into a ModuleGraph."""
    module_ids = {m.id for m in modules}
    if len(module_ids) != len(modules):
        seen: set[str] = set()
        for m in modules:
            if m.id in seen:
                raise InputError(f"duplicate module id {m.id!r}")
            seen.add(m.id)
    packages = {m.package: m.id for m in modules if m.package}

    warnings: list[str] = []
    edges: list[RequireEdge] = []
    for module in modules:
        if module.ast.get("type") != "Program":
            raise InputError(f"module {module.id!r}: AST root must be a Program node")
        module_edges = []
        for node in walk(module.ast):
            ntype = node.get("type")
            if ntype not in SUPPORTED_NODE_TYPES:
                line, col = node_pos(node)
                warnings.append(f"{module.id}:{line}:{col}: unsupported node type {ntype} skipped")
            if is_require_call(node):
                args = node.get("arguments") or []
                specifier = string_literal(args[0]) if args else None
                line, col = call_site_pos(node)
                resolution = _resolve(module.id, specifier, module_ids, packages, builtin_names)
                module_edges.append(RequireEdge(module.id, line, col, specifier, resolution))
        module_edges.sort(key=lambda e: (e.line, e.column))
        for edge in module_edges:
            if edge.resolution.kind == "unresolved":
                what = repr(edge.specifier) if edge.specifier is not None else "non-literal specifier"
                warnings.append(f"{edge.importer}:{edge.line}:{edge.column}: unresolved require {what}")
        edges.extend(module_edges)
    edges.sort(key=lambda e: (e.importer, e.line, e.column))
    for w in warnings:
        logger.debug(w)
    return ModuleGraph(tuple(modules), tuple(edges), entry, builtin_names, tuple(warnings))


def load_corpus(manifest_path: str | Path) -> ModuleGraph:
    manifest_path = Path(manifest_path)
    data = read_json(manifest_path, "corpus manifest")
    if not isinstance(data, dict) or not isinstance(data.get("modules"), list):
        raise InputError(f"{manifest_path}: manifest needs a 'modules' list")
    base = manifest_path.parent
    modules = []
    for index, spec in enumerate(data["modules"]):
        try:
            raw_id, kind, ast_file = spec["id"], spec["kind"], spec["ast_file"]
        except (KeyError, TypeError):
            raise InputError(
                f"{manifest_path}: module entry {index} needs id, kind and ast_file"
            ) from None
        if kind not in KINDS:
            raise InputError(f"{manifest_path}: module {raw_id!r} has unknown kind {kind!r}")
        ast = read_json(base / ast_file, f"AST ({ast_file})")
        if not isinstance(ast, dict):
            raise InputError(f"malformed AST JSON in {ast_file}: root is not an object")
        modules.append(SourceModule(normalize_id(raw_id), kind, ast, spec.get("package")))
    entry = data.get("entry")
    return build_module_graph(
        modules,
        normalize_id(entry) if entry else None,
        frozenset(data.get("builtin_names", ())),
    )


@dataclass(frozen=True, order=True)
class RegistryEntry:
    owner: str
    method: str
    callback_args: tuple[int | str, ...] = ()
    creates_function: bool = False

    def positions(self, argc: int) -> list[int]:
        """Concrete argument indices for a call with ``argc`` arguments."""
        out = []
        for pos in self.callback_args:
            index = argc - 1 if pos == LAST else pos
            if 0 <= index < argc and index not in out:
                out.append(index)
        return out

    def to_json(self) -> dict:
        return {
            "owner": self.owner,
            "method": self.method,
            "callback_args": list(self.callback_args),
            "creates_function": self.creates_function,
        }


@dataclass(frozen=True)
class BuiltinRegistry:
    entries: tuple[RegistryEntry, ...] = ()

    def __post_init__(self) -> None:
        keys = [(e.owner, e.method) for e in self.entries]
        if len(set(keys)) != len(keys):
            raise InputError("duplicate (owner, method) in builtin registry")

    def get(self, owner: str, method: str) -> RegistryEntry | None:
        for entry in self.entries:
            if entry.owner == owner and entry.method == method:
                return entry
        return None

    def __len__(self) -> int:
        return len(self.entries)


def parse_registry(data: Any, source: str = "<registry>") -> BuiltinRegistry:
    if not isinstance(data, list):
        raise InputError(f"{source}: registry must be a JSON array")
    entries = []
    seen = set()
    for index, raw in enumerate(data):
        if not isinstance(raw, dict):
            raise InputError(f"{source}: registry entry {index} is not an object")
        owner, method = raw.get("owner"), raw.get("method")
        if not isinstance(owner, str) or not isinstance(method, str):
            raise InputError(f"{source}: registry entry {index} needs string owner and method")
        positions = raw.get("callback_args", [])
        if not isinstance(positions, list):
            raise InputError(f"{source}: registry entry {index}: callback_args must be a list")
        for pos in positions:
            ok = pos == LAST or (isinstance(pos, int) and not isinstance(pos, bool) and pos >= 0)
            if not ok:
                raise InputError(f"{source}: registry entry {index}: bad callback position {pos!r}")
        creates = raw.get("creates_function", False)
        if not isinstance(creates, bool):
            raise InputError(f"{source}: registry entry {index}: creates_function must be boolean")
        if (owner, method) in seen:
            raise InputError(f"{source}: registry entry {index}: duplicate {owner}.{method}")
        seen.add((owner, method))
        entries.append(RegistryEntry(owner, method, tuple(positions), creates))
    return BuiltinRegistry(tuple(entries))


def load_registry(path: str | Path) -> BuiltinRegistry:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read registry {path}: {exc}") from None
    if not text.strip():
        return BuiltinRegistry()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed registry JSON in {path}: {exc}") from None
    return parse_registry(data, str(path))
