"""Per-thread whitelists, attack-surface metrics and the emitted policy."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from syscut._jsonio import read_json
from syscut.errors import AnalysisError, InputError
from syscut.mapping import ComposedMapping, Method, method_label
from syscut.syscalls import EngineBaseline, SyscallTable

logger = logging.getLogger(__name__)

POLICY_VERSION = 1
MODES = ("pool_required", "pool_free")
LOAD_POINTS = {"pool": "after_pool_init", "main": "before_app_load"}
BASELINE_SOURCE = "engine-baseline"


@dataclass(frozen=True)
class Whitelist:
    main: frozenset[str]
    pool: frozenset[str] = frozenset()
    provenance: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    mode: str = "pool_free"
    warnings: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "main": sorted(self.main),
            "pool": sorted(self.pool),
            "mode": self.mode,
            "provenance": {k: list(v) for k, v in sorted(self.provenance.items())},
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json(cls, data: dict) -> Whitelist:
        try:
            return cls(
                frozenset(data["main"]),
                frozenset(data["pool"]),
                {k: tuple(v) for k, v in data.get("provenance", {}).items()},
                data.get("mode", "pool_free"),
                tuple(data.get("warnings", ())),
            )
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed whitelist: {exc}") from None


def generate_whitelist(
    reachable: Iterable[Method],
    composed: ComposedMapping,
    baseline: EngineBaseline,
    commands: Iterable[str] = (),
    profile: Mapping[str, Iterable[str]] | None = None,
    table: SyscallTable | None = None,
    strict: bool = True,
) -> Whitelist:
    """Main/pool whitelists with the reason each syscall is present.

    With a table, every name is canonicalized (aliases such as ``fsstat``
    map to their row) and the table is the full-surface fallback for
    permissive over-approximation.
    """
    profile = profile or {}
    sources: dict[str, set[str]] = {}
    warnings: list[str] = []

    def canon(name: str) -> str:
        return table.canonical(name) if table is not None else name

    def add(target: set[str], names: Iterable[str], source: str) -> None:
        for name in names:
            name = canon(name)
            target.add(name)
            sources.setdefault(name, set()).add(source)

    def everything(what: str) -> frozenset[str]:
        if table is None:
            raise AnalysisError(f"{what}: permissive fallback needs a syscall table")
        return table.names

    main: set[str] = set()
    pool: set[str] = set()
    add(main, baseline.main, BASELINE_SOURCE)
    uses_pool = False
    pool_contrib: list[tuple[frozenset[str], str]] = []
    for method in sorted(set(reachable)):
        source = f"builtin({method_label(method)})"
        if method not in composed.entries:
            message = f"builtin method {method_label(method)} has no mapping"
            if strict:
                raise AnalysisError(message)
            warnings.append(message + "; allowing the full table")
            add(main, everything(message), source)
            continue
        main_sc, pool_sc = composed.entries[method]
        add(main, main_sc, source)
        if method in composed.pool_builtins or pool_sc:
            uses_pool = True
            pool_contrib.append((pool_sc, source))
    for binary in sorted(set(commands)):
        source = f"command({binary})"
        if binary not in profile:
            message = f"command {binary!r} has no syscall profile"
            if strict:
                raise AnalysisError(message)
            warnings.append(message + "; allowing the full table")
            add(main, everything(message), source)
            continue
        add(main, profile[binary], source)
    if uses_pool:
        add(pool, baseline.pool, BASELINE_SOURCE)
        for names, source in pool_contrib:
            add(pool, names, source)
    for message in warnings:
        logger.warning("%s", message)
    return Whitelist(
        frozenset(main),
        frozenset(pool),
        {k: tuple(sorted(v)) for k, v in sorted(sources.items())},
        "pool_required" if uses_pool else "pool_free",
        tuple(warnings),
    )


@dataclass(frozen=True)
class SurfaceMetrics:
    s_base: int
    s_app: int
    sr: float
    critical_allowed: int
    trivial_allowed: int
    main_count: int = 0
    pool_count: int = 0

    def to_json(self) -> dict:
        return {
            "s_base": self.s_base,
            "s_app": self.s_app,
            "sr": round(self.sr, 4),
            "critical_allowed": self.critical_allowed,
            "trivial_allowed": self.trivial_allowed,
            "main_count": self.main_count,
            "pool_count": self.pool_count,
        }

    def summary(self) -> str:
        return (
            f"SR = {self.sr:.4f} ({self.s_app}/{self.s_base}); "
            f"critical {self.critical_allowed}, trivial {self.trivial_allowed}"
        )


def compute_metrics(wl: Whitelist, table: SyscallTable) -> SurfaceMetrics:
    if not len(table):
        raise InputError("syscall table is empty")
    main = {table.canonical(n) for n in wl.main}
    pool = {table.canonical(n) for n in wl.pool}
    allowed = main | pool
    critical = sum(1 for n in allowed if table.class_of(n) == "critical")
    return SurfaceMetrics(
        s_base=len(table),
        s_app=len(allowed),
        sr=len(allowed) / len(table),
        critical_allowed=critical,
        trivial_allowed=len(allowed) - critical,
        main_count=len(main),
        pool_count=len(pool),
    )


@dataclass(frozen=True)
class Policy:
    main_allow: tuple[str, ...]
    pool_allow: tuple[str, ...] = ()
    mode: str = "pool_free"
    fs_advisory: Mapping[str, object] | None = None
    version: int = POLICY_VERSION
    default_action: str = "kill"

    def to_json(self) -> dict:
        out: dict = {
            "version": self.version,
            "default_action": self.default_action,
            "main_allow": list(self.main_allow),
            "pool_allow": list(self.pool_allow),
            "load_points": dict(LOAD_POINTS),
            "mode": self.mode,
        }
        if self.fs_advisory is not None:
            out["fs_advisory"] = dict(self.fs_advisory)
        return out

    def to_rules(self) -> str:
        lines = [f"# default {self.default_action}", f"mode {self.mode}", "[main]"]
        lines += [f"allow {n}" for n in self.main_allow]
        if self.pool_allow:
            lines.append("[pool]")
            lines += [f"allow {n}" for n in self.pool_allow]
        return "\n".join(lines) + "\n"


def emit_policy(wl: Whitelist, fs_advisory: Mapping[str, object] | None = None) -> Policy:
    if fs_advisory is not None:
        if not isinstance(fs_advisory.get("root_dir"), str) or not isinstance(fs_advisory.get("read_only"), bool):
            raise InputError("fs_advisory needs root_dir (string) and read_only (boolean)")
        fs_advisory = {"root_dir": fs_advisory["root_dir"], "read_only": fs_advisory["read_only"]}
    return Policy(tuple(sorted(wl.main)), tuple(sorted(wl.pool)), wl.mode, fs_advisory)


def policy_from_json(data: object, source: str = "<policy>") -> Policy:
    if not isinstance(data, dict):
        raise InputError(f"{source}: policy must be a JSON object")
    try:
        main, pool, mode = data["main_allow"], data.get("pool_allow", []), data["mode"]
    except KeyError as exc:
        raise InputError(f"{source}: policy is missing {exc}") from None
    if mode not in MODES:
        raise InputError(f"{source}: unknown policy mode {mode!r}")
    if data.get("default_action", "kill") != "kill":
        raise InputError(f"{source}: only the kill default action is supported")
    if not all(isinstance(n, str) for n in [*main, *pool]):
        raise InputError(f"{source}: allow lists must contain syscall names")
    return Policy(
        tuple(sorted(main)),
        tuple(sorted(pool)),
        mode,
        data.get("fs_advisory"),
        data.get("version", POLICY_VERSION),
    )


def load_policy(path: str | Path) -> Policy:
    return policy_from_json(read_json(path, "policy"), str(path))


def parse_rules(text: str, source: str = "<rules>") -> Policy:
    sections: dict[str, list[str]] = {"main": [], "pool": []}
    current = None
    mode = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line in ("[main]", "[pool]"):
            current = line[1:-1]
        elif line.startswith("mode "):
            mode = line.split(None, 1)[1]
        elif line.startswith("allow ") and current is not None:
            sections[current].append(line.split(None, 1)[1])
        else:
            raise InputError(f"{source}:{lineno}: unrecognized rule {line!r}")
    if mode is None:
        mode = "pool_required" if sections["pool"] else "pool_free"
    if mode not in MODES:
        raise InputError(f"{source}: unknown policy mode {mode!r}")
    return Policy(tuple(sorted(sections["main"])), tuple(sorted(sections["pool"])), mode)
