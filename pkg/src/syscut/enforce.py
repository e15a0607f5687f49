"""Simulated seccomp enforcement over per-thread event traces.

Filters stack per thread and every installed filter must allow a syscall.
Threads copy their parent's filter list when created, so the order of the
two load points matters: the pool filter is installed right after the pool
threads exist and before the main filter, which keeps pool threads from
inheriting the main thread's list.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from syscut._jsonio import read_json
from syscut.errors import InputError
from syscut.policy import Policy
from syscut.syscalls import SyscallTable

MAIN_THREAD = 0
DEFAULT_POOL_SIZE = 4

# category -> syscall that defines it
PAYLOAD_CATEGORIES = {
    "exec": "execve",
    "fork": "fork",
    "setgid": "setgid",
    "setuid": "setuid",
    "connect": "connect",
    "listen": "listen",
    "bind": "bind",
}


@dataclass(frozen=True)
class PoolInit:
    size: int


@dataclass(frozen=True)
class AppStart:
    pass


@dataclass(frozen=True)
class ThreadCreate:
    parent: int
    child: int


@dataclass(frozen=True)
class SyscallEvent:
    thread: int
    name: str


Event = Union[PoolInit, AppStart, ThreadCreate, SyscallEvent]


def event_line(event: Event) -> str:
    if isinstance(event, PoolInit):
        return f"POOL_INIT {event.size}"
    if isinstance(event, AppStart):
        return "APP_START"
    if isinstance(event, ThreadCreate):
        return f"THREAD_CREATE {event.parent} {event.child}"
    return f"SYSCALL {event.thread} {event.name}"


def parse_events(text: str, source: str = "<events>") -> list[Event]:
    events: list[Event] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            kind = parts[0]
            if kind == "POOL_INIT" and len(parts) == 2:
                events.append(PoolInit(int(parts[1])))
            elif kind == "APP_START" and len(parts) == 1:
                events.append(AppStart())
            elif kind == "THREAD_CREATE" and len(parts) == 3:
                events.append(ThreadCreate(int(parts[1]), int(parts[2])))
            elif kind == "SYSCALL" and len(parts) == 3:
                events.append(SyscallEvent(int(parts[1]), parts[2]))
            else:
                raise ValueError
        except ValueError:
            raise InputError(f"{source}:{lineno}: malformed event {raw.strip()!r}") from None
    return events


def load_events(path: str | Path) -> list[Event]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read event trace {path}: {exc}") from None
    return parse_events(text, str(path))


@dataclass(frozen=True)
class Filter:
    label: str
    allow: frozenset[str]

    def permits(self, name: str) -> bool:
        return name in self.allow


@dataclass(frozen=True)
class Verdict:
    event: int
    thread: int
    name: str
    allowed: bool
    denied_by: int | None = None  # index into the thread's filter list
    filter_label: str | None = None

    def to_json(self) -> dict:
        return {
            "event": self.event,
            "thread": self.thread,
            "syscall": self.name,
            "verdict": "allowed" if self.allowed else "killed",
            "denied_by": self.denied_by,
            "filter": self.filter_label,
        }


@dataclass
class FilterState:
    filters: dict[int, list[Filter]] = field(default_factory=lambda: {MAIN_THREAD: []})

    def install(self, thread: int, flt: Filter) -> None:
        self.filters[thread].append(flt)

    def spawn(self, parent: int, child: int) -> None:
        self.filters[child] = list(self.filters[parent])

    def check(self, thread: int, name: str) -> tuple[bool, int | None, str | None]:
        for i, flt in enumerate(self.filters[thread]):
            if not flt.permits(name):
                return False, i, flt.label
        return True, None, None


def simulate(policy: Policy, events: list[Event], table: SyscallTable | None = None) -> list[Verdict]:
    """Verdict for every syscall event; denials do not stop the simulation."""

    def canon(name: str) -> str:
        return table.canonical(name) if table is not None and name in table else name

    main_filter = Filter("main", frozenset(canon(n) for n in policy.main_allow))
    pool_filter = Filter("pool", frozenset(canon(n) for n in policy.pool_allow))
    state = FilterState()
    pool_threads: set[int] = set()
    pool_seen = app_started = False
    verdicts: list[Verdict] = []
    for index, event in enumerate(events):
        where = f"event {index} ({event_line(event)})"
        if isinstance(event, PoolInit):
            if pool_seen:
                raise InputError(f"{where}: duplicate POOL_INIT")
            if app_started:
                raise InputError(f"{where}: POOL_INIT must precede APP_START")
            if event.size < 1:
                raise InputError(f"{where}: pool size must be positive")
            pool_seen = True
            for tid in range(1, event.size + 1):
                if tid in state.filters:
                    raise InputError(f"{where}: thread {tid} already exists")
                state.filters[tid] = []
                pool_threads.add(tid)
                # in pool_free mode the empty pool list denies everything
                state.install(tid, pool_filter)
        elif isinstance(event, AppStart):
            if app_started:
                raise InputError(f"{where}: duplicate APP_START")
            if policy.mode == "pool_required" and not pool_seen:
                raise InputError(f"{where}: pool_required policy needs POOL_INIT before APP_START")
            app_started = True
            state.install(MAIN_THREAD, main_filter)
        elif isinstance(event, ThreadCreate):
            if event.parent not in state.filters:
                raise InputError(f"{where}: unknown parent thread {event.parent}")
            if event.child in state.filters:
                raise InputError(f"{where}: thread {event.child} already exists")
            if event.parent in pool_threads and app_started and policy.mode == "pool_required":
                raise InputError(f"{where}: pool threads cannot be created after APP_START")
            state.spawn(event.parent, event.child)
            if event.parent in pool_threads:
                pool_threads.add(event.child)
        else:
            if event.thread not in state.filters:
                raise InputError(f"{where}: unknown thread {event.thread}")
            allowed, denied_by, label = state.check(event.thread, canon(event.name))
            verdicts.append(Verdict(index, event.thread, event.name, allowed, denied_by, label))
    return verdicts


@dataclass(frozen=True)
class Payload:
    name: str
    syscalls: tuple[str, ...]


def parse_payloads(data: object, source: str = "<payloads>") -> list[Payload]:
    if not isinstance(data, list):
        raise InputError(f"{source}: payload set must be a JSON array")
    out = []
    for i, raw in enumerate(data):
        if not isinstance(raw, dict) or not isinstance(raw.get("name"), str) or not isinstance(raw.get("syscalls"), list):
            raise InputError(f"{source}: payload {i} needs name and syscalls")
        name = raw["name"]
        if name not in PAYLOAD_CATEGORIES:
            raise InputError(f"{source}: unknown payload category {name!r}")
        if PAYLOAD_CATEGORIES[name] not in raw["syscalls"]:
            raise InputError(f"{source}: payload {name!r} must include {PAYLOAD_CATEGORIES[name]}")
        out.append(Payload(name, tuple(raw["syscalls"])))
    return out


def load_payloads(path: str | Path) -> list[Payload]:
    return parse_payloads(read_json(path, "payload set"), str(path))


@dataclass(frozen=True)
class PayloadResult:
    name: str
    blocked: bool
    killed: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {"payload": self.name, "result": "blocked" if self.blocked else "executed", "killed": list(self.killed)}


def canonical_trace(policy: Policy, payloads: list[Payload], injection_thread: int = MAIN_THREAD,
                    pool_size: int = DEFAULT_POOL_SIZE) -> tuple[list[Event], list[tuple[int, int]]]:
    """Trace running every payload on ``injection_thread`` after APP_START,
    plus the event-index span of each payload."""
    in_pool = 1 <= injection_thread <= pool_size
    events: list[Event] = []
    if policy.mode == "pool_required" or in_pool:
        events.append(PoolInit(pool_size))
    events.append(AppStart())
    if injection_thread != MAIN_THREAD and not in_pool:
        events.append(ThreadCreate(MAIN_THREAD, injection_thread))
    spans = []
    for payload in payloads:
        start = len(events)
        events.extend(SyscallEvent(injection_thread, name) for name in payload.syscalls)
        spans.append((start, len(events)))
    return events, spans


def evaluate_payloads(policy: Policy, payloads: list[Payload], injection_thread: int = MAIN_THREAD,
                      table: SyscallTable | None = None, pool_size: int = DEFAULT_POOL_SIZE) -> list[PayloadResult]:
    events, spans = canonical_trace(policy, payloads, injection_thread, pool_size)
    by_event = {v.event: v for v in simulate(policy, events, table)}
    results = []
    for payload, (start, end) in zip(payloads, spans):
        killed = tuple(by_event[i].name for i in range(start, end) if not by_event[i].allowed)
        results.append(PayloadResult(payload.name, bool(killed), killed))
    return results


def payload_table(results: list[PayloadResult]) -> str:
    """Human-readable matrix: a check mark means blocked, a cross means executed."""
    width = max([len("payload")] + [len(r.name) for r in results])
    lines = [f"{'payload':<{width}}  result"]
    for r in results:
        mark = "✓ blocked" if r.blocked else "✗ executed"
        lines.append(f"{r.name:<{width}}  {mark}")
    blocked = sum(r.blocked for r in results)
    lines.append(f"{blocked}/{len(results)} blocked")
    return "\n".join(lines) + "\n"
