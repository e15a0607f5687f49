"""Syscall table, engine-required baselines and command profiles.

The table is TSV: ``number<TAB>name<TAB>class`` with an optional fourth
column of comma-separated aliases. Aliases let verbatim-but-misspelled
names from published lists (``fsstat``) resolve to a real row without
rewriting the list itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from syscut._jsonio import read_json
from syscut.errors import InputError

CLASSES = ("critical", "trivial")


@dataclass(frozen=True)
class SyscallRow:
    number: int
    name: str
    cls: str
    aliases: tuple[str, ...] = ()


@dataclass(frozen=True)
class SyscallTable:
    rows: tuple[SyscallRow, ...]
    _by_name: Mapping[str, SyscallRow] = field(init=False, repr=False, compare=False)
    _by_number: Mapping[int, SyscallRow] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        by_name: dict[str, SyscallRow] = {}
        by_number: dict[int, SyscallRow] = {}
        for row in self.rows:
            if row.cls not in CLASSES:
                raise InputError(f"syscall {row.name!r}: unknown class {row.cls!r}")
            if row.number in by_number:
                raise InputError(f"duplicate syscall number {row.number}")
            by_number[row.number] = row
            for name in (row.name, *row.aliases):
                if name in by_name:
                    raise InputError(f"duplicate syscall name {name!r}")
                by_name[name] = row
        object.__setattr__(self, "_by_name", by_name)
        object.__setattr__(self, "_by_number", by_number)

    def __len__(self) -> int:
        return len(self.rows)

    def __contains__(self, name: object) -> bool:
        return name in self._by_name

    @property
    def names(self) -> frozenset[str]:
        """Canonical names only (aliases excluded)."""
        return frozenset(row.name for row in self.rows)

    def canonical(self, name: str) -> str:
        try:
            return self._by_name[name].name
        except KeyError:
            raise InputError(f"syscall {name!r} is not in the syscall table") from None

    def name_of(self, number: int) -> str:
        try:
            return self._by_number[number].name
        except KeyError:
            raise KeyError(number) from None

    def number_of(self, name: str) -> int:
        return self._by_name[self.canonical(name)].number

    def class_of(self, name: str) -> str:
        return self._by_name[self.canonical(name)].cls

    def check_names(self, names: Iterable[str], where: str) -> None:
        for name in names:
            if name not in self._by_name:
                raise InputError(f"{where}: syscall {name!r} is not in the syscall table")


def parse_table(text: str, source: str = "<table>") -> SyscallTable:
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cols = raw.rstrip("\n").split("\t")
        if len(cols) not in (3, 4):
            raise InputError(f"{source}:{lineno}: expected 3 or 4 tab-separated columns")
        try:
            number = int(cols[0])
        except ValueError:
            raise InputError(f"{source}:{lineno}: bad syscall number {cols[0]!r}") from None
        aliases = tuple(a for a in cols[3].split(",") if a) if len(cols) == 4 else ()
        rows.append(SyscallRow(number, cols[1].strip(), cols[2].strip(), aliases))
    return SyscallTable(tuple(rows))


def load_table(path: str | Path) -> SyscallTable:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read syscall table {path}: {exc}") from None
    return parse_table(text, str(path))


def data_path(name: str) -> Path:
    return Path(str(resources.files("syscut") / "data" / name))


def default_table() -> SyscallTable:
    return load_table(data_path("syscalls_x86_64.tsv"))


@dataclass(frozen=True)
class EngineBaseline:
    main: frozenset[str]
    pool: frozenset[str]

    def to_json(self) -> dict:
        return {"main": sorted(self.main), "pool": sorted(self.pool)}


def load_baseline(path: str | Path, table: SyscallTable | None = None) -> EngineBaseline:
    data = read_json(path, "engine baseline")
    if not isinstance(data, dict) or not {"main", "pool"} <= data.keys():
        raise InputError(f"{path}: engine baseline needs 'main' and 'pool' lists")
    baseline = EngineBaseline(frozenset(data["main"]), frozenset(data["pool"]))
    if table is not None:
        table.check_names(baseline.main | baseline.pool, f"engine baseline {path}")
    return baseline


def default_baseline() -> EngineBaseline:
    return load_baseline(data_path("engine_baseline.json"))


CommandProfile = Mapping[str, frozenset[str]]


def load_profile(path: str | Path, table: SyscallTable | None = None) -> dict[str, frozenset[str]]:
    """Load a ``binary -> [syscall names]`` profile recorded by a tracer."""
    data = read_json(path, "command profile")
    if not isinstance(data, dict):
        raise InputError(f"{path}: command profile must be a JSON object")
    profile = {}
    for binary, names in data.items():
        if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
            raise InputError(f"{path}: profile for {binary!r} must be a list of names")
        if table is not None:
            table.check_names(names, f"command profile {path} ({binary})")
        profile[binary] = frozenset(names)
    return profile
