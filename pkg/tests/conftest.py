from __future__ import annotations

import json
from pathlib import Path

import pytest

from syscut.syscalls import data_path, default_baseline, default_table

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"
DEMO = data_path("demo")


@pytest.fixture(scope="session")
def table():
    return default_table()


@pytest.fixture(scope="session")
def baseline():
    return default_baseline()


def write_corpus(root: Path, modules: dict[str, str], entry: str | None = "main.js",
                 builtin_names=("child_process", "fs"), kinds: dict[str, str] | None = None,
                 packages: dict[str, str] | None = None) -> Path:
    """Parse JS sources into AST files under ``root`` and write a manifest."""
    from syscut.jsparse import parse_js

    kinds = kinds or {}
    packages = packages or {}
    listed = []
    for mid, source in modules.items():
        ast_file = mid[:-3] + ".ast.json"
        path = root / ast_file
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(parse_js(source, mid)), encoding="utf-8")
        record = {"id": mid, "kind": kinds.get(mid, "app" if mid == entry else "dependency"), "ast_file": ast_file}
        if mid in packages:
            record["package"] = packages[mid]
        listed.append(record)
    manifest = root / "corpus.json"
    manifest.write_text(json.dumps({"entry": entry, "builtin_names": list(builtin_names), "modules": listed}))
    return manifest


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def criterion(number: int):
    """Record PASS/FAIL for an acceptance test under its criterion number."""
    import functools

    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            ACCEPTANCE[number] = "FAIL"
            fn(*args, **kwargs)
            ACCEPTANCE[number] = "PASS"
            print(f"criterion {number}: PASS")

        return inner

    return wrap


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {ACCEPTANCE[number]}")
