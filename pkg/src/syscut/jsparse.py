"""Produce ESTree JSON from JavaScript source with ``esprima`` (optional dependency)."""

from __future__ import annotations

from typing import Any

from syscut.errors import InputError


def parse_js(source: str, filename: str = "<source>") -> dict[str, Any]:
    try:
        import esprima
    except ImportError:  # pragma: no cover - exercised only without the extra
        raise InputError("parsing JavaScript requires the 'esprima' package") from None
    try:
        tree = esprima.parseScript(source, {"loc": True})
    except esprima.Error as exc:
        raise InputError(f"{filename}: {exc}") from None
    return _clean(tree.toDict())


def _clean(node: Any) -> Any:
    if isinstance(node, dict):
        if "regex" in node:
            # esprima compiles regex literals; keep only the pattern text
            node = {k: v for k, v in node.items() if k != "value"}
        return {k: _clean(v) for k, v in node.items() if v is not None and k != "end"}
    if isinstance(node, list):
        return [_clean(v) for v in node]
    return node
