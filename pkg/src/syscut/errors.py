"""Exception hierarchy shared by every stage.

The CLI maps ``InputError`` to exit status 2 and ``AnalysisError`` to 1.
"""

from __future__ import annotations


class SyscutError(Exception):
    exit_code = 1


class InputError(SyscutError):
    """Malformed, missing, or inconsistent input files."""

    exit_code = 2


class AnalysisError(SyscutError):
    """A soundness problem found while analysing valid input (strict mode)."""

    exit_code = 1
