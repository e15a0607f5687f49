"""Per-thread system-call whitelist inference for scripted server applications."""

from syscut.errors import AnalysisError, InputError, SyscutError

__version__ = "0.1.0"

__all__ = ["AnalysisError", "InputError", "SyscutError", "__version__"]
