"""Exception hierarchy shared by every mlforge module.

Every error carries a ``module`` and ``code`` so the CLI can emit the
machine-parsable prefix ``E:<module>:<code>`` on stderr and map the failure
onto its exit-code contract (2 for data/validation errors, 3 for numerical
failures).
"""

from __future__ import annotations


class MLForgeError(Exception):
    """Base for all mlforge errors (CLI exit code 2 unless overridden)."""

    def __init__(self, module: str, code: str, message: str):
        super().__init__(message)
        self.module = module
        self.code = code

    def cli_format(self) -> str:
        return f"E:{self.module}:{self.code}: {self}"


class DataError(MLForgeError):
    """Malformed input files, invariant violations, bad arguments."""


class NumericalError(MLForgeError):
    """Non-finite values or other numerical breakdown (CLI exit code 3)."""


class UsageError(Exception):
    """Bad command line (CLI exit code 1). Raised by the argument parser."""
