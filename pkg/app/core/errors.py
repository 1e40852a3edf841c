"""Exception hierarchy shared by services and the CLI.

Each class carries the process exit code the CLI reports for it.
"""
from typing import Any


class NerfSRError(Exception):
    exit_code = 1


class ConfigurationError(NerfSRError):
    exit_code = 2


class ShapeError(NerfSRError, ValueError):
    exit_code = 2


class LoRAError(NerfSRError):
    exit_code = 2


class IngestionError(NerfSRError):
    exit_code = 3

    def __init__(self, message: str, path: Any = None) -> None:
        self.path = path
        super().__init__(f"{message} ({path})" if path is not None else message)


class NumericalAbort(NerfSRError):
    exit_code = 4

    def __init__(self, message: str, **diagnostics: Any) -> None:
        self.diagnostics = diagnostics
        details = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
        super().__init__(f"{message} [{details}]" if details else message)


class StageIsolationError(NerfSRError):
    exit_code = 4


class RunLockedError(NerfSRError):
    exit_code = 1
