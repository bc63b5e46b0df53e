"""
Error types shared by the library and the command line
"""

from typing import Optional


class S2WError(Exception):
    """Base error: carries a human readable detail and the CLI exit code"""

    exit_code = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code

    def __repr__(self) -> str:
        return f"{type(self).__name__}(exit_code={self.exit_code}, detail={self.detail!r})"


class UsageError(S2WError):
    """Bad flags, conflicting options, invalid configuration"""

    exit_code = 1


class ShapeError(S2WError):
    """Tensor shapes do not satisfy an operation's contract"""

    exit_code = 2


class FormatError(S2WError):
    """Malformed S2WT / S2WC file or missing counterpart file"""

    exit_code = 2


class NumericalError(S2WError):
    """NaN / Inf produced, or training diverged"""

    exit_code = 3
