"""MODNet CLI — Error hierarchy and structured error reporting."""

import platform
import sys
import traceback

from modnet_cli import __version__

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3


class ModNetError(Exception):
    """Base class for every error the toolchain raises on purpose."""

    exit_code = EXIT_DATA


class UsageError(ModNetError):
    exit_code = EXIT_USAGE


class ConfigError(UsageError):
    pass


class VerificationError(ModNetError):
    exit_code = EXIT_VERIFY


class GeometryError(ModNetError):
    pass


class IsolatedPointError(GeometryError):
    pass


class MeshError(ModNetError):
    pass


class AutodiffError(ModNetError):
    pass


class NonFiniteError(AutodiffError):
    def __init__(self, op):
        super().__init__(f"non-finite values produced by op '{op}'")
        self.op = op


class LossError(ModNetError):
    pass


class MetricError(ModNetError):
    pass


class FileIOError(ModNetError):
    """An input or output path the OS refused."""

    @classmethod
    def from_os_error(cls, error: OSError) -> "FileIOError":
        reason = error.strerror or str(error)
        wrapped = cls(f"{reason}: {error.filename}" if error.filename else reason)
        wrapped.__cause__ = error
        return wrapped


class CheckpointError(ModNetError):
    pass


class TrainingDivergedError(ModNetError):
    pass


def report_error(error, verbose=False):
    """Print a structured error to stderr and return the process exit code."""
    exit_code = getattr(error, "exit_code", EXIT_DATA)
    print(f"❌ {type(error).__name__}: {error}", file=sys.stderr)
    if verbose:
        print(
            f"   modnet-cli v{__version__} | Python "
            f"{sys.version_info.major}.{sys.version_info.minor}.{sys.version_info.micro} | "
            f"{platform.system()} {platform.release()}",
            file=sys.stderr,
        )
        traceback.print_exception(type(error), error, error.__traceback__, file=sys.stderr)
    return exit_code
