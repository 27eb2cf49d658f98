"""Error taxonomy shared across the package.

Each class carries the process exit code the command-line front end maps
it to: 2 for bad requests, 3 for malformed or inconsistent artifacts,
4 for numeric failures.
"""


class AdapterFuseError(Exception):
    """Base class for all package-raised failures."""

    exit_code = 1


class UsageError(AdapterFuseError):
    """The caller asked for something the contract forbids."""

    exit_code = 2


class StructuralError(AdapterFuseError):
    """Shapes, identifiers, or file layouts do not fit together."""

    exit_code = 3


class NumericError(AdapterFuseError):
    """A computation produced or detected non-finite or degenerate values."""

    exit_code = 4
