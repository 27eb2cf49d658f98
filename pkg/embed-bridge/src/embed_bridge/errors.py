"""Error classes with process exit codes, mirroring the engine's convention."""


class BridgeError(Exception):
    exit_code = 1


class UsageError(BridgeError):
    """Bad arguments or nothing usable to work on."""

    exit_code = 2


class EncoderUnavailableError(BridgeError):
    """The requested encoder backend cannot run in this environment."""

    exit_code = 2
