"""Exception hierarchy; the CLI maps each family to an exit code."""


class MeSpecVarError(Exception):
    """Base class for all package errors."""


class DataError(MeSpecVarError):
    """Malformed, inconsistent or degenerate input data."""


class ManifestError(DataError):
    pass


class ChannelMismatchError(DataError):
    pass


class DegenerateChannelError(DataError):
    def __init__(self, channel, reason="zero variance"):
        self.channel = channel
        super().__init__(f"channel {channel!r} is degenerate: {reason}")


class NumericalError(MeSpecVarError):
    """A computation could not be carried out reliably."""


class ConvergenceError(NumericalError):
    pass


class SimulationError(NumericalError):
    pass
