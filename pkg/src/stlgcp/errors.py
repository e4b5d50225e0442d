"""Exception hierarchy shared by all modules.

Each error carries an ``exit_code`` used by the command line front end:
2 for configuration problems, 3 for numerical failures and 4 for I/O.
"""


class LgcpError(Exception):
    exit_code = 3


class ConfigError(LgcpError):
    exit_code = 2


class InvalidGeometryError(ConfigError):
    pass


class ResourceLimitError(ConfigError):
    pass


class UnknownCovariateError(ConfigError):
    pass


class NoCoverageError(ConfigError):
    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = list(indices)


class UncoveredRegionError(ConfigError):
    pass


class DuplicateSiteError(ConfigError):
    pass


class InvalidQueryError(ConfigError):
    pass


class UnsupportedError(ConfigError):
    pass


class NumericError(LgcpError):
    pass


class FactorisationError(NumericError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class SamplerError(NumericError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class StepFailureError(NumericError):
    pass


class InitialisationError(NumericError):
    pass


class ArtifactError(LgcpError):
    exit_code = 4
