"""Exception hierarchy. CLI exit codes hang off these classes."""


class CadError(Exception):
    exit_code = 1


class ShapeError(CadError, ValueError):
    exit_code = 2


class ConfigError(CadError, ValueError):
    exit_code = 2


class ContractError(CadError, ValueError):
    exit_code = 2


class FormatError(CadError, ValueError):
    exit_code = 3


class StaleCacheError(CadError):
    exit_code = 2


class ManifestError(CadError, ValueError):
    exit_code = 2
