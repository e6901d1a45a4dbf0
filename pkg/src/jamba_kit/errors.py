"""Exception hierarchy shared by every module of the kit."""


class JambaError(Exception):
    """Base class; the CLI maps any of these to exit code 1."""


class DimensionError(JambaError, ValueError):
    pass


class CacheError(JambaError):
    pass


class ConfigError(JambaError, ValueError):
    pass


class InputError(JambaError, ValueError):
    pass


class ContractError(JambaError):
    pass


class TrainingError(JambaError, RuntimeError):
    pass


class PresetLookupError(JambaError, KeyError):
    def __str__(self) -> str:  # KeyError would repr() the message
        return str(self.args[0]) if self.args else ""
