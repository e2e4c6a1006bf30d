"""Exception types shared across the package."""


class ZhyperError(Exception):
    pass


class DimensionError(ZhyperError, ValueError):
    pass


class ContractError(ZhyperError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ConfigError(ZhyperError, ValueError):
    pass


class InputError(ZhyperError, ValueError):
    pass


class FormatError(ZhyperError, ValueError):
    """A binary file or buffer failed validation while loading."""


class NonFiniteLossError(ZhyperError, RuntimeError):
    pass
