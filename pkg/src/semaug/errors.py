"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    """Argument violates an operation's precondition."""


class DegenerateShiftError(InvalidInputError):
    """Source and target prompt embeddings coincide, so no shift direction exists."""

    def __init__(self, message: str, prompt_id: int | None = None):
        super().__init__(message)
        self.prompt_id = prompt_id


class DegenerateSpectrumError(ValueError):
    """Data has fewer than two non-trivial principal directions."""


class DivergenceError(RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


class LoadError(ValueError):
    """A dataset or archive on disk is malformed."""


class ConfigError(ValueError):
    pass
