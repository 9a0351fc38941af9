"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Shapes or settings that cannot work together."""


class UsageError(ValueError):
    """An argument violates an operation's precondition."""


class NumericError(FloatingPointError):
    """A forward pass produced NaN or Inf.

    ``primitive`` names the operation whose output was non-finite.
    """

    def __init__(self, primitive, message=None):
        self.primitive = primitive
        super().__init__(message or f"non-finite output from primitive '{primitive}'")


class GenerationError(RuntimeError):
    """The scene generator could not place an object."""
