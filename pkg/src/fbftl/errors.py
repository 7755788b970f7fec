"""Exception hierarchy shared by every module."""


class FbftlError(Exception):
    """Base class for all package errors."""


class ConfigError(FbftlError, ValueError):
    """Invalid configuration or incompatible dimensions.

    ``key`` carries the dotted config path (or layer index) that failed.
    """

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class DivergenceError(FbftlError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, iteration: int | None = None, sigma: float | None = None):
        self.iteration = iteration
        self.sigma = sigma
        parts = [message]
        if iteration is not None:
            parts.append(f"iteration={iteration}")
        if sigma is not None:
            parts.append(f"sigma={sigma:g}")
        super().__init__(" ".join(parts))


class SizeError(FbftlError, OverflowError):
    """A combinatorial quantity exceeds the configured budget."""


class DegenerateUploadError(FbftlError, ValueError):
    """An upload vector has zero element-wise standard deviation."""
