"""Exception kinds shared across densedet."""
from typing import Optional


class Error(Exception):
    """Base Exception handling class."""


class ConfigurationError(Error):
    """A network description is inconsistent or incomplete.

    Attributes:
        layer_index: Index of the offending layer, if one can be named.
    """

    def __init__(self, message: str, layer_index: Optional[int] = None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class ImageTooSmallError(Error):
    """An input is smaller than the network window.

    Attributes:
        required: Minimum side length in pixels.
    """

    def __init__(self, message: str, required: int):
        super().__init__(f"image too small: {message} (minimum {required}px)")
        self.required = required


class InvalidArgumentError(Error, ValueError):
    """An argument is outside of its documented domain."""


class NumericError(Error, ArithmeticError):
    """A computation met non-finite values."""
