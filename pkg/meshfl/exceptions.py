"""
Base exception types shared by every meshfl module.

Each module defines its own hierarchy on top of these two classes. Anything
deriving from ``ValidationError`` describes a bad input (scenario, trace,
snapshot) and maps to exit code 1 in the CLI; everything else is a runtime
failure.
"""


class MeshFLError(Exception):
    """Base exception for all meshfl errors."""
    pass


class ValidationError(MeshFLError):
    """Raised when an input document fails validation."""
    pass


class ConfigError(ValidationError):
    """
    Raised when a scenario document violates its schema.

    Attributes:
        path: JSON path of the offending value, e.g. ``$.nodes[3].role``
    """

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.reason = message
