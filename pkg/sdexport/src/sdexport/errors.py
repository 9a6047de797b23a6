"""Exception types for the exporter."""


class ExportError(ValueError):
    """Raised when a capture request or its inputs are invalid."""
