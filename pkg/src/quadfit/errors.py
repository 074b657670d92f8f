"""Shared exception types."""


class ParseError(ValueError):
    """A file could not be parsed (truncated, wrong types, missing fields)."""


class ValidationError(ValueError):
    """Parsed content violates a model invariant."""
