"""Exceptions shared by the on-disk formats and lookup structures."""


class FormatError(ValueError):
    """A file is missing, truncated, or has the wrong magic/version."""


class NotFoundError(KeyError):
    """A record id is not present."""
