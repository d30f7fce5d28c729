"""Exception hierarchy shared across the package."""

from __future__ import annotations


class ElinkError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ElinkError, ValueError):
    """Bad caller input (spans, configs, query parameters)."""


class KbError(ElinkError):
    pass


class NotAKbError(KbError):
    pass


class CorruptKbError(KbError):
    pass


class DimensionMismatchError(KbError, ValueError):
    pass


class EntityNotFound(KbError, LookupError):
    """Unknown entity id. Distinct from I/O and corruption failures."""

    def __init__(self, entity_id: int):
        super().__init__(f"entity {entity_id} not found")
        self.entity_id = entity_id


class IngestError(ElinkError):
    """Input files too broken to build from."""

    def __init__(self, message: str, row_errors: list[str] | None = None):
        super().__init__(message)
        self.row_errors = list(row_errors or [])


class IndexFormatError(ElinkError):
    pass


class IndexVersionError(IndexFormatError):
    pass


class EmptyQueryError(ValidationError):
    """Query text contains no indexable tokens."""


class ModelContainerError(ElinkError):
    pass
