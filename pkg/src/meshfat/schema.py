"""JSON-schema validation with errors that name the offending field."""
from __future__ import annotations

import jsonschema


class SchemaError(ValueError):
    """A JSON document does not match its schema.

    ``field`` is the dotted path of the first offending value (``$`` for the
    document root).
    """

    def __init__(self, source: str, field: str, message: str):
        self.source, self.field = source, field
        super().__init__(f"{source}: field {field}: {message}")


def field_path(path) -> str:
    out = "$"
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def validate(data, schema: dict, source: str = "document"):
    """Raise :class:`SchemaError` for the first error in document order."""
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(data),
                    key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        e = errors[0]
        raise SchemaError(source, field_path(e.absolute_path), e.message)
