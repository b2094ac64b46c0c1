"""JSON schemas for the demonstration container, checkpoints and reports."""
import json
from importlib import resources

import jsonschema

from ..errors import DataError

NAMES = ("demos", "checkpoint", "report")


def load_schema(name: str) -> dict:
    return json.loads(resources.files(__name__).joinpath(f"{name}.schema.json").read_text(encoding="utf-8"))


def validate(obj, name: str, source: str = "document") -> None:
    try:
        jsonschema.validate(obj, load_schema(name))
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        raise DataError(f"{source} does not match the {name} schema at '{path}': {exc.message}") from None
