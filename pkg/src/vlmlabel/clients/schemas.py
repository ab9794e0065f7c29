"""JSON schemas for structured perception responses, and payload extraction."""

from __future__ import annotations

import json
import re
from typing import Any

import jsonschema

_INDEX = {"type": ["integer", "null"], "minimum": 0}

SCHEMAS: dict[str, dict[str, Any]] = {
    "region-box/v1": {
        "type": "object",
        "required": ["box"],
        "additionalProperties": False,
        "properties": {
            "box": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
        },
    },
    "assignment/v1": {
        "type": "object",
        "required": ["assignments"],
        "additionalProperties": False,
        "properties": {"assignments": {"type": "object", "additionalProperties": _INDEX}},
    },
    "caption/v1": {
        "type": "object",
        "required": ["label", "description"],
        "additionalProperties": False,
        "properties": {
            "label": {"type": "string", "minLength": 1},
            "description": {"type": "string", "minLength": 1},
        },
    },
    "merge/v1": {
        "type": "object",
        "required": ["segments"],
        "additionalProperties": False,
        "properties": {
            "segments": {
                "type": "array",
                "minItems": 1,
                "items": {
                    "type": "object",
                    "required": ["clips", "label", "description"],
                    "additionalProperties": False,
                    "properties": {
                        "clips": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                        "label": {"type": "string", "minLength": 1},
                        "description": {"type": "string", "minLength": 1},
                    },
                },
            }
        },
    },
}

_VALIDATORS = {k: jsonschema.Draft202012Validator(v) for k, v in SCHEMAS.items()}
_FENCE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


class PayloadError(ValueError):
    """Response text did not yield a schema-valid payload; message is fed back to the model."""


def extract_json(raw: str) -> Any:
    """Parse the JSON object in ``raw``, tolerating code fences and surrounding prose."""
    text = raw.strip()
    m = _FENCE.search(text)
    if m:
        text = m.group(1).strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        start, end = text.find("{"), text.rfind("}")
        if start != -1 and end > start:
            try:
                return json.loads(text[start : end + 1])
            except json.JSONDecodeError:
                pass
    raise PayloadError("response is not valid JSON; reply with a single JSON object")


def validate_payload(payload: Any, schema_id: str) -> None:
    try:
        validator = _VALIDATORS[schema_id]
    except KeyError:
        raise KeyError(f"unknown schema id {schema_id!r}") from None
    errors = sorted(validator.iter_errors(payload), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.path) or "<root>"
        raise PayloadError(f"schema violation at {where}: {e.message}")
