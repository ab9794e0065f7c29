"""Uniform request/response types and the validate-and-retry loop shared by all clients."""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

from ..errors import ClientSchemaError
from ..pose.model import Rect
from .schemas import SCHEMAS, PayloadError, extract_json, validate_payload

VISION_TASKS = frozenset({"region-detect", "region-assign", "reconcile", "caption"})
TEXT_TASKS = frozenset({"merge"})
TASKS = VISION_TASKS | TEXT_TASKS


@dataclass(frozen=True)
class Attachment:
    """Reference to an image (or video frame) plus the overlays to draw on it.

    ``boxes`` holds ``(label, rect)`` pairs and ``points`` ``(index, x, y)``
    triples in full-frame pixels; ``crop`` restricts the rendered area.
    """

    ref: str
    role: str = "target"
    crop: Rect | None = None
    boxes: tuple[tuple[str, Rect], ...] = ()
    points: tuple[tuple[int, float, float], ...] = ()
    caption: str = ""

    def describe(self) -> dict[str, Any]:
        return {
            "ref": self.ref,
            "role": self.role,
            "crop": None if self.crop is None else self.crop.as_list(),
            "boxes": [[label, r.as_list()] for label, r in self.boxes],
            "points": [list(p) for p in self.points],
            "caption": self.caption,
        }


@dataclass
class PerceptionRequest:
    task: str
    prompt: str
    attachments: Sequence[Attachment]
    schema_id: str
    max_retries: int = 2
    context: dict[str, Any] = field(default_factory=dict)
    # semantic check beyond the JSON schema; returns an error message or None
    validator: Callable[[dict[str, Any]], str | None] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.schema_id not in SCHEMAS:
            raise ValueError(f"unknown schema id {self.schema_id!r}")
        if self.task in VISION_TASKS and not self.attachments:
            raise ValueError(f"{self.task} requests need at least one attachment")
        if self.task in TEXT_TASKS and self.attachments:
            raise ValueError(f"{self.task} requests carry text only")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    def fingerprint(self) -> str:
        body = {
            "task": self.task,
            "prompt": self.prompt,
            "schema": self.schema_id,
            "attachments": [a.describe() for a in self.attachments],
        }
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


@dataclass
class PerceptionResponse:
    raw_text: str
    payload: dict[str, Any]
    attempts: int
    latency: float

    @property
    def retries(self) -> int:
        return self.attempts - 1


class PerceptionClient:
    """Base client. Subclasses implement :meth:`complete`, returning raw model text.

    :meth:`call` parses and validates the text against the request's schema
    and validator, re-prompting with the validation error appended until the
    retry budget is spent.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.calls = 0
        self.attempts = 0
        self.failures = 0

    def complete(self, request: PerceptionRequest, feedback: Sequence[str]) -> str:
        raise NotImplementedError

    def call(self, request: PerceptionRequest) -> PerceptionResponse:
        t0 = time.perf_counter()
        feedback: list[str] = []
        raw = ""
        with self._lock:
            self.calls += 1
        for attempt in range(1, request.max_retries + 2):
            with self._lock:
                self.attempts += 1
            raw = self.complete(request, tuple(feedback))
            try:
                payload = extract_json(raw)
                validate_payload(payload, request.schema_id)
                if request.validator is not None:
                    problem = request.validator(payload)
                    if problem:
                        raise PayloadError(problem)
            except PayloadError as exc:
                feedback.append(str(exc))
                continue
            return PerceptionResponse(raw, payload, attempt, time.perf_counter() - t0)
        with self._lock:
            self.failures += 1
        raise ClientSchemaError(
            f"{request.task}: no valid response after {request.max_retries + 1} attempts ({feedback[-1]})",
            raw_text=raw,
            attempts=request.max_retries + 1,
        )


def feedback_text(feedback: Sequence[str]) -> str:
    if not feedback:
        return ""
    lines = "\n".join(f"- {f}" for f in feedback)
    return f"\n\nYour previous answer was rejected:\n{lines}\nReturn corrected JSON only."
