"""Versioned prompt templates, stored as text assets next to this module."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

TEMPLATES = ("region_detect", "region_assign", "reconcile", "caption", "merge")


@lru_cache(maxsize=None)
def load(name: str) -> str:
    if name not in TEMPLATES:
        raise KeyError(f"unknown prompt template {name!r}")
    text = resources.files(__package__).joinpath(f"{name}.txt").read_text()
    # first line is the version header
    return text.split("\n", 1)[1]


def render(name: str, **fields: object) -> str:
    return load(name).format(**fields).strip()
