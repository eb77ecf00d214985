"""Exporter error types."""

from __future__ import annotations


class ExportError(Exception):
    """Base class for exporter failures."""


class UnsupportedLayout(ExportError):
    """The model's attention layout cannot be captured faithfully."""
