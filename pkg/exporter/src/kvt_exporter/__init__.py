"""Per-head attention tensor capture for causal LMs, exported as KVT1 traces."""

from .errors import ExportError, UnsupportedLayout
from .export import Captured, ExportSpec, capture, export, write_kvt1

__all__ = ["Captured", "ExportError", "ExportSpec", "UnsupportedLayout", "capture", "export", "write_kvt1"]
