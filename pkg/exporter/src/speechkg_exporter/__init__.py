"""Transformer text embeddings in the speechkg feature format."""

from .export import (
    POOLING_MODES,
    ExportError,
    ExportRequest,
    ResourceLimitError,
    export_embeddings,
    read_requests,
    resolve_pooling,
)

__all__ = [
    "POOLING_MODES",
    "ExportError",
    "ExportRequest",
    "ResourceLimitError",
    "export_embeddings",
    "read_requests",
    "resolve_pooling",
]
