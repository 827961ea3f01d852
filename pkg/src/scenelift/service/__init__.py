"""HTTP service wrapping the request-scale pipeline operations."""

from .app import create_app

__all__ = ["create_app"]
