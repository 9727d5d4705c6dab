"""HTTP service exposing the mining pipeline."""

from .app import app, create_app

__all__ = ["app", "create_app"]
