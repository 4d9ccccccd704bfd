"""Standalone reference backend for the screening pipeline's wire protocol."""

from .scoring import ReferenceStub, StubConfig
from .server import BackendServer, StubModelRegistry, serve_backend

__all__ = ["BackendServer", "ReferenceStub", "StubConfig", "StubModelRegistry", "serve_backend"]

__version__ = "0.1.0"
