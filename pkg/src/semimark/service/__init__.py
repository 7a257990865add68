"""HTTP surface: FastAPI app plus its request/response models."""

from .app import ServiceState, app_factory, create_app
from . import schemas

__all__ = ["ServiceState", "app_factory", "create_app", "schemas"]
