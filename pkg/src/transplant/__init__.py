"""Graft frozen category modules onto frozen task modules through small
trainable adapters, trained by back-distillation."""

from .estimator import AdapterTransplanter

__version__ = "0.1.0"
__all__ = ["AdapterTransplanter"]
