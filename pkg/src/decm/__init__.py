"""Dual-end consistency distillation lab for 2-D flow-matching models."""

__version__ = "0.1.0"
