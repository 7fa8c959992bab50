"""Semantic-prior distillation for restoring degraded grayscale scans."""

__version__ = "0.1.0"
