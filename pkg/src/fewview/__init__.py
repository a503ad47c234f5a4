"""Camera-view selection for multiview classification and bird's-eye-view
detection on synthetic desk-scale worlds."""

__version__ = "0.1.0"
