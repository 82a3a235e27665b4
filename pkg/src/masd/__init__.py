"""Angular-margin embeddings for semi-supervised anomalous sound detection."""

__version__ = "0.1.0"
