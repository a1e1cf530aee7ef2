"""Deterministic split vertical-federated-learning simulator with
client-level unlearning by representation misdirection."""

from . import checkpoint, config, data, metrics, nn, pipeline, protocol, seeds, unlearn

__version__ = "0.1.0"

__all__ = ["checkpoint", "config", "data", "metrics", "nn", "pipeline",
           "protocol", "seeds", "unlearn", "__version__"]
