"""Three-stream contrastive deep clustering with an EMA target network."""

__version__ = "0.1.0"
