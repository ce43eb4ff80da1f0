"""Contract-typed feature attribution for desk-scale generative language models."""

__version__ = "0.1.0"
