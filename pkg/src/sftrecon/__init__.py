"""Rebuild an aligned chat model's SFT data and mix it with domain data.

The pipeline elicits instructions from the base model through its own
chat-template user-turn opener, fans each instruction out to a committee
of models for candidate responses, scores every candidate with every
committee member against a fixed rubric, keeps the argmax response, and
finally mixes the curated pairs with a domain dataset into training-ready
JSON-lines files.
"""

__version__ = "0.1.0"

from .errors import ConfigError, SftReconError

__all__ = ["ConfigError", "SftReconError", "__version__"]
