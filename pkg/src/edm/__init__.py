"""Example driven modelling: rule-based oracles, covering examples, and learned surrogates."""

__version__ = "0.1.0"
