"""Bridges image datasets, text encoders, and LLM description endpoints to
the propshot bundle formats (PCT1 tensors + manifest + descriptions.jsonl)."""

__version__ = "0.1.0"
