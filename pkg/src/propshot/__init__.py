"""Few-shot classification with learned per-image property tokens.

The pipeline operates purely on precomputed (or synthetic) embedding
bundles: description pools are pruned into per-class dominant properties,
a small cross-attention generator turns patch features into property
tokens, contrastive training aligns tokens with their descriptions, and a
hybrid class/property cache produces the final scores.
"""

__version__ = "0.1.0"
