"""Desk-scale camera-radar fusion 3D detection.

Transformer fusion decoders with distance-gated attention masks, a set-based
Hungarian training objective, a synthetic scene simulator, and a
center-distance detection evaluator, all on a small float64 autodiff kernel.
"""

__version__ = "0.1.0"
