"""Bilevel optimization of rendering-parameter distributions.

Learns pose-bin, zoom-bin and lighting-mixture distributions for a
differentiable renderer so that data sampled from them maximizes a
downstream model's validation accuracy.
"""

__version__ = "0.1.0"
