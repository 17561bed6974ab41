"""Composite encoder-layer representations for code classification.

The package fine-tunes a small bidirectional encoder whose per-layer hidden
states are reduced to a single vector by one of twelve combination
strategies (slicing, max pooling, learnable weighted sums over tokens and
layers, and layer pruning), then compares each strategy against the
standard last-layer CLS baseline with paired nonparametric statistics.
"""

__version__ = "0.1.0"
