"""Recurrent-Transformer layers: reference and tiled forward passes, manual
backward, counted-traffic model, executable constructions and a copy-task
harness."""

__version__ = "0.1.0"
