"""Spatiotemporal incidence forecasting engine.

Transformer backbone with optional graph message passing driven by a
geographic distance-kernel adjacency and a dynamically generated
attention-based adjacency, plus the data pipeline, progressive-fold
evaluation, significance tests, and adjacency-map analysis around it.
"""

__version__ = "0.1.0"
