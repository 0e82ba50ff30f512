"""Causal adjacency discovery for spatiotemporal graph forecasting.

Modules: ``panel`` (data, normalization, windows), ``baseline_adjacency``
(distance / correlation graphs), ``kernel_cit`` (kernel CI test), ``sypi``
(causal parent selection), ``stgcn`` (Chebyshev graph forecaster),
``synth`` (ground-truth generator), ``pipeline`` and ``cli``.
"""

__version__ = "0.1.0"
