"""Gauge-invariant spectral transformer for graphs and sampled manifolds.

Submodules:

- ``graph``: graphs, loaders, Laplacian and transition operators
- ``spectral``: exact eigenmaps, sparse random projections, FastRP, gauge transforms
- ``attention``: linear attention and its gauge-invariant/equivariant forms
- ``block``: the three-branch block, the stacked model and branch ablation
- ``autodiff``: a small tape-based reverse mode, finite differences, optimizers
- ``manifold``: manifold samplers, k-NN graphs, discretization and transfer studies
- ``estimators``: scikit-learn style wrappers
"""

from .attention import gauge_equivariant_attention, gauge_invariant_attention, linear_attention
from .block import ModelConfig, init_weights, model_forward, multi_scale_block
from .estimators import FastRPEmbedder, GISTNodeClassifier, GISTNodeRegressor
from .graph import Graph, load_edge_list, load_off_mesh, normalized_laplacian
from .spectral import SpectralEmbedding, apply_gauge, exact_eigenmaps, fastrp_embed, sample_gauge_transform

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "load_edge_list",
    "load_off_mesh",
    "normalized_laplacian",
    "SpectralEmbedding",
    "exact_eigenmaps",
    "fastrp_embed",
    "sample_gauge_transform",
    "apply_gauge",
    "linear_attention",
    "gauge_invariant_attention",
    "gauge_equivariant_attention",
    "ModelConfig",
    "init_weights",
    "multi_scale_block",
    "model_forward",
    "FastRPEmbedder",
    "GISTNodeClassifier",
    "GISTNodeRegressor",
]
