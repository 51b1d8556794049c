"""scikit-learn style wrappers.

The graph is fixed per fit: ``X`` holds one row of features per node and the
graph is passed alongside it. Training is transductive, so unlabeled nodes
stay in ``X`` and are marked in ``y`` (``-1`` for classification, NaN for
regression), following the convention of sklearn's semi-supervised models.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from .block import GISTModel, ModelConfig, _forward, _initial_phi
from .graph import Graph, convolution_operator
from .spectral import fastrp_embed

__all__ = ["FastRPEmbedder", "GISTNodeClassifier", "GISTNodeRegressor"]


def _check_graph(graph) -> Graph:
    if not isinstance(graph, Graph):
        raise TypeError(f"expected a Graph, got {type(graph).__name__}")
    return graph


class FastRPEmbedder(TransformerMixin, BaseEstimator):
    """FastRP node embeddings as a transformer over graphs.

    ``fit`` only validates hyperparameters; ``transform(graph)`` returns the
    ``(num_nodes, r)`` embedding.
    """

    def __init__(self, r: int = 64, k: int = 8, seed: int = 0, sparsity: float | None = None):
        self.r = r
        self.k = k
        self.seed = seed
        self.sparsity = sparsity

    def fit(self, X, y=None):
        _check_graph(X)
        if self.r < 1 or self.k < 1:
            raise ValueError("r and k must be >= 1")
        self.n_features_out_ = int(self.r)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "n_features_out_")
        g = _check_graph(X)
        return fastrp_embed(g, self.r, self.k, seed=self.seed, sparsity=self.sparsity).data


class _GISTBase(BaseEstimator):
    _task = "node_classification"

    def __init__(
        self,
        num_blocks: int = 2,
        hidden_dim: int = 16,
        embed_dim: int = 32,
        fastrp_k: int = 8,
        feature_map: str = "relu",
        epochs: int = 150,
        lr: float = 1e-2,
        optimizer: str = "adam",
        seed: int = 0,
    ):
        self.num_blocks = num_blocks
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.fastrp_k = fastrp_k
        self.feature_map = feature_map
        self.epochs = epochs
        self.lr = lr
        self.optimizer = optimizer
        self.seed = seed

    def _config(self, input_dim: int, output_dim: int) -> ModelConfig:
        return ModelConfig(
            num_blocks=self.num_blocks, hidden_dim=self.hidden_dim, embed_dim=self.embed_dim,
            fastrp_k=self.fastrp_k, input_dim=input_dim, output_dim=output_dim,
            task=self._task, seed=self.seed, feature_map=self.feature_map,
        )

    def _fit(self, X, targets: np.ndarray, idx: np.ndarray, graph, output_dim: int):
        g = _check_graph(graph)
        if X.shape[0] != g.num_nodes:
            raise ValueError(f"X has {X.shape[0]} rows but the graph has {g.num_nodes} nodes")
        if idx.size == 0:
            raise ValueError("no labeled nodes")
        self.config_ = self._config(X.shape[1], output_dim)
        self.n_features_in_ = X.shape[1]
        self.graph_ = g
        phi = _initial_phi(g, self.config_, None)
        data = {"graph": g, "x": X, "phi": phi, "y": targets, "idx": idx, "conv": convolution_operator(g)}
        self.weights_, self.loss_curve_ = ad.train(
            GISTModel(self.config_), data, self.optimizer, self.epochs, self.seed, self.lr
        )
        return self

    def _raw_predict(self, X, graph=None) -> np.ndarray:
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        g = self.graph_ if graph is None else _check_graph(graph)
        if X.shape[0] != g.num_nodes:
            raise ValueError(f"X has {X.shape[0]} rows but the graph has {g.num_nodes} nodes")
        phi = _initial_phi(g, self.config_, None)
        return _forward(g, ad.Var(X), ad.Var(phi), self.weights_, self.config_).value


class GISTNodeClassifier(ClassifierMixin, _GISTBase):
    """Node classifier; ``y == -1`` marks unlabeled nodes."""

    _task = "node_classification"

    def fit(self, X, y, graph: Graph):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError("y must have one entry per node")
        labeled = y != -1
        self.classes_ = np.unique(y[labeled])
        codes = np.zeros(y.shape[0], dtype=np.int64)
        codes[labeled] = np.searchsorted(self.classes_, y[labeled])
        return self._fit(X, codes, np.flatnonzero(labeled), graph, max(len(self.classes_), 1))

    def decision_function(self, X, graph: Graph | None = None) -> np.ndarray:
        return self._raw_predict(X, graph)

    def predict_proba(self, X, graph: Graph | None = None) -> np.ndarray:
        z = self._raw_predict(X, graph)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X, graph: Graph | None = None) -> np.ndarray:
        z = self._raw_predict(X, graph)
        return self.classes_[np.argmax(z, axis=1)]


class GISTNodeRegressor(RegressorMixin, _GISTBase):
    """Scalar node regressor; NaN targets mark unlabeled nodes."""

    _task = "node_regression"

    def fit(self, X, y, graph: Graph):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (X.shape[0],):
            raise ValueError("y must have one entry per node")
        labeled = ~np.isnan(y)
        return self._fit(X, np.nan_to_num(y)[:, None], np.flatnonzero(labeled), graph, 1)

    def predict(self, X, graph: Graph | None = None) -> np.ndarray:
        return self._raw_predict(X, graph)[:, 0]
