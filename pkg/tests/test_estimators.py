import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import random_graph
from gist.datasets import community_task
from gist.estimators import FastRPEmbedder, GISTNodeClassifier, GISTNodeRegressor
from gist.graph import path_graph
from gist.spectral import fastrp_embed


def test_fastrp_embedder_matches_function():
    g = random_graph(40, 1)
    emb = FastRPEmbedder(r=16, k=3, seed=2).fit(g)
    assert emb.n_features_out_ == 16
    np.testing.assert_array_equal(emb.transform(g), fastrp_embed(g, 16, 3, seed=2).data)
    np.testing.assert_array_equal(FastRPEmbedder(r=16, k=3, seed=2).fit_transform(g), emb.transform(g))


def test_fastrp_embedder_validation():
    with pytest.raises(ValueError):
        FastRPEmbedder(r=0).fit(path_graph(3))
    with pytest.raises(TypeError):
        FastRPEmbedder().fit(np.ones((3, 3)))
    with pytest.raises(NotFittedError):
        FastRPEmbedder().transform(path_graph(3))


def test_get_params_and_clone():
    clf = GISTNodeClassifier(hidden_dim=4, epochs=3)
    assert clf.get_params()["hidden_dim"] == 4
    c2 = clone(clf)
    assert c2.get_params() == clf.get_params()
    assert c2 is not clf


def test_classifier_semi_supervised():
    task = community_task(seed=0)
    y = np.full(task.labels.shape, -1)
    y[task.train_idx] = task.labels[task.train_idx]
    clf = GISTNodeClassifier(num_blocks=1, hidden_dim=8, epochs=100).fit(task.x, y, task.graph)
    np.testing.assert_array_equal(clf.classes_, [0, 1])
    assert len(clf.loss_curve_) == 100
    proba = clf.predict_proba(task.x)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    pred = clf.predict(task.x)
    assert np.mean(pred[task.test_idx] == task.labels[task.test_idx]) > 0.7
    assert clf.score(task.x[:], task.labels) > 0.7


def test_classifier_string_labels():
    g = random_graph(20, 3)
    X = np.random.default_rng(0).standard_normal((20, 2))
    y = np.array(["a", "b"] * 10, dtype=object)
    y_in = y.copy()
    y_in[::3] = -1
    clf = GISTNodeClassifier(num_blocks=1, hidden_dim=4, epochs=5).fit(X, y_in, g)
    assert set(clf.classes_) == {"a", "b"}
    assert set(clf.predict(X)) <= {"a", "b"}


def test_classifier_is_deterministic():
    task = community_task(n=40, seed=2)
    a = GISTNodeClassifier(num_blocks=1, hidden_dim=4, epochs=10, seed=3).fit(task.x, task.labels, task.graph)
    b = GISTNodeClassifier(num_blocks=1, hidden_dim=4, epochs=10, seed=3).fit(task.x, task.labels, task.graph)
    np.testing.assert_array_equal(a.decision_function(task.x), b.decision_function(task.x))


def test_regressor_learns_smooth_target():
    g = path_graph(30)
    X = np.linspace(-1, 1, 30)[:, None]
    y = 2.0 * X[:, 0] + 0.5
    y_in = y.copy()
    y_in[::4] = np.nan
    reg = GISTNodeRegressor(num_blocks=1, hidden_dim=8, epochs=300, lr=1e-2).fit(X, y_in, g)
    pred = reg.predict(X)
    assert pred.shape == (30,)
    assert reg.score(X, y) > 0.9


def test_predict_on_new_graph():
    g1, g2 = random_graph(20, 1), random_graph(25, 2)
    rng = np.random.default_rng(0)
    reg = GISTNodeRegressor(num_blocks=1, hidden_dim=4, epochs=3).fit(rng.standard_normal((20, 3)), rng.standard_normal(20), g1)
    assert reg.predict(rng.standard_normal((25, 3)), g2).shape == (25,)
    with pytest.raises(ValueError, match="rows"):
        reg.predict(rng.standard_normal((25, 3)))


def test_input_validation():
    g = path_graph(5)
    X = np.ones((5, 2))
    with pytest.raises(ValueError, match="rows"):
        GISTNodeRegressor(epochs=1).fit(np.ones((4, 2)), np.ones(4), g)
    with pytest.raises(ValueError, match="one entry per node"):
        GISTNodeClassifier(epochs=1).fit(X, np.zeros(3), g)
    with pytest.raises(ValueError, match="no labeled"):
        GISTNodeClassifier(epochs=1).fit(X, np.full(5, -1), g)
    with pytest.raises(NotFittedError):
        GISTNodeClassifier().predict(X)
    reg = GISTNodeRegressor(num_blocks=1, hidden_dim=2, epochs=1).fit(X, np.ones(5), g)
    with pytest.raises(ValueError, match="features"):
        reg.predict(np.ones((5, 3)))
    with pytest.raises(ValueError):
        reg.predict(np.full((5, 2), np.nan))
