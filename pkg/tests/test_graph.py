import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import sparse

from conftest import random_graph
from gist.graph import (
    Graph,
    GraphFormatError,
    OracleCapError,
    bounded_degree_graph,
    convolution_operator,
    cycle_graph,
    graph_convolution,
    load_edge_list,
    load_off_mesh,
    normalized_laplacian,
    oracle_cap,
    path_graph,
    sparse_transition,
    star_graph,
    transition_matrix,
    twin_leaf_graph,
)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


# -- construction ---------------------------------------------------------------------


def test_from_edges_symmetrizes_and_dedups():
    g = Graph.from_edges([(0, 1), (1, 0), (1, 1), (2, 1)])
    assert g.num_nodes == 3
    assert g.num_edges == 2
    assert (g.adjacency != g.adjacency.T).nnz == 0
    np.testing.assert_array_equal(g.edges(), [[0, 1], [1, 2]])


def test_graph_rejects_asymmetric_adjacency():
    adj = sparse.csr_matrix(np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(ValueError, match="symmetric"):
        Graph(2, adj)


def test_graph_rejects_self_loops():
    adj = sparse.csr_matrix(np.eye(2))
    with pytest.raises(ValueError, match="self-loops"):
        Graph(2, adj)


def test_graph_rejects_bad_shape():
    with pytest.raises(ValueError):
        Graph(3, sparse.csr_matrix((2, 2)))


def test_from_edges_out_of_range():
    with pytest.raises(ValueError):
        Graph.from_edges([(0, 5)], num_nodes=3)


def test_coords_are_read_only():
    g = Graph.from_edges([(0, 1)], coords=np.zeros((2, 3)))
    with pytest.raises(ValueError):
        g.coords[0, 0] = 1.0


def test_num_components():
    g = Graph.from_edges([(0, 1), (2, 3)], num_nodes=5)
    assert g.num_components() == 3


# -- loaders ----------------------------------------------------------------------------


def test_edge_list_p3(tmp_path):
    g = load_edge_list(write(tmp_path, "p3.txt", "0 1\n1 2"))
    assert g.num_nodes == 3
    assert g.num_edges == 2


def test_edge_list_dup_and_loop_dropped(tmp_path):
    g = load_edge_list(write(tmp_path, "p2.txt", "0 1\n1 0\n1 1"))
    assert g.num_nodes == 2
    assert g.num_edges == 1


def test_edge_list_tabs_and_comments(tmp_path):
    g = load_edge_list(write(tmp_path, "g.txt", "# header\n0\t1  # trailing\n\n2\t1\n"))
    assert g.num_edges == 2


def test_edge_list_empty(tmp_path):
    with pytest.raises(GraphFormatError, match="no edges"):
        load_edge_list(write(tmp_path, "e.txt", ""))


@pytest.mark.parametrize("text,lineno", [("0 1\n1 x\n", 2), ("0 1 2\n", 1), ("0 1\n\n-1 2\n", 3)])
def test_edge_list_malformed_reports_line(tmp_path, text, lineno):
    with pytest.raises(GraphFormatError, match=f"line {lineno}"):
        load_edge_list(write(tmp_path, "bad.txt", text))


def test_edge_list_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_edge_list(tmp_path / "nope.txt")


def test_off_single_triangle(tmp_path):
    g = load_off_mesh(write(tmp_path, "t.off", "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n"))
    assert g.num_nodes == 3
    assert g.num_edges == 3
    np.testing.assert_array_equal(g.coords[1], [1.0, 0.0, 0.0])


def test_off_shared_edge(tmp_path):
    text = "OFF\n4 2 0\n0 0 0\n1 0 0\n0 1 0\n1 1 0\n3 0 1 2\n3 1 3 2\n"
    g = load_off_mesh(write(tmp_path, "q.off", text))
    assert g.num_nodes == 4
    assert g.num_edges == 5


def test_off_quad_face_rejected(tmp_path):
    text = "OFF\n4 1 0\n0 0 0\n1 0 0\n0 1 0\n1 1 0\n4 0 1 2 3\n"
    with pytest.raises(GraphFormatError, match="non-triangle face"):
        load_off_mesh(write(tmp_path, "q.off", text))


def test_off_index_out_of_range(tmp_path):
    text = "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n"
    with pytest.raises(GraphFormatError, match="out of range"):
        load_off_mesh(write(tmp_path, "t.off", text))


def test_off_missing_header(tmp_path):
    with pytest.raises(GraphFormatError, match="OFF header"):
        load_off_mesh(write(tmp_path, "t.off", "3 1 0\n"))


# -- operators -----------------------------------------------------------------------


def test_laplacian_p2(p2):
    lap = normalized_laplacian(p2)
    assert lap.kind == "normalized_laplacian"
    np.testing.assert_allclose(lap.data, [[1.0, -1.0], [-1.0, 1.0]], atol=1e-15)
    np.testing.assert_allclose(np.linalg.eigvalsh(lap.data), [0.0, 2.0], atol=1e-12)


def test_laplacian_p3_eigenvalues(p3):
    lap = normalized_laplacian(p3)
    np.testing.assert_allclose(np.linalg.eigvalsh(lap.data), [0.0, 1.0, 2.0], atol=1e-12)
    # off-diagonals are -1/sqrt(d_i d_j) = -1/sqrt(2)
    assert lap.data[0, 1] == pytest.approx(-1 / np.sqrt(2), abs=1e-15)


def test_laplacian_isolated_node_zero_row():
    g = Graph.from_edges([(0, 1)], num_nodes=3)
    lap = normalized_laplacian(g).data
    np.testing.assert_array_equal(lap[2], 0.0)
    np.testing.assert_array_equal(lap[:, 2], 0.0)


def test_laplacian_oracle_cap():
    g = path_graph(10)
    with oracle_cap(8):
        with pytest.raises(OracleCapError, match="oracle only"):
            normalized_laplacian(g)
    assert normalized_laplacian(g, cap=16).n == 10


def test_dense_operator_read_only(p3):
    lap = normalized_laplacian(p3)
    with pytest.raises(ValueError):
        lap.data[0, 0] = 5.0


def test_transition_p2(p2):
    np.testing.assert_array_equal(transition_matrix(p2).data, [[0.0, 1.0], [1.0, 0.0]])


def test_transition_star():
    p = transition_matrix(star_graph(3)).data
    np.testing.assert_allclose(p[0], [0.0, 1 / 3, 1 / 3, 1 / 3], atol=1e-15)
    for leaf in (1, 2, 3):
        np.testing.assert_array_equal(p[leaf], [1.0, 0.0, 0.0, 0.0])


def test_transition_isolated_row():
    p = transition_matrix(Graph.from_edges([(0, 1), (1, 2)], num_nodes=4)).data
    np.testing.assert_array_equal(p[3], 0.0)
    np.testing.assert_allclose(p[:3].sum(axis=1), 1.0, atol=1e-12)


def test_sparse_transition_matches_dense():
    g = random_graph(30, 3)
    np.testing.assert_allclose(sparse_transition(g).toarray(), transition_matrix(g).data, atol=0)


def test_convolution_p2(p2):
    np.testing.assert_array_equal(graph_convolution(p2, np.array([[1.0], [3.0]])), [[3.0], [1.0]])


def test_convolution_star_center():
    x = np.array([[0.0], [1.0], [2.0], [3.0]])
    assert graph_convolution(star_graph(3), x)[0, 0] == pytest.approx(2.0)


def test_convolution_isolated_keeps_feature():
    g = Graph.from_edges([(0, 1)], num_nodes=3)
    x = np.array([[1.0], [2.0], [7.0]])
    assert graph_convolution(g, x)[2, 0] == 7.0


def test_convolution_dimension_mismatch(p3):
    with pytest.raises(ValueError):
        graph_convolution(p3, np.ones((4, 2)))


def test_convolution_operator_is_sparse(p3):
    assert sparse.issparse(convolution_operator(p3))


# -- generators -----------------------------------------------------------------------------


def test_generators_shapes():
    assert path_graph(5).num_edges == 4
    assert cycle_graph(5).num_edges == 5
    assert star_graph(4).num_edges == 4


def test_bounded_degree_graph_is_sparse():
    g = bounded_degree_graph(1000, 8, np.random.default_rng(0))
    assert g.num_components() == 1
    assert g.num_edges <= 4 * 1000


def test_twin_leaf_graph_has_degenerate_eigenvalue_one():
    g = twin_leaf_graph(20, np.random.default_rng(1))
    assert g.num_components() == 1
    ev = np.linalg.eigvalsh(normalized_laplacian(g).data)
    assert np.sum(np.abs(ev - 1.0) < 1e-9) >= 2


# -- properties --------------------------------------------------------------------------


@given(n=st.integers(2, 128), seed=st.integers(0, 10_000))
def test_transition_rows_stochastic(n, seed):
    g = random_graph(n, seed)
    p = transition_matrix(g).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@given(n=st.integers(2, 128), seed=st.integers(0, 10_000))
def test_laplacian_symmetric_psd(n, seed):
    lap = normalized_laplacian(random_graph(n, seed)).data
    np.testing.assert_array_equal(lap, lap.T)
    ev = np.linalg.eigvalsh(lap)
    assert ev.min() >= -1e-9
    assert ev.max() <= 2 + 1e-9


@given(sizes=st.lists(st.integers(2, 12), min_size=1, max_size=4), seed=st.integers(0, 1000))
def test_null_space_counts_components(sizes, seed):
    edges, offset = [], 0
    for i, m in enumerate(sizes):
        sub = random_graph(m, seed + i)
        edges.append(sub.edges() + offset)
        offset += m
    g = Graph.from_edges(np.vstack(edges), offset)
    ev = np.linalg.eigvalsh(normalized_laplacian(g).data)
    assert np.sum(ev < 1e-8) == len(sizes) == g.num_components()


@given(n=st.integers(2, 40), seed=st.integers(0, 10_000))
def test_convolution_permutation_equivariant(n, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(n, seed)
    x = rng.standard_normal((n, 3))
    perm = rng.permutation(n)
    np.testing.assert_allclose(
        graph_convolution(g.permute(perm), x[perm]), graph_convolution(g, x)[perm], atol=1e-12
    )
