"""Sparse undirected graphs and the matrix operators built on them.

Graphs are stored as symmetric 0/1 CSR adjacency matrices. Dense operators
(`normalized_laplacian`, `transition_matrix`) exist for oracle checks and are
refused above the oracle cap; production code paths go through the sparse
helpers (`sparse_transition`, `convolution_operator`).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Literal

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

__all__ = [
    "Graph",
    "DenseOperator",
    "GraphFormatError",
    "OracleCapError",
    "oracle_cap",
    "get_oracle_cap",
    "load_edge_list",
    "load_off_mesh",
    "normalized_laplacian",
    "transition_matrix",
    "sparse_transition",
    "convolution_operator",
    "graph_convolution",
    "path_graph",
    "cycle_graph",
    "star_graph",
    "random_connected_graph",
    "bounded_degree_graph",
    "twin_leaf_graph",
]

_ORACLE_CAP = 2048


class GraphFormatError(ValueError):
    """Raised for malformed edge-list or OFF input."""


class OracleCapError(ValueError):
    """Raised when a dense oracle is requested above the oracle cap."""


def get_oracle_cap() -> int:
    return _ORACLE_CAP


@contextlib.contextmanager
def oracle_cap(n: int) -> Iterator[None]:
    """Temporarily change the largest N for which dense operators are built."""
    global _ORACLE_CAP
    old = _ORACLE_CAP
    _ORACLE_CAP = int(n)
    try:
        yield
    finally:
        _ORACLE_CAP = old


def _check_cap(n: int, cap: int | None) -> None:
    limit = _ORACLE_CAP if cap is None else cap
    if n > limit:
        raise OracleCapError(f"oracle only: N={n} exceeds oracle cap {limit}")


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable simple undirected graph.

    Parameters
    ----------
    num_nodes : int
    adjacency : scipy.sparse.csr_matrix
        Symmetric 0/1 matrix without self-loops, sorted indices.
    coords : (num_nodes, m) array, optional
        Embedding-space positions for mesh or point-cloud graphs.
    """

    num_nodes: int
    adjacency: sparse.csr_matrix
    coords: np.ndarray | None = field(default=None)

    def __post_init__(self) -> None:
        adj = self.adjacency
        if adj.shape != (self.num_nodes, self.num_nodes):
            raise ValueError(
                f"adjacency shape {adj.shape} does not match num_nodes={self.num_nodes}"
            )
        if not adj.has_sorted_indices:
            raise ValueError("adjacency indices must be sorted")
        if adj.nnz and (adj.indices.min() < 0 or adj.indices.max() >= self.num_nodes):
            raise ValueError("adjacency column index out of bounds")
        if adj.diagonal().any():
            raise ValueError("adjacency has self-loops")
        if (adj != adj.T).nnz:
            raise ValueError("adjacency is not symmetric")
        if self.coords is not None:
            coords = np.asarray(self.coords, dtype=np.float64)
            if coords.ndim != 2 or coords.shape[0] != self.num_nodes:
                raise ValueError("coords must be a (num_nodes, m) array")
            coords.setflags(write=False)
            object.__setattr__(self, "coords", coords)

    @classmethod
    def from_edges(
        cls,
        edges: Iterable[tuple[int, int]] | np.ndarray,
        num_nodes: int | None = None,
        coords: np.ndarray | None = None,
    ) -> "Graph":
        """Build a graph from (u, v) pairs; symmetrizes, drops loops and duplicates."""
        e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
        e = e.reshape(-1, 2)
        if e.size and e.min() < 0:
            raise ValueError("node ids must be non-negative")
        if num_nodes is None:
            num_nodes = int(e.max()) + 1 if e.size else 0
        elif e.size and e.max() >= num_nodes:
            raise ValueError(f"node id {int(e.max())} out of range for {num_nodes} nodes")
        e = e[e[:, 0] != e[:, 1]]
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        adj = sparse.csr_matrix(
            (np.ones(rows.size), (rows, cols)), shape=(num_nodes, num_nodes)
        )
        adj.sum_duplicates()
        adj.data[:] = 1.0
        adj.sort_indices()
        return cls(num_nodes=num_nodes, adjacency=adj, coords=coords)

    @property
    def num_edges(self) -> int:
        return self.adjacency.nnz // 2

    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr).astype(np.float64)

    def edges(self) -> np.ndarray:
        """Undirected edges as an (E, 2) array with u < v."""
        coo = sparse.triu(self.adjacency, k=1).tocoo()
        return np.column_stack([coo.row, coo.col]).astype(np.int64)

    def num_components(self) -> int:
        return int(csgraph.connected_components(self.adjacency, directed=False)[0])

    def permute(self, perm: np.ndarray) -> "Graph":
        """Relabel nodes so that new node ``i`` is old node ``perm[i]``."""
        perm = np.asarray(perm)
        adj = self.adjacency[perm][:, perm].tocsr()
        adj.sort_indices()
        coords = None if self.coords is None else self.coords[perm]
        return Graph(self.num_nodes, adj, coords)


@dataclass(frozen=True, eq=False)
class DenseOperator:
    data: np.ndarray
    kind: Literal["transition", "normalized_laplacian", "laplacian_pseudoinverse"]

    def __post_init__(self) -> None:
        self.data.setflags(write=False)

    @property
    def n(self) -> int:
        return self.data.shape[0]


# -- file loaders ---------------------------------------------------------------


def load_edge_list(path: str | Path) -> Graph:
    """Read a whitespace-separated ``u v`` edge list (``#`` starts a comment)."""
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise GraphFormatError(f"line {lineno}: expected 'u v', got {raw.rstrip()!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise GraphFormatError(
                    f"line {lineno}: node ids must be integers, got {raw.rstrip()!r}"
                ) from None
            if u < 0 or v < 0:
                raise GraphFormatError(f"line {lineno}: negative node id")
            edges.append((u, v))
    if not edges:
        raise GraphFormatError("no edges")
    return Graph.from_edges(edges)


def _off_tokens(path: str | Path) -> Iterator[tuple[int, list[str]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def load_off_mesh(path: str | Path) -> Graph:
    """Read an OFF triangle mesh; vertices become nodes, triangle sides edges."""
    lines = _off_tokens(path)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise GraphFormatError("empty OFF file") from None
    if header[0] != "OFF":
        raise GraphFormatError(f"line {lineno}: missing OFF header")
    counts = header[1:]
    if not counts:
        try:
            lineno, counts = next(lines)
        except StopIteration:
            raise GraphFormatError("missing vertex/face count line") from None
    try:
        n_verts, n_faces = int(counts[0]), int(counts[1])
    except (ValueError, IndexError):
        raise GraphFormatError(f"line {lineno}: bad vertex/face count line") from None

    verts = np.empty((n_verts, 3))
    for i in range(n_verts):
        try:
            lineno, tok = next(lines)
            verts[i] = [float(t) for t in tok[:3]]
        except StopIteration:
            raise GraphFormatError(f"expected {n_verts} vertices, found {i}") from None
        except ValueError:
            raise GraphFormatError(f"line {lineno}: bad vertex") from None

    edges = []
    for i in range(n_faces):
        try:
            lineno, tok = next(lines)
        except StopIteration:
            raise GraphFormatError(f"expected {n_faces} faces, found {i}") from None
        if int(tok[0]) != 3:
            raise GraphFormatError(f"line {lineno}: non-triangle face")
        a, b, c = (int(t) for t in tok[1:4])
        for idx in (a, b, c):
            if not 0 <= idx < n_verts:
                raise GraphFormatError(f"line {lineno}: vertex index {idx} out of range")
        edges.extend([(a, b), (b, c), (c, a)])
    return Graph.from_edges(np.array(edges, dtype=np.int64).reshape(-1, 2), n_verts, verts)


# -- operators ------------------------------------------------------------------


def _inv_or_zero(deg: np.ndarray, power: float) -> np.ndarray:
    out = np.zeros_like(deg)
    nz = deg > 0
    out[nz] = deg[nz] ** power
    return out


def normalized_laplacian(g: Graph, cap: int | None = None) -> DenseOperator:
    """Dense ``I - D^-1/2 A D^-1/2``; isolated nodes get an all-zero row and column."""
    _check_cap(g.num_nodes, cap)
    deg = g.degrees()
    s = _inv_or_zero(deg, -0.5)
    a = g.adjacency.toarray()
    lap = np.diag((deg > 0).astype(np.float64)) - s[:, None] * a * s[None, :]
    return DenseOperator(0.5 * (lap + lap.T), "normalized_laplacian")


def sparse_transition(g: Graph) -> sparse.csr_matrix:
    """Random-walk matrix ``D^-1 A`` in CSR form; zero-degree rows stay empty."""
    inv = _inv_or_zero(g.degrees(), -1.0)
    return sparse.diags(inv) @ g.adjacency


def transition_matrix(g: Graph, cap: int | None = None) -> DenseOperator:
    _check_cap(g.num_nodes, cap)
    return DenseOperator(sparse_transition(g).toarray(), "transition")


def convolution_operator(g: Graph) -> sparse.csr_matrix:
    """Neighbour-averaging operator; isolated nodes map to themselves."""
    deg = g.degrees()
    isolated = (deg == 0).astype(np.float64)
    return (sparse_transition(g) + sparse.diags(isolated)).tocsr()


def graph_convolution(g: Graph, x: np.ndarray) -> np.ndarray:
    """Average node features over neighbours (isolated nodes keep their own)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != g.num_nodes:
        raise ValueError(
            f"feature matrix has shape {x.shape}, expected ({g.num_nodes}, d)"
        )
    return convolution_operator(g) @ x


# -- synthetic graphs -----------------------------------------------------------


def path_graph(n: int) -> Graph:
    return Graph.from_edges([(i, i + 1) for i in range(n - 1)], n)


def cycle_graph(n: int) -> Graph:
    return Graph.from_edges([(i, (i + 1) % n) for i in range(n)], n)


def star_graph(leaves: int) -> Graph:
    return Graph.from_edges([(0, i) for i in range(1, leaves + 1)], leaves + 1)


def random_connected_graph(n: int, avg_degree: float, rng: np.random.Generator) -> Graph:
    """Erdos-Renyi graph plus a random spanning path, so it is always connected."""
    p = min(1.0, avg_degree / max(n - 1, 1))
    upper = np.triu(rng.random((n, n)) < p, k=1)
    er = np.argwhere(upper)
    order = rng.permutation(n)
    spine = np.column_stack([order[:-1], order[1:]])
    return Graph.from_edges(np.vstack([er, spine]), n)


def bounded_degree_graph(n: int, degree: int, rng: np.random.Generator) -> Graph:
    """Ring lattice with ``degree // 2`` random chords per node; O(n) edges."""
    idx = np.arange(n)
    edges = [np.column_stack([idx, (idx + 1) % n])]
    for _ in range(max(degree // 2 - 1, 0)):
        edges.append(np.column_stack([idx, rng.integers(0, n, size=n)]))
    return Graph.from_edges(np.vstack(edges), n)


def twin_leaf_graph(n: int, rng: np.random.Generator, avg_degree: float = 4.0, hubs: int = 2) -> Graph:
    """Random connected core with groups of leaves hanging off a few hubs.

    Leaves sharing a hub are interchangeable, so ``e_u - e_v`` for two of them
    is an eigenvector at eigenvalue 1 and the spectrum has a degenerate block.
    Useful for exercising rotations inside multiplicity groups.
    """
    if n < 4:
        raise ValueError("twin_leaf_graph needs n >= 4")
    num_leaves = max(2, n // 4)
    core = n - num_leaves
    base = random_connected_graph(core, avg_degree, rng)
    hub_ids = rng.choice(core, size=min(hubs, core), replace=False)
    owners = hub_ids[np.arange(num_leaves) % len(hub_ids)]
    leaves = np.column_stack([owners, core + np.arange(num_leaves)])
    return Graph.from_edges(np.vstack([base.edges(), leaves]), n)
