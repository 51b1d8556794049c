"""Laplacian eigenmaps, random projections and gauge transforms.

Two unrelated projection objects live here. `fastrp_embed` draws an N x r
very sparse matrix and pushes it through powers of the random-walk matrix.
`project_eigenmaps` applies an r x K matrix to exact eigenmap rows. Both are
drawn with `sample_projection`, but they are never assumed to agree.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .graph import DenseOperator, Graph, _check_cap, sparse_transition

__all__ = [
    "SpectralEmbedding",
    "ProjectionSpec",
    "GaugeTransform",
    "exact_eigenmaps",
    "laplacian_pseudoinverse",
    "resistance_distance",
    "sample_projection",
    "fastrp_embed",
    "project_eigenmaps",
    "sample_gauge_transform",
    "apply_gauge",
    "jl_error_stats",
    "jl_target_dim",
    "gram",
    "save_embedding_csv",
    "save_embedding_bin",
    "load_embedding_bin",
]

EMBED_MAGIC = b"GISTEMB1"

Source = Literal["exact_eigenmaps", "projected_eigenmaps", "fastrp"]


@dataclass(frozen=True, eq=False)
class SpectralEmbedding:
    """N x r positional embedding, one row per node.

    ``spectrum`` is only set for exact eigenmaps: it holds the kept eigenvalues
    (ascending, one per column) and ``groups`` the multiplicity-group id of
    each column.
    """

    data: np.ndarray
    source: Source
    spectrum: np.ndarray | None = None
    groups: np.ndarray | None = None

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError("embedding data must be 2-D")
        if not np.all(np.isfinite(data)):
            raise ValueError("embedding has non-finite entries")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def num_nodes(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def group_slices(self) -> list[np.ndarray]:
        """Column indices of each multiplicity group, in eigenvalue order."""
        if self.groups is None:
            raise ValueError("embedding has no spectrum")
        return [np.flatnonzero(self.groups == gid) for gid in np.unique(self.groups)]


@dataclass(frozen=True)
class ProjectionSpec:
    input_dim: int
    target_dim: int
    sparsity: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.target_dim < 1:
            raise ValueError("target_dim must be >= 1")
        if self.sparsity is not None and self.sparsity < 1:
            raise ValueError("sparsity must be >= 1")

    @property
    def s(self) -> float:
        return math.sqrt(self.input_dim) if self.sparsity is None else float(self.sparsity)


@dataclass(frozen=True, eq=False)
class GaugeTransform:
    blocks: list[np.ndarray] = field(default_factory=list)
    kind: Literal["sign_flip", "block_rotation", "identity"] = "identity"


def gram(x: np.ndarray | SpectralEmbedding) -> np.ndarray:
    data = x.data if isinstance(x, SpectralEmbedding) else np.asarray(x)
    return data @ data.T


# -- exact spectra ----------------------------------------------------------------


def _eigh(lap: DenseOperator, cap: int | None) -> tuple[np.ndarray, np.ndarray]:
    if lap.kind != "normalized_laplacian":
        raise ValueError(f"expected a normalized_laplacian operator, got {lap.kind}")
    _check_cap(lap.n, cap)
    return np.linalg.eigh(lap.data)


def _default_zero_tol(evals: np.ndarray) -> float:
    return 1e-8 * max(float(evals[-1]), 1e-300) if evals.size else 0.0


def _multiplicity_groups(evals: np.ndarray, lam_max: float) -> np.ndarray:
    tol = 1e-6 * max(1.0, lam_max)
    groups = np.zeros(evals.size, dtype=np.int64)
    for k in range(1, evals.size):
        groups[k] = groups[k - 1] + (evals[k] - evals[k - 1] > tol)
    return groups


def exact_eigenmaps(
    lap: DenseOperator, zero_tol: float | None = None, cap: int | None = None
) -> SpectralEmbedding:
    """Columns ``u_k / sqrt(lambda_k)`` for every eigenvalue above ``zero_tol``."""
    evals, evecs = _eigh(lap, cap)
    tol = _default_zero_tol(evals) if zero_tol is None else zero_tol
    keep = evals > tol
    lam = evals[keep]
    data = evecs[:, keep] / np.sqrt(lam)
    lam_max = float(evals[-1]) if evals.size else 0.0
    return SpectralEmbedding(data, "exact_eigenmaps", lam, _multiplicity_groups(lam, lam_max))


def laplacian_pseudoinverse(
    lap: DenseOperator, zero_tol: float | None = None, cap: int | None = None
) -> DenseOperator:
    evals, evecs = _eigh(lap, cap)
    tol = _default_zero_tol(evals) if zero_tol is None else zero_tol
    inv = np.zeros_like(evals)
    keep = evals > tol
    inv[keep] = 1.0 / evals[keep]
    pinv = (evecs * inv) @ evecs.T
    return DenseOperator(0.5 * (pinv + pinv.T), "laplacian_pseudoinverse")


def resistance_distance(
    lap: DenseOperator | np.ndarray, i: int, j: int, zero_tol: float | None = None
) -> float:
    """Effective resistance ``(e_i - e_j)^T L^+ (e_i - e_j)``.

    ``lap`` may be a normalized Laplacian or an already computed pseudoinverse
    (pass the latter when querying many pairs).
    """
    n = lap.n if isinstance(lap, DenseOperator) else np.asarray(lap).shape[0]
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"node ids ({i}, {j}) out of range for {n} nodes")
    if i == j:
        return 0.0
    if isinstance(lap, DenseOperator) and lap.kind == "normalized_laplacian":
        pinv = laplacian_pseudoinverse(lap, zero_tol).data
    else:
        pinv = lap.data if isinstance(lap, DenseOperator) else np.asarray(lap)
    return float(pinv[i, i] + pinv[j, j] - 2.0 * pinv[i, j])


# -- random projections -------------------------------------------------------------


def sample_projection(spec: ProjectionSpec) -> np.ndarray:
    """Very sparse random projection of shape (target_dim, input_dim).

    Entries are ``+-sqrt(s / r)`` with probability ``1/(2s)`` each and zero
    otherwise, so that ``E[R^T R] = I``. Uses a counter-based generator so a
    given seed reproduces the same matrix on every platform.
    """
    s = spec.s
    rng = np.random.Generator(np.random.Philox(spec.seed))
    u = rng.random((spec.target_dim, spec.input_dim))
    p = 1.0 / (2.0 * s)
    scale = math.sqrt(s / spec.target_dim)
    out = np.zeros_like(u)
    out[u < p] = scale
    out[u > 1.0 - p] = -scale
    return out


def jl_target_dim(n: int, eps: float, c: float = 8.0) -> int:
    """``ceil(c ln n / eps^2)``."""
    return int(math.ceil(c * math.log(n) / eps**2))


def fastrp_embed(
    g: Graph,
    r: int,
    k: int,
    seed: int = 0,
    sparsity: float | None = None,
    projection: np.ndarray | None = None,
) -> SpectralEmbedding:
    """Sum of ``P^i R`` for i = 1..k, via k sparse products (``P^i`` never formed).

    ``projection`` overrides the sampled N x r matrix; used to check linearity.
    """
    if r < 1 or k < 1:
        raise ValueError("r and k must be >= 1")
    if projection is None:
        spec = ProjectionSpec(g.num_nodes, r, sparsity, seed)
        projection = sample_projection(spec).T
    elif projection.shape != (g.num_nodes, r):
        raise ValueError(f"projection must have shape ({g.num_nodes}, {r})")
    p = sparse_transition(g)
    cur = p @ projection
    total = cur.copy()
    for _ in range(k - 1):
        cur = p @ cur
        total += cur
    return SpectralEmbedding(total, "fastrp")


def project_eigenmaps(emb: SpectralEmbedding, proj: np.ndarray) -> SpectralEmbedding:
    """Row-wise ``phi_i -> R phi_i``."""
    if emb.source != "exact_eigenmaps":
        raise ValueError("project_eigenmaps expects exact eigenmaps")
    proj = np.asarray(proj, dtype=np.float64)
    if proj.ndim != 2 or proj.shape[1] != emb.dim:
        raise ValueError(
            f"projection has {proj.shape[-1]} columns, embedding has {emb.dim}"
        )
    return SpectralEmbedding(emb.data @ proj.T, "projected_eigenmaps")


# -- gauge transforms ----------------------------------------------------------------


def _haar_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def sample_gauge_transform(
    emb: SpectralEmbedding,
    kind: Literal["sign_flip", "block_rotation", "identity"],
    seed: int = 0,
) -> GaugeTransform:
    """Random orthogonal block per multiplicity group of ``emb``.

    ``block_rotation`` draws a Haar-random orthogonal matrix for every group of
    size > 1 and a random sign for singleton groups.
    """
    if emb.spectrum is None or emb.groups is None:
        raise ValueError("gauge transforms need exact eigenmaps with a spectrum")
    rng = np.random.default_rng(seed)
    blocks = []
    for cols in emb.group_slices():
        m = cols.size
        if kind == "identity":
            blocks.append(np.eye(m))
        elif kind == "sign_flip":
            blocks.append(np.diag(rng.choice([-1.0, 1.0], size=m)))
        elif kind == "block_rotation":
            blocks.append(_haar_orthogonal(m, rng) if m > 1 else np.array([[rng.choice([-1.0, 1.0])]]))
        else:
            raise ValueError(f"unknown gauge kind {kind!r}")
    return GaugeTransform(blocks, kind)


def apply_gauge(emb: SpectralEmbedding, t: GaugeTransform) -> SpectralEmbedding:
    slices = emb.group_slices()
    if len(slices) != len(t.blocks) or any(
        b.shape != (c.size, c.size) for b, c in zip(t.blocks, slices)
    ):
        raise ValueError("gauge transform block structure does not match the spectrum")
    if t.kind == "identity":
        return emb
    out = np.array(emb.data)
    for cols, block in zip(slices, t.blocks):
        out[:, cols] = emb.data[:, cols] @ block
    return SpectralEmbedding(out, emb.source, emb.spectrum, emb.groups)


# -- JL diagnostics --------------------------------------------------------------


def _sample_pairs(n: int, num_pairs: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    total = n * (n - 1) // 2
    if num_pairs >= total:
        i, j = np.triu_indices(n, k=1)
        return i, j
    i = rng.integers(0, n, size=num_pairs)
    j = (i + rng.integers(1, n, size=num_pairs)) % n
    return i, j


def jl_error_stats(
    exact: SpectralEmbedding,
    projected: SpectralEmbedding,
    num_pairs: int = 2000,
    seed: int = 0,
    eps: float | Sequence[float] = (0.3, 0.5),
) -> dict:
    """Normalized inner-product distortion over sampled node pairs.

    Errors are ``|<phi~_i, phi~_j> - <phi_i, phi_j>| / (|phi_i| |phi_j|)``.
    """
    if exact.num_nodes != projected.num_nodes:
        raise ValueError("embeddings have different node counts")
    rng = np.random.default_rng(seed)
    i, j = _sample_pairs(exact.num_nodes, num_pairs, rng)
    a, b = exact.data, projected.data
    true = np.einsum("ij,ij->i", a[i], a[j])
    approx = np.einsum("ij,ij->i", b[i], b[j])
    norms = np.linalg.norm(a[i], axis=1) * np.linalg.norm(a[j], axis=1)
    err = np.abs(approx - true) / np.where(norms > 0, norms, 1.0)
    eps_list = [eps] if np.isscalar(eps) else list(eps)
    return {
        "max_abs_err": float(err.max()) if err.size else 0.0,
        "mean_abs_err": float(err.mean()) if err.size else 0.0,
        "fraction_within_eps": {float(e): float(np.mean(err <= e)) for e in eps_list},
        "num_pairs": int(err.size),
    }


# -- export -----------------------------------------------------------------------


def save_embedding_csv(emb: SpectralEmbedding | np.ndarray, path: str | Path, header: dict | None = None) -> None:
    data = emb.data if isinstance(emb, SpectralEmbedding) else np.asarray(emb)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for key, val in (header or {}).items():
            fh.write(f"# {key}={val}\n")
        fh.write("node," + ",".join(f"e{c}" for c in range(data.shape[1])) + "\n")
        for i, row in enumerate(data):
            fh.write(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n")


def save_embedding_bin(emb: SpectralEmbedding | np.ndarray, path: str | Path) -> None:
    data = emb.data if isinstance(emb, SpectralEmbedding) else np.asarray(emb)
    n, r = data.shape
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<QQ", n, r))
        fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_embedding_bin(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != EMBED_MAGIC:
        raise ValueError("not a GISTEMB1 file")
    n, r = struct.unpack("<QQ", raw[8:24])
    data = np.frombuffer(raw, dtype="<f8", offset=24)
    if data.size != n * r:
        raise ValueError(f"truncated embedding file: expected {n * r} values, got {data.size}")
    return data.reshape(n, r).astype(np.float64)

