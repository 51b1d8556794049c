"""Sampled manifolds, k-NN graphs and cross-resolution experiments.

`discretization_mismatch` measures how far the projected-eigenmap kernel
``<phi~_i, phi~_j>`` at resolution n sits from the same kernel at a reference
resolution, at matched points. `transfer_experiment` trains on a coarse
sampling and evaluates on a fine one, comparing the spectral-attention model
against a baseline that adds the embeddings to the node features.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Literal, NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .block import _block, _transformer, block_weight_names
from .graph import Graph, convolution_operator, normalized_laplacian
from .spectral import (
    ProjectionSpec,
    exact_eigenmaps,
    fastrp_embed,
    project_eigenmaps,
    sample_projection,
)

__all__ = [
    "PointCloud",
    "Matching",
    "MismatchReport",
    "sample_manifold",
    "default_knn_k",
    "knn_graph",
    "match_points",
    "smooth_field",
    "r2_score",
    "projected_eigenmap_embedding",
    "discretization_mismatch",
    "TransferModel",
    "transfer_experiment",
]

ManifoldKind = Literal["sphere_s2", "torus_t2", "circle_s1"]
TORUS_MAJOR = 1.0
TORUS_MINOR = 0.4
INTRINSIC_DIM = {"sphere_s2": 2, "torus_t2": 2, "circle_s1": 1}


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    manifold: ManifoldKind
    seed: int | None = None

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def subset(self, n: int) -> "PointCloud":
        """First ``n`` points; an i.i.d. sample stays i.i.d. when truncated."""
        return PointCloud(self.points[:n], self.manifold, self.seed)


def sample_manifold(kind: ManifoldKind, n: int, seed: int = 0) -> PointCloud:
    """Uniform i.i.d. points on the unit sphere, a ring torus or the unit circle."""
    if n < 4:
        raise ValueError("need at least 4 points")
    rng = np.random.default_rng(seed)
    if kind == "sphere_s2":
        p = rng.standard_normal((n, 3))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
    elif kind == "circle_s1":
        t = rng.uniform(0.0, 2.0 * np.pi, n)
        p = np.column_stack([np.cos(t), np.sin(t)])
    elif kind == "torus_t2":
        # area element is proportional to R + r cos(theta): rejection-sample theta
        thetas = []
        while sum(len(t) for t in thetas) < n:
            th = rng.uniform(0.0, 2.0 * np.pi, 2 * n)
            keep = rng.uniform(0.0, 1.0, 2 * n) < (TORUS_MAJOR + TORUS_MINOR * np.cos(th)) / (TORUS_MAJOR + TORUS_MINOR)
            thetas.append(th[keep])
        th = np.concatenate(thetas)[:n]
        ph = rng.uniform(0.0, 2.0 * np.pi, n)
        ring = TORUS_MAJOR + TORUS_MINOR * np.cos(th)
        p = np.column_stack([ring * np.cos(ph), ring * np.sin(ph), TORUS_MINOR * np.sin(th)])
    else:
        raise ValueError(f"unknown manifold {kind!r}")
    return PointCloud(p, kind, seed)


def default_knn_k(n: int) -> int:
    return 10 if n >= 250 else math.ceil(math.log2(n))


def knn_graph(pc: PointCloud, k: int | None = None) -> Graph:
    """Union-rule symmetrized k-nearest-neighbour graph with coords attached."""
    k = default_knn_k(pc.n) if k is None else k
    if k >= pc.n:
        raise ValueError(f"k={k} must be smaller than the number of points {pc.n}")
    _, idx = cKDTree(pc.points).query(pc.points, k=k + 1)
    src = np.repeat(np.arange(pc.n), k)
    dst = idx[:, 1:].ravel()
    return Graph.from_edges(np.column_stack([src, dst]), pc.n, coords=pc.points)


class Matching(NamedTuple):
    indices: np.ndarray
    distances: np.ndarray


def match_points(coarse: PointCloud, fine: PointCloud) -> Matching:
    """Nearest fine point (Euclidean) for every coarse point."""
    if coarse.manifold != fine.manifold:
        raise ValueError(f"cannot match {coarse.manifold} against {fine.manifold}")
    dist, idx = cKDTree(fine.points).query(coarse.points, k=1)
    return Matching(idx.astype(np.int64), dist)


def smooth_field(pc: PointCloud) -> np.ndarray:
    """Fixed low-order harmonic combination of the coordinates (regression target)."""
    p = pc.points
    x, y = p[:, 0], p[:, 1]
    z = p[:, 2] if p.shape[1] > 2 else np.zeros(pc.n)
    return 0.8 * x + 0.5 * (3.0 * z**2 - 1.0) + 1.2 * x * y - 0.6 * y * z


def r2_score(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Coefficient of determination; NaN when the target has zero variance."""
    y_true = np.asarray(y_true, dtype=np.float64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.float64).ravel()
    ss_tot = np.sum((y_true - y_true.mean()) ** 2)
    if ss_tot == 0.0:
        return float("nan")
    return float(1.0 - np.sum((y_true - y_pred) ** 2) / ss_tot)


def projected_eigenmap_embedding(g: Graph, r: int, seed: int, cap: int | None = None) -> np.ndarray:
    """Exact eigenmaps of ``g`` pushed through an r x K very sparse projection."""
    emb = exact_eigenmaps(normalized_laplacian(g, cap=cap), cap=cap)
    proj = sample_projection(ProjectionSpec(emb.dim, r, seed=seed))
    return project_eigenmaps(emb, proj).data


def _projection_seed(seed: int, n: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(n)]).generate_state(1)[0])


# -- discretization mismatch -----------------------------------------------------------


@dataclass
class MismatchReport:
    """Per-resolution kernel mismatch against the reference resolution.

    ``per_n[method][i]`` holds mean/max/std of the mismatch at ``ns[i]``, each
    the median over seeds; ``slope[method]`` is the least-squares log-log slope
    of the median mean mismatch against n.
    """

    manifold: str
    ns: list[int]
    ref_n: int
    seeds: list[int]
    r: int
    k_fastrp: int
    per_n: dict[str, list[dict]] = field(default_factory=dict)
    per_seed_mean: dict[str, list[list[float]]] = field(default_factory=dict)
    slope: dict[str, float] = field(default_factory=dict)
    theoretical_slope: float = float("nan")

    def strictly_decreasing(self, method: str = "exact_projected") -> bool:
        means = [row["mean"] for row in self.per_n[method]]
        return all(b < a for a, b in zip(means, means[1:]))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        lines = ["method,n,mean,max,std"]
        for method, rows in self.per_n.items():
            for n, row in zip(self.ns, rows):
                lines.append(f"{method},{n},{row['mean']!r},{row['max']!r},{row['std']!r}")
        return "\n".join(lines) + "\n"


def _kernel(emb: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", emb[i], emb[j])


def discretization_mismatch(
    kind: ManifoldKind = "sphere_s2",
    ns: Sequence[int] = (250, 500, 1000, 2000),
    ref_n: int | None = 4000,
    r: int = 256,
    k_fastrp: int = 8,
    num_pairs: int = 4000,
    seeds: Sequence[int] = tuple(range(5)),
    knn_k: int | None = None,
    methods: Sequence[str] = ("exact", "exact_projected", "fastrp"),
    cap: int | None = None,
) -> MismatchReport:
    """Kernel mismatch between each resolution in ``ns`` and the reference.

    Methods: ``exact`` uses the eigenmaps themselves, ``exact_projected``
    pushes them through an r x K very sparse projection, ``fastrp`` uses the
    FastRP embedding. The projected kernel carries a JL error of order
    ``|phi_i| |phi_j| / sqrt(r)`` that does not shrink with n.

    Coarse clouds are prefixes of the reference cloud, so every coarse point
    has an exact counterpart (``match_points`` returns distance zero). Each
    resolution draws its own projection. The exact paths run dense
    eigendecompositions up to ``ref_n`` nodes, so ``cap`` defaults to
    ``ref_n`` here rather than to the global oracle cap.
    """
    ns = [int(n) for n in ns]
    if ns != sorted(ns):
        raise ValueError("ns must be ascending")
    ref_n = ns[-1] if ref_n is None else int(ref_n)
    if ns[-1] > ref_n:
        raise ValueError("reference resolution must be the largest")
    cap = ref_n if cap is None else cap
    report = MismatchReport(
        kind, ns, ref_n, [int(s) for s in seeds], r, k_fastrp,
        theoretical_slope=-1.0 / (INTRINSIC_DIM[kind] + 4),
    )
    raw: dict[str, list[list[dict]]] = {m: [] for m in methods}
    for seed in seeds:
        ref = sample_manifold(kind, ref_n, seed)
        embeds: dict[tuple[str, int], np.ndarray] = {}
        for n in sorted(set(ns) | {ref_n}):
            pc = ref.subset(n)
            g = knn_graph(pc, knn_k)
            pseed = _projection_seed(seed, n)
            exact = None
            if {"exact", "exact_projected"} & set(methods):
                exact = exact_eigenmaps(normalized_laplacian(g, cap=cap), cap=cap)
            for method in methods:
                if method == "exact":
                    embeds[method, n] = exact.data
                elif method == "exact_projected":
                    proj = sample_projection(ProjectionSpec(exact.dim, r, seed=pseed))
                    embeds[method, n] = project_eigenmaps(exact, proj).data
                elif method == "fastrp":
                    embeds[method, n] = fastrp_embed(g, r, k_fastrp, seed=pseed).data
                else:
                    raise ValueError(f"unknown method {method!r}")
        rng = np.random.default_rng([int(seed), 7])
        for method in methods:
            rows = []
            ref_emb = embeds[method, ref_n]
            for n in ns:
                coarse = ref.subset(n)
                match = match_points(coarse, ref).indices
                i = rng.integers(0, n, size=num_pairs)
                j = (i + rng.integers(1, n, size=num_pairs)) % n
                diff = np.abs(_kernel(embeds[method, n], i, j) - _kernel(ref_emb, match[i], match[j]))
                rows.append({"mean": float(diff.mean()), "max": float(diff.max()), "std": float(diff.std())})
            raw[method].append(rows)
    for method in methods:
        per_seed = raw[method]
        report.per_seed_mean[method] = [[row["mean"] for row in rows] for rows in per_seed]
        report.per_n[method] = [
            {stat: float(np.median([rows[t][stat] for rows in per_seed])) for stat in ("mean", "max", "std")}
            for t in range(len(ns))
        ]
        means = np.array([row["mean"] for row in report.per_n[method]])
        if len(ns) > 1 and np.all(means > 0):
            report.slope[method] = float(np.polyfit(np.log(ns), np.log(means), 1)[0])
        else:
            report.slope[method] = float("nan")
    return report


# -- transfer experiment ---------------------------------------------------------------


@dataclass
class TransferModel:
    """Two regression models with matched layer counts.

    ``gauge_invariant``: lift, one multi-scale block, one linear transformer
    layer, linear head. The embeddings only ever enter as attention queries
    and keys (or as attention values for the next embedding).

    ``gauge_broken``: lift of ``x`` plus a learned map of the embeddings added
    to the features, two linear transformer layers, linear head.
    """

    variant: Literal["gauge_invariant", "gauge_broken"]
    input_dim: int
    embed_dim: int
    hidden_dim: int = 16
    feature_map: str = "relu"
    eps: float = 1e-6

    def init_weights(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        d = self.hidden_dim
        shapes: dict[str, tuple[int, int]] = {"in.w": (self.input_dim, d)}
        if self.variant == "gauge_invariant":
            for name in block_weight_names("b0"):
                shapes[name] = (d, 3 * d) if name.endswith(".merge") else (d, d)
        else:
            shapes["pe.w"] = (self.embed_dim, d)
            shapes.update({f"t0.{k}": (d, d) for k in ("wq", "wk", "wv", "ffn1", "ffn2")})
        shapes.update({f"t1.{k}": (d, d) for k in ("wq", "wk", "wv", "ffn1", "ffn2")})
        shapes["head.w"] = (d, 1)
        shapes["head.b"] = (1, 1)
        w = {}
        for name, shape in shapes.items():
            if name.endswith(".merge"):
                w[name] = np.hstack([np.eye(d)] * 3) / 3.0
            elif name == "head.b":
                w[name] = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(shape[0])
                w[name] = rng.uniform(-bound, bound, size=shape)
        return w

    def forward(self, weights, data):
        x, phi = ad.Var(data["x"]), ad.Var(data["phi"])
        fm, eps = self.feature_map, self.eps
        if self.variant == "gauge_invariant":
            h = x @ weights["in.w"]
            h, _ = _block(data["conv"], h, phi, weights, "b0", fm, eps, (True, True, True), False)
        else:
            h = x @ weights["in.w"] + phi @ weights["pe.w"]
            h = _transformer(h, weights, "t0", fm, eps)
        h = _transformer(h, weights, "t1", fm, eps)
        return h @ weights["head.w"] + weights["head.b"]

    def loss(self, weights, data):
        return ad.mse_loss(self.forward(weights, data), data["y"])

    def predict(self, weights, data) -> np.ndarray:
        return self.forward(weights, data).value.ravel()


def _transfer_inputs(pc: PointCloud, r: int, seed: int, embedding: str, k_fastrp: int, cap: int | None) -> dict:
    g = knn_graph(pc)
    pseed = _projection_seed(seed, pc.n)
    if embedding == "exact_projected":
        phi = projected_eigenmap_embedding(g, r, pseed, cap=cap)
    elif embedding == "fastrp":
        phi = fastrp_embed(g, r, k_fastrp, seed=pseed).data
    else:
        raise ValueError(f"unknown embedding {embedding!r}")
    return {"x": pc.points.copy(), "phi": phi, "y": smooth_field(pc)[:, None], "conv": convolution_operator(g)}


def transfer_experiment(
    kind: ManifoldKind = "sphere_s2",
    n_train: int = 500,
    n_test: int = 2000,
    seeds: Sequence[int] = tuple(range(10)),
    r: int = 64,
    hidden_dim: int = 16,
    epochs: int = 300,
    lr: float = 1e-2,
    embedding: str = "exact_projected",
    k_fastrp: int = 8,
    target: str = "smooth",
    cap: int | None = None,
) -> list[dict]:
    """Train both models on the coarse sampling, evaluate on the fine one.

    The coarse cloud is the first ``n_train`` points of the fine cloud. Each
    resolution gets its own projection, as an independent discretization
    would. ``target="constant"`` gives a zero-variance field (R^2 is NaN).
    Returns one dict per seed with train/test R^2 for both variants.
    """
    if n_train > n_test:
        raise ValueError("n_train must not exceed n_test")
    rows = []
    for seed in seeds:
        fine = sample_manifold(kind, n_test, seed)
        coarse = fine.subset(n_train)
        tr = _transfer_inputs(coarse, r, seed, embedding, k_fastrp, cap)
        te = _transfer_inputs(fine, r, seed, embedding, k_fastrp, cap)
        if target == "constant":
            tr["y"] = np.ones_like(tr["y"])
            te["y"] = np.ones_like(te["y"])
        row: dict = {"seed": int(seed)}
        for variant in ("gauge_invariant", "gauge_broken"):
            model = TransferModel(variant, tr["x"].shape[1], r, hidden_dim)
            w, _ = ad.train(model, tr, "adam", epochs, int(seed), lr)
            train_r2 = r2_score(tr["y"], model.predict(w, tr))
            test_r2 = r2_score(te["y"], model.predict(w, te))
            row[f"{variant}_train_r2"] = train_r2
            row[f"{variant}_test_r2"] = test_r2
            row[f"{variant}_drop"] = train_r2 - test_r2
        rows.append(row)
    return rows
