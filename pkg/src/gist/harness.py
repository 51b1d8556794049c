"""Hyperparameter sweeps and the forward-pass scaling benchmark."""

from __future__ import annotations

import gc
import resource
import time
from dataclasses import replace
from typing import Literal, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, gauge_invariant_attention
from .block import BlockParams, GISTModel, ModelConfig, _forward, _initial_phi, init_weights, model_forward, multi_scale_block
from .datasets import community_task
from .graph import Graph, bounded_degree_graph, convolution_operator, normalized_laplacian
from .spectral import (
    ProjectionSpec,
    apply_gauge,
    exact_eigenmaps,
    gram,
    jl_error_stats,
    jl_target_dim,
    project_eigenmaps,
    sample_gauge_transform,
    sample_projection,
)

__all__ = [
    "gauge_trial",
    "jl_trial",
    "train_and_score",
    "run_sweep",
    "run_bench",
    "loglog_slope",
    "rows_to_csv",
]


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


def gauge_trial(
    g: Graph,
    kind: str,
    seed: int,
    feature_map: str = "relu",
    hidden_dim: int = 8,
    gi_feature_map: str | None = None,
) -> dict:
    """Max-abs change of attention and block outputs under one sampled gauge.

    Uses exact eigenmaps of ``g``, random features and random weights (all
    from ``seed``). ``gi_feature_map`` (default ``feature_map``) is the map of
    the gauge-invariant attention, the only layer that reads the embeddings
    through a kernel. ``phi_gram_dev`` tracks the block's equivariant output
    through its Gram matrix, which the gauge should leave unchanged.
    """
    gi_fm = gi_feature_map or feature_map
    emb = exact_eigenmaps(normalized_laplacian(g))
    moved = apply_gauge(emb, sample_gauge_transform(emb, kind, seed))
    rng = np.random.default_rng([seed, 1])
    x = rng.standard_normal((g.num_nodes, hidden_dim))
    attn = AttentionParams(w_v=rng.standard_normal((hidden_dim, hidden_dim)), feature_map=gi_fm)
    a0 = gauge_invariant_attention(emb, x, attn).data
    a1 = gauge_invariant_attention(moved, x, attn).data
    cfg = ModelConfig(num_blocks=1, hidden_dim=hidden_dim, input_dim=hidden_dim, feature_map=feature_map)
    params = BlockParams.from_weights(init_weights(cfg, rng), "b0", feature_map=feature_map, gi_feature_map=gi_fm)
    x0, p0 = multi_scale_block(g, x, emb, params)
    x1, p1 = multi_scale_block(g, x, moved, params)
    return {
        "kind": kind,
        "input_gram_dev": float(np.abs(gram(emb) - gram(moved)).max()),
        "attention_dev": float(np.abs(a0 - a1).max()),
        "block_dev": float(np.abs(x0 - x1).max()),
        "phi_gram_dev": float(np.abs(gram(p0) - gram(p1)).max()),
    }


def jl_trial(g: Graph, eps: float, seed: int, num_pairs: int = 2000) -> dict:
    """Project exact eigenmaps to ``r = ceil(8 ln N / eps^2)`` and measure distortion."""
    emb = exact_eigenmaps(normalized_laplacian(g))
    r = jl_target_dim(g.num_nodes, eps)
    proj = sample_projection(ProjectionSpec(emb.dim, r, seed=seed))
    stats = jl_error_stats(emb, project_eigenmaps(emb, proj), num_pairs, seed, eps)
    return {"r": r, "eps": eps, "fraction_within_eps": stats["fraction_within_eps"][float(eps)],
            "max_abs_err": stats["max_abs_err"], "num_pairs": stats["num_pairs"]}


def train_and_score(task, cfg: ModelConfig, epochs: int = 150, lr: float = 1e-2) -> float:
    """Train on ``task.train_idx`` and return test accuracy."""
    g = task.graph
    phi = _initial_phi(g, cfg, None)
    conv = convolution_operator(g)
    data = {"graph": g, "x": task.x, "phi": phi, "y": task.labels, "idx": task.train_idx, "conv": conv}
    w, _ = ad.train(GISTModel(cfg), data, "adam", epochs, cfg.seed, lr)
    logits = _forward(g, ad.Var(task.x), ad.Var(phi), w, cfg, conv).value
    idx = task.test_idx
    return float(np.mean(np.argmax(logits[idx], axis=1) == task.labels[idx]))


def run_sweep(
    param: Literal["r", "k"],
    values: Sequence[int],
    seeds: Sequence[int] = tuple(range(5)),
    task_kwargs: Mapping | None = None,
    base: ModelConfig | None = None,
    epochs: int = 150,
    lr: float = 1e-2,
) -> list[dict]:
    """Mean/std test accuracy of the toy model for each value of ``r`` or ``k``.

    Each seed fixes one dataset, one FastRP projection and one weight
    initialization, shared by every swept value.
    """
    if param not in ("r", "k"):
        raise ValueError("param must be 'r' or 'k'")
    task_kwargs = dict(task_kwargs or {})
    rows = []
    for value in values:
        scores = []
        for seed in seeds:
            task = community_task(seed=int(seed), **task_kwargs)
            cfg = base or ModelConfig()
            cfg = replace(
                cfg,
                input_dim=task.x.shape[1],
                output_dim=task.num_classes,
                task="node_classification",
                seed=int(seed),
                **({"embed_dim": int(value)} if param == "r" else {"fastrp_k": int(value)}),
            )
            scores.append(train_and_score(task, cfg, epochs, lr))
        rows.append({"value": int(value), "mean": float(np.mean(scores)), "std": float(np.std(scores)), "scores": scores})
    return rows


def _peak_rss_mb() -> float:
    # ru_maxrss is in kilobytes on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def run_bench(
    ns: Sequence[int] = tuple(2**p for p in range(12, 18)),
    ds: Sequence[int] = (64,),
    r: int = 64,
    k: int = 8,
    degree: int = 8,
    num_blocks: int = 1,
    repeats: int = 3,
    seed: int = 0,
) -> list[dict]:
    """Forward wall time (FastRP plus blocks plus head) against N and d.

    Graphs are ring lattices with random chords, so |E| = O(N). Reports the
    median over ``repeats`` runs and the process peak RSS after the runs.
    """
    rows = []
    for d in ds:
        cfg = ModelConfig(num_blocks=num_blocks, hidden_dim=d, embed_dim=r, fastrp_k=k,
                          input_dim=d, output_dim=1, task="node_regression", seed=seed)
        weights = init_weights(cfg, seed)
        for n in ns:
            rng = np.random.default_rng([seed, n])
            g = bounded_degree_graph(n, degree, rng)
            x = rng.standard_normal((n, d))
            times = []
            for _ in range(repeats):
                gc.collect()
                t0 = time.perf_counter()
                model_forward(g, x, cfg, weights)
                times.append(time.perf_counter() - t0)
            t = float(np.median(times))
            rows.append({"n": int(n), "d": int(d), "time_s": t, "time_per_node_us": 1e6 * t / n,
                         "peak_rss_mb": _peak_rss_mb()})
    return rows


def rows_to_csv(rows: Sequence[Mapping], columns: Sequence[str], header: Mapping | None = None) -> str:
    lines = [f"# {k}={v}" for k, v in (header or {}).items()]
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in columns))
    return "\n".join(lines) + "\n"
