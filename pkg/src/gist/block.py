"""The multi-scale spectral transformer block and the stacked model.

The forward pass is written once, over `autodiff.Var`, and serves both
inference (plain arrays, nothing recorded) and training (parameters on a
tape). Weights live in a flat ``name -> array`` dict whose insertion order is
the declaration order used by the binary weight container.

Block layout, for features ``x`` and positional embeddings ``phi``::

    feature branch   T_f(x)
    local branch     T_l(conv(x))
    global branch    h = x + GI(phi, x);  phi' = GE(h, phi);  T_g(h)
    x' = x + [T_f | T_l | T_g] @ merge^T

where ``T`` is a linear-attention transformer layer with a two-layer ReLU
feed-forward, GI/GE are the gauge-invariant/equivariant attentions and
disabled branches contribute zeros.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Literal, Mapping, Sequence

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .attention import FEATURE_MAPS, AttentionParams
from .graph import Graph, convolution_operator
from .spectral import SpectralEmbedding, fastrp_embed

__all__ = [
    "TransformerParams",
    "BlockParams",
    "ModelConfig",
    "GISTModel",
    "BRANCHES",
    "init_weights",
    "block_weight_names",
    "multi_scale_block",
    "model_forward",
    "save_weights",
    "load_weights",
    "run_ablation",
    "write_ablation_csv",
]

MODEL_MAGIC = b"GISTMDL1"
BRANCHES = ("feature", "local", "global")
_TRANSFORMER_KEYS = ("wq", "wk", "wv", "ffn1", "ffn2")


@dataclass(frozen=True, eq=False)
class TransformerParams:
    """A linear-attention layer followed by a two-layer ReLU feed-forward."""

    attn: AttentionParams
    ffn_in: np.ndarray
    ffn_out: np.ndarray


@dataclass(frozen=True, eq=False)
class BlockParams:
    feature_branch: TransformerParams
    local_branch: TransformerParams
    gi: AttentionParams
    ge: AttentionParams
    post: TransformerParams
    merge: np.ndarray
    enabled_branches: tuple[bool, bool, bool] = (True, True, True)
    phi_residual: bool = False

    def __post_init__(self) -> None:
        if not any(self.enabled_branches):
            raise ValueError("at least one branch must be enabled")
        if not np.all(np.isfinite(self.merge)):
            raise ValueError("merge matrix must be finite")
        # the gauge-invariant attention may use its own map; the rest share one
        maps = {p.feature_map for p in (self.feature_branch.attn, self.local_branch.attn, self.ge, self.post.attn)}
        if len(maps) != 1:
            raise ValueError("all attention layers except the gauge-invariant one must share one feature map")

    @property
    def feature_map(self) -> str:
        return self.ge.feature_map

    @property
    def gi_feature_map(self) -> str:
        return self.gi.feature_map

    @property
    def eps(self) -> float:
        return self.gi.eps

    def to_weights(self, prefix: str = "b0") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for tag, tp in (("feat", self.feature_branch), ("local", self.local_branch)):
            out.update(_transformer_to_weights(tp, f"{prefix}.{tag}"))
        out[f"{prefix}.gi.wv"] = self.gi.w_v
        out[f"{prefix}.ge.wq"] = self.ge.w_q
        out[f"{prefix}.ge.wk"] = self.ge.w_k
        out.update(_transformer_to_weights(self.post, f"{prefix}.post"))
        out[f"{prefix}.merge"] = self.merge
        return out

    @classmethod
    def from_weights(
        cls,
        w: Mapping[str, np.ndarray],
        prefix: str = "b0",
        feature_map: str = "relu",
        eps: float = 1e-6,
        enabled_branches: tuple[bool, bool, bool] = (True, True, True),
        phi_residual: bool = False,
        gi_feature_map: str | None = None,
    ) -> "BlockParams":
        def tp(tag: str) -> TransformerParams:
            p = f"{prefix}.{tag}"
            attn = AttentionParams(w[f"{p}.wq"], w[f"{p}.wk"], w[f"{p}.wv"], feature_map, eps)
            return TransformerParams(attn, w[f"{p}.ffn1"], w[f"{p}.ffn2"])

        return cls(
            feature_branch=tp("feat"),
            local_branch=tp("local"),
            gi=AttentionParams(w_v=w[f"{prefix}.gi.wv"], feature_map=gi_feature_map or feature_map, eps=eps),
            ge=AttentionParams(w_q=w[f"{prefix}.ge.wq"], w_k=w[f"{prefix}.ge.wk"], feature_map=feature_map, eps=eps),
            post=tp("post"),
            merge=np.asarray(w[f"{prefix}.merge"], dtype=np.float64),
            enabled_branches=tuple(enabled_branches),
            phi_residual=phi_residual,
        )


def _transformer_to_weights(tp: TransformerParams, prefix: str) -> dict[str, np.ndarray]:
    a = tp.attn
    return {
        f"{prefix}.wq": a.w_q,
        f"{prefix}.wk": a.w_k,
        f"{prefix}.wv": a.w_v,
        f"{prefix}.ffn1": np.asarray(tp.ffn_in, dtype=np.float64),
        f"{prefix}.ffn2": np.asarray(tp.ffn_out, dtype=np.float64),
    }


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 2
    hidden_dim: int = 16
    embed_dim: int = 32
    fastrp_k: int = 8
    input_dim: int = 1
    output_dim: int = 1
    task: Literal["node_classification", "node_regression"] = "node_classification"
    seed: int = 0
    feature_map: str = "relu"
    eps: float = 1e-6
    enabled_branches: tuple[bool, bool, bool] = (True, True, True)
    phi_residual: bool = False
    gi_feature_map: str | None = None

    def __post_init__(self) -> None:
        for name in ("hidden_dim", "embed_dim", "fastrp_k", "input_dim", "output_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_blocks < 0:
            raise ValueError("num_blocks must be >= 0")
        if self.task not in ("node_classification", "node_regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if not any(self.enabled_branches):
            raise ValueError("at least one branch must be enabled")
        for fm in (self.feature_map, self.gi_feature_map):
            if fm is not None and fm not in FEATURE_MAPS:
                raise ValueError(f"unknown feature map {fm!r}")
        object.__setattr__(self, "enabled_branches", tuple(bool(b) for b in self.enabled_branches))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        d["enabled_branches"] = tuple(d["enabled_branches"])
        return cls(**d)


# -- weights -----------------------------------------------------------------------


def block_weight_names(prefix: str) -> list[str]:
    names = []
    for tag in ("feat", "local"):
        names += [f"{prefix}.{tag}.{k}" for k in _TRANSFORMER_KEYS]
    names += [f"{prefix}.gi.wv", f"{prefix}.ge.wq", f"{prefix}.ge.wk"]
    names += [f"{prefix}.post.{k}" for k in _TRANSFORMER_KEYS]
    names.append(f"{prefix}.merge")
    return names


def _weight_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    d = cfg.hidden_dim
    shapes: dict[str, tuple[int, int]] = {}
    if cfg.num_blocks:
        shapes["in.w"] = (cfg.input_dim, d)
    for b in range(cfg.num_blocks):
        for name in block_weight_names(f"b{b}"):
            shapes[name] = (d, 3 * d) if name.endswith(".merge") else (d, d)
    head_in = d if cfg.num_blocks else cfg.input_dim
    shapes["head.w"] = (head_in, cfg.output_dim)
    shapes["head.b"] = (1, cfg.output_dim)
    return shapes


def init_weights(cfg: ModelConfig, rng: np.random.Generator | int | None = None) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) projections, merge = [I I I] / 3."""
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    weights = {}
    for name, shape in _weight_shapes(cfg).items():
        if name.endswith(".merge"):
            eye = np.eye(cfg.hidden_dim)
            weights[name] = np.hstack([eye, eye, eye]) / 3.0
        elif name == "head.b":
            weights[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            weights[name] = rng.uniform(-bound, bound, size=shape)
    return weights


def save_weights(path: str | Path, cfg: ModelConfig, weights: Mapping[str, np.ndarray]) -> None:
    """Binary container: magic, u64 header length, JSON config, f64 tensors in order."""
    shapes = _weight_shapes(cfg)
    header = cfg.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name, shape in shapes.items():
            w = np.asarray(weights[name], dtype="<f8")
            if w.shape != shape:
                raise ValueError(f"{name} has shape {w.shape}, expected {shape}")
            fh.write(np.ascontiguousarray(w).tobytes())


def load_weights(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MODEL_MAGIC:
        raise ValueError("not a GISTMDL1 file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    cfg = ModelConfig.from_json(raw[16 : 16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    weights = {}
    for name, shape in _weight_shapes(cfg).items():
        count = shape[0] * shape[1]
        weights[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError("trailing bytes in weight file")
    return cfg, weights


# -- forward -------------------------------------------------------------------------


def _transformer(h, w, prefix: str, fm: str, eps: float):
    attn = ad.linear_attention(h @ w[f"{prefix}.wq"], h @ w[f"{prefix}.wk"], h @ w[f"{prefix}.wv"], fm, eps)
    a = h + attn
    return a + ad.relu(a @ w[f"{prefix}.ffn1"]) @ w[f"{prefix}.ffn2"]


def _block(conv: sparse.spmatrix, x, phi, w, prefix: str, fm: str, eps: float,
           enabled: Sequence[bool], phi_residual: bool, gi_fm: str | None = None):
    n, d = x.shape
    zeros = np.zeros((n, d))
    outs = []
    outs.append(_transformer(x, w, f"{prefix}.feat", fm, eps) if enabled[0] else zeros)
    outs.append(_transformer(ad.spmm(conv, x), w, f"{prefix}.local", fm, eps) if enabled[1] else zeros)
    if enabled[2]:
        h = x + ad.linear_attention(phi, phi, x @ w[f"{prefix}.gi.wv"], gi_fm or fm, eps)
        new_phi = ad.linear_attention(h @ w[f"{prefix}.ge.wq"], h @ w[f"{prefix}.ge.wk"], phi, fm, eps)
        if phi_residual:
            new_phi = phi + new_phi
        outs.append(_transformer(h, w, f"{prefix}.post", fm, eps))
    else:
        new_phi = phi
        outs.append(zeros)
    merged = ad.concat(outs, axis=1) @ ad.transpose(w[f"{prefix}.merge"])
    return x + merged, new_phi


def multi_scale_block(
    g: Graph, x: np.ndarray, phi: SpectralEmbedding | np.ndarray, p: BlockParams
) -> tuple[np.ndarray, SpectralEmbedding]:
    """One block on plain arrays; returns updated features and embeddings."""
    x = np.asarray(x, dtype=np.float64)
    phi_arr = phi.data if isinstance(phi, SpectralEmbedding) else np.asarray(phi, dtype=np.float64)
    if x.shape[0] != g.num_nodes or phi_arr.shape[0] != g.num_nodes:
        raise ValueError("features, embeddings and graph disagree on the node count")
    if p.merge.shape != (x.shape[1], 3 * x.shape[1]):
        raise ValueError(f"merge must have shape ({x.shape[1]}, {3 * x.shape[1]})")
    w = p.to_weights("b0")
    new_x, new_phi = _block(
        convolution_operator(g), ad.Var(x), ad.Var(phi_arr), w, "b0",
        p.feature_map, p.eps, p.enabled_branches, p.phi_residual, p.gi_feature_map,
    )
    source = phi.source if isinstance(phi, SpectralEmbedding) else "fastrp"
    return new_x.value, SpectralEmbedding(new_phi.value, source)


def _forward(g: Graph, x, phi, w, cfg: ModelConfig, conv: sparse.spmatrix | None = None):
    if cfg.num_blocks == 0:
        h = x
    else:
        conv = convolution_operator(g) if conv is None else conv
        h = x @ w["in.w"]
        for b in range(cfg.num_blocks):
            h, phi = _block(conv, h, phi, w, f"b{b}", cfg.feature_map, cfg.eps,
                            cfg.enabled_branches, cfg.phi_residual, cfg.gi_feature_map)
    return h @ w["head.w"] + w["head.b"]


def _initial_phi(g: Graph, cfg: ModelConfig, phi) -> np.ndarray:
    if phi is None:
        return fastrp_embed(g, cfg.embed_dim, cfg.fastrp_k, seed=cfg.seed).data
    return phi.data if isinstance(phi, SpectralEmbedding) else np.asarray(phi, dtype=np.float64)


def model_forward(
    g: Graph,
    x: np.ndarray,
    cfg: ModelConfig,
    weights: Mapping[str, np.ndarray],
    phi: SpectralEmbedding | np.ndarray | None = None,
) -> np.ndarray:
    """Predictions (logits or regression outputs), one row per node.

    The initial embedding is FastRP with ``cfg.embed_dim``, ``cfg.fastrp_k`` and
    ``cfg.seed`` unless ``phi`` is given.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (g.num_nodes, cfg.input_dim):
        raise ValueError(f"features have shape {x.shape}, expected ({g.num_nodes}, {cfg.input_dim})")
    phi0 = _initial_phi(g, cfg, phi)
    return _forward(g, ad.Var(x), ad.Var(phi0), weights, cfg).value


@dataclass
class GISTModel:
    """Trainable wrapper around `model_forward` for `autodiff.train`.

    ``data`` is a dict with ``graph``, ``x``, ``phi``, ``y`` and optionally
    ``idx`` (rows that enter the loss) and ``conv`` (cached operator).
    """

    cfg: ModelConfig

    def init_weights(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return init_weights(self.cfg, rng)

    def forward(self, weights, data):
        return _forward(data["graph"], ad.Var(data["x"]), ad.Var(data["phi"]), weights, self.cfg, data.get("conv"))

    def loss(self, weights, data):
        out = self.forward(weights, data)
        if self.cfg.task == "node_classification":
            return ad.cross_entropy(out, data["y"], data.get("idx"))
        return ad.mse_loss(out, data["y"], data.get("idx"))


# -- ablation ------------------------------------------------------------------------


def _accuracy(logits: np.ndarray, labels: np.ndarray, idx: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits[idx], axis=1) == labels[idx]))


def run_ablation(
    g: Graph,
    x: np.ndarray,
    labels: np.ndarray,
    cfg: ModelConfig,
    train_idx: np.ndarray,
    test_idx: np.ndarray,
    seeds: Sequence[int] = tuple(range(10)),
    epochs: int = 150,
    lr: float = 1e-2,
) -> list[dict]:
    """Train the full model and each single-branch-removed variant.

    Every variant sees the same seeds, embeddings, initial weights and
    hyperparameters. Returns four rows: ``none`` then one per removed branch,
    with mean/std test accuracy and the change relative to the full model in
    percent.
    """
    variants = [("none", (True, True, True))]
    for i, name in enumerate(BRANCHES):
        mask = [True, True, True]
        mask[i] = False
        variants.append((f"branch{i + 1}_{name}", tuple(mask)))
    conv = convolution_operator(g)
    scores: dict[str, list[float]] = {name: [] for name, _ in variants}
    for seed in seeds:
        base = replace(cfg, seed=int(seed), task="node_classification")
        phi = _initial_phi(g, base, None)
        w0 = init_weights(base, np.random.default_rng(seed))
        data = {"graph": g, "x": x, "phi": phi, "y": labels, "idx": train_idx, "conv": conv}
        for name, mask in variants:
            vcfg = replace(base, enabled_branches=mask)
            w, _ = ad.train(GISTModel(vcfg), data, "adam", epochs, int(seed), lr, weights=dict(w0))
            logits = _forward(g, ad.Var(x), ad.Var(phi), w, vcfg, conv).value
            scores[name].append(_accuracy(logits, labels, test_idx))
    full = float(np.mean(scores["none"]))
    rows = []
    for name, _ in variants:
        acc = float(np.mean(scores[name]))
        rows.append({
            "ablation": name,
            "accuracy": acc,
            "accuracy_std": float(np.std(scores[name])),
            "delta": 0.0 if name == "none" else 100.0 * (acc - full) / full,
            "per_seed": scores[name],
        })
    return rows


def write_ablation_csv(rows: Sequence[dict], path: str | Path | None = None, header: Mapping | None = None) -> str:
    buf = io.StringIO()
    for key, val in (header or {}).items():
        buf.write(f"# {key}={val}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ablation", "accuracy", "accuracy_std", "delta"])
    for r in rows:
        w.writerow([r["ablation"], f"{r['accuracy']:.6f}", f"{r['accuracy_std']:.6f}", f"{r['delta']:.4f}"])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
