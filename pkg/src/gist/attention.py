"""Linear attention and the two spectral self-attention variants.

`linear_attention` never forms an N x N matrix. The ``*_oracle`` functions do,
and exist only to check the linear-time path on small inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from .graph import _check_cap
from .spectral import SpectralEmbedding

__all__ = [
    "AttentionParams",
    "AttentionOutput",
    "FEATURE_MAPS",
    "feature_map",
    "softmax_attention_oracle",
    "kernel_attention_oracle",
    "linear_attention",
    "gauge_invariant_attention",
    "gauge_equivariant_attention",
    "attention_logits",
]

FeatureMapName = Literal["relu", "elu_plus_one", "identity"]


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _elu_plus_one(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))


# "identity" keeps the raw inner product as the kernel. It is the only map for
# which the attention weights are an exact function of the Gram matrix.
FEATURE_MAPS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "relu": _relu,
    "elu_plus_one": _elu_plus_one,
    "identity": lambda x: x,
}


def feature_map(name: str) -> Callable[[np.ndarray], np.ndarray]:
    try:
        return FEATURE_MAPS[name]
    except KeyError:
        raise ValueError(f"unknown feature map {name!r}; choose from {sorted(FEATURE_MAPS)}") from None


@dataclass(frozen=True, eq=False)
class AttentionParams:
    """Projection weights for one attention layer.

    Unused matrices (W_Q/W_K in the invariant variant, W_V in the equivariant
    one) may be left as ``None``.
    """

    w_q: np.ndarray | None = None
    w_k: np.ndarray | None = None
    w_v: np.ndarray | None = None
    feature_map: FeatureMapName = "relu"
    eps: float = 1e-6

    def __post_init__(self) -> None:
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        feature_map(self.feature_map)
        for name in ("w_q", "w_k", "w_v"):
            w = getattr(self, name)
            if w is not None:
                w = np.asarray(w, dtype=np.float64)
                if w.ndim != 2 or not np.all(np.isfinite(w)):
                    raise ValueError(f"{name} must be a finite 2-D matrix")
                object.__setattr__(self, name, w)


@dataclass(frozen=True, eq=False)
class AttentionOutput:
    data: np.ndarray
    applied_to: Literal["features", "positional_embeddings"]


def softmax_attention_oracle(q: np.ndarray, k: np.ndarray, v: np.ndarray, cap: int | None = None) -> np.ndarray:
    """Scaled dot-product softmax attention with the full N x N weight matrix."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    _check_cap(q.shape[0], cap)
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ValueError("inconsistent Q/K/V shapes")
    logits = q @ k.T / np.sqrt(q.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w @ v


def kernel_attention_oracle(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    feature_map: FeatureMapName = "relu",
    eps: float = 1e-6,
    cap: int | None = None,
) -> np.ndarray:
    """Quadratic evaluation of the normalized kernel attention, row by row."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    _check_cap(q.shape[0], cap)
    fm = FEATURE_MAPS[feature_map]
    fq, fk = fm(q), fm(k)
    out = np.empty((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        w = np.array([fq[i] @ fk[j] for j in range(k.shape[0])])
        out[i] = (w @ v) / (w.sum() + eps)
    return out


def linear_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    feature_map: FeatureMapName = "relu",
    eps: float = 1e-6,
) -> np.ndarray:
    """``(phi(Q) (phi(K)^T V)) / (phi(Q) phi(K)^T 1 + eps)`` in O(N p d)."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    if q.ndim != 2 or k.shape != q.shape or v.ndim != 2 or v.shape[0] != k.shape[0]:
        raise ValueError(f"inconsistent shapes Q{q.shape} K{k.shape} V{v.shape}")
    fm = FEATURE_MAPS[feature_map]
    fq, fk = fm(q), fm(k)
    s = fk.T @ v
    z = 1.0 / (fq @ fk.sum(axis=0) + eps)
    return (fq @ s) * z[:, None]


def _check_rows(phi: SpectralEmbedding | np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    phi = phi.data if isinstance(phi, SpectralEmbedding) else np.asarray(phi, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if phi.shape[0] != x.shape[0]:
        raise ValueError(f"embedding has {phi.shape[0]} rows, features have {x.shape[0]}")
    return phi, x


def gauge_invariant_attention(
    phi: SpectralEmbedding | np.ndarray, x: np.ndarray, params: AttentionParams
) -> AttentionOutput:
    """Queries and keys are the positional embeddings; values are ``x W_V``.

    The result is an update for the features; callers add it to ``x``.
    """
    phi, x = _check_rows(phi, x)
    w_v = np.eye(x.shape[1]) if params.w_v is None else params.w_v
    if w_v.shape[0] != x.shape[1]:
        raise ValueError(f"W_V has {w_v.shape[0]} rows, features have {x.shape[1]} columns")
    out = linear_attention(phi, phi, x @ w_v, params.feature_map, params.eps)
    return AttentionOutput(out, "features")


def gauge_equivariant_attention(
    x: np.ndarray, phi: SpectralEmbedding | np.ndarray, params: AttentionParams
) -> AttentionOutput:
    """Queries and keys come from ``x``; the embeddings are the values.

    The output is the next layer's positional embedding.
    """
    phi, x = _check_rows(phi, x)
    if params.w_q is None or params.w_k is None:
        raise ValueError("gauge-equivariant attention needs W_Q and W_K")
    if params.w_q.shape[0] != x.shape[1] or params.w_k.shape[0] != x.shape[1]:
        raise ValueError("W_Q/W_K row count does not match the feature dimension")
    out = linear_attention(x @ params.w_q, x @ params.w_k, phi, params.feature_map, params.eps)
    return AttentionOutput(out, "positional_embeddings")


def attention_logits(phi: SpectralEmbedding | np.ndarray) -> np.ndarray:
    """Raw pre-feature-map logits ``<phi_i, phi_j>`` (small N only)."""
    data = phi.data if isinstance(phi, SpectralEmbedding) else np.asarray(phi)
    _check_cap(data.shape[0], None)
    return data @ data.T
