"""Text-image aligning cross-attention.

Style tokens act as queries against text tokens as keys and values,
pulling the style representation into the span of the text values so
the fused conditioning stays text-compatible. Returns the attention map
alongside the output for diagnostics (the CLI can dump it as CSV).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import RngStream, Tensor, compensated_sum


class TiaaParams:
    """Query/key/value projections into the shared space (bias-free)."""

    def __init__(self, dim: int, text_dim: int, rng: RngStream, heads: int = 1,
                 dtype=np.float32):
        if dim % heads:
            raise ContractError(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.wq = Tensor(rng.normal((dim, dim), dtype=dtype) / math.sqrt(dim),
                         requires_grad=True)
        self.wk = Tensor(rng.normal((text_dim, dim), dtype=dtype) / math.sqrt(text_dim),
                         requires_grad=True)
        self.wv = Tensor(rng.normal((text_dim, dim), dtype=dtype) / math.sqrt(text_dim),
                         requires_grad=True)

    @classmethod
    def identity(cls, dim: int, dtype=np.float32) -> "TiaaParams":
        p = cls.__new__(cls)
        p.dim, p.heads = dim, 1
        eye = np.eye(dim, dtype=dtype)
        p.wq, p.wk, p.wv = (Tensor(eye.copy(), requires_grad=True) for _ in range(3))
        return p

    def named(self) -> dict[str, Tensor]:
        return {"tiaa.wq": self.wq, "tiaa.wk": self.wk, "tiaa.wv": self.wv}


@dataclass
class AttentionMap:
    """Row-stochastic weights [B, N, M]: style queries x text tokens."""

    weights: Tensor

    @property
    def num_queries(self) -> int:
        return self.weights.shape[1]

    @property
    def num_text_tokens(self) -> int:
        return self.weights.shape[2]


def align(style_tokens: Tensor, text_tokens: Tensor, p: TiaaParams):
    """Cross-attend style tokens over text tokens.

    Returns (aligned tokens [B, N, D], AttentionMap). Scores are scaled
    by sqrt of the per-head key dimension; each query row softmaxes over
    the text tokens, and the output is the weighted sum of the value rows.
    """
    if style_tokens.ndim != 3 or text_tokens.ndim != 3:
        raise DimensionError(
            f"align: expected [B,N,D] and [B,M,D_t], got {style_tokens.shape} and "
            f"{text_tokens.shape}"
        )
    if text_tokens.shape[1] == 0:
        raise ContractError("align: need at least one text token")
    if style_tokens.shape[0] != text_tokens.shape[0]:
        raise DimensionError(
            f"align: batch mismatch {style_tokens.shape} vs {text_tokens.shape}"
        )
    if style_tokens.shape[-1] != p.wq.shape[0] or text_tokens.shape[-1] != p.wk.shape[0]:
        raise DimensionError(
            f"align: token dims {style_tokens.shape}/{text_tokens.shape} do not match "
            f"projections {p.wq.shape}/{p.wk.shape}"
        )
    b, n, _ = style_tokens.shape
    m = text_tokens.shape[1]
    h = p.heads
    d_head = p.dim // h

    def heads(x: Tensor) -> Tensor:
        return T.transpose(T.reshape(x, (x.shape[0], x.shape[1], h, d_head)), (0, 2, 1, 3))

    q = heads(T.matmul(style_tokens, p.wq))
    k = heads(T.matmul(text_tokens, p.wk))
    v = heads(T.matmul(text_tokens, p.wv))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d_head))
    weights = T.softmax_rows(scores)  # [B, H, N, M]
    mixed = T.attn_mix(weights, v)
    out = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, n, h * d_head))
    head_mean = T.mul(sum_heads(weights), 1.0 / h) if h > 1 else T.reshape(weights, (b, n, m))
    return out, AttentionMap(weights=head_mean)


def sum_heads(weights: Tensor) -> Tensor:
    return T.sum_(weights, axis=1)


def attention_entropy(amap: AttentionMap) -> np.ndarray:
    """Shannon entropy in nats per query row: 0 one-hot, ln(M) uniform."""
    w = amap.weights.data.astype(np.float64)
    terms = np.where(w > 0.0, -w * np.log(np.maximum(w, 1e-300)), 0.0)
    return compensated_sum(terms, axis=-1)
