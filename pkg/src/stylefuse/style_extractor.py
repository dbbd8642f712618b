"""Attention-based style extraction.

Learnable latent queries attend over projected image tokens through a
stack of multi-head attention + non-linear refinement layers, resampling
an arbitrary number of input tokens into a fixed number of style tokens.
No positional encoding is used anywhere, so the output is exactly
invariant to input token order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import RngStream, Tensor


@dataclass
class AseConfig:
    num_queries: int = 16
    dim: int = 64
    heads: int = 4
    layers: int = 4
    ff_dim: int = 256
    input_dim: int = 48
    # When set, keys/values cover the concatenation [tokens; latents]
    # instead of the tokens alone. Off by default.
    kv_include_latents: bool = False

    def validate(self) -> None:
        if self.dim % self.heads:
            raise ContractError(f"model dim {self.dim} not divisible by {self.heads} heads")
        if self.ff_dim < self.dim:
            raise ContractError(f"ff_dim {self.ff_dim} must be >= dim {self.dim}")


def init_latents(num_queries: int, dim: int, rng: RngStream, dtype=np.float32) -> Tensor:
    """Fresh latent queries z ~ N(0,1)/sqrt(dim), shape [1, N, D]."""
    if num_queries < 1 or dim < 1:
        raise ContractError(f"need num_queries >= 1 and dim >= 1, got {num_queries}, {dim}")
    z = rng.normal((1, num_queries, dim), dtype=dtype) / math.sqrt(dim)
    return Tensor(z, requires_grad=True)


def expand_latents(z: Tensor, batch: int) -> Tensor:
    """Repeat [1, N, D] latents along the batch axis; gradients sum back over it."""
    if batch < 1:
        raise ContractError(f"batch must be >= 1, got {batch}")
    ones = Tensor(np.ones((batch, 1, 1), dtype=z.dtype))
    return T.mul(z, ones)


class PerceiverLayerParams:
    """Per-head projections for one attention layer (all [D, D], bias-free)."""

    def __init__(self, cfg: AseConfig, rng: RngStream, dtype=np.float32):
        d = cfg.dim
        scale = 1.0 / math.sqrt(d)
        self.heads = cfg.heads
        self.wq = Tensor(rng.normal((d, d), dtype=dtype) * scale, requires_grad=True)
        self.wk = Tensor(rng.normal((d, d), dtype=dtype) * scale, requires_grad=True)
        self.wv = Tensor(rng.normal((d, d), dtype=dtype) * scale, requires_grad=True)
        self.wo = Tensor(rng.normal((d, d), dtype=dtype) * scale, requires_grad=True)

    @classmethod
    def identity(cls, dim: int, heads: int = 1, dtype=np.float32) -> "PerceiverLayerParams":
        """Identity projections: recovers the bare scaled-dot-product form."""
        p = cls.__new__(cls)
        p.heads = heads
        eye = np.eye(dim, dtype=dtype)
        p.wq, p.wk, p.wv, p.wo = (Tensor(eye.copy(), requires_grad=True) for _ in range(4))
        return p

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk,
                f"{prefix}.wv": self.wv, f"{prefix}.wo": self.wo}


class NrmParams:
    """Two linear maps with a GELU in between (refinement MLP)."""

    def __init__(self, cfg: AseConfig, rng: RngStream, dtype=np.float32):
        d, ff = cfg.dim, cfg.ff_dim
        self.w1 = Tensor(rng.normal((d, ff), dtype=dtype) / math.sqrt(d), requires_grad=True)
        self.b1 = Tensor(np.zeros(ff, dtype=dtype), requires_grad=True)
        self.w2 = Tensor(rng.normal((ff, d), dtype=dtype) / math.sqrt(ff), requires_grad=True)
        self.b2 = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return T.transpose(T.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def perceiver_attend(x: Tensor, z: Tensor, p: PerceiverLayerParams,
                     kv_include_latents: bool = False,
                     return_weights: bool = False):
    """One attention update of the latents against the input tokens.

    Per head: softmax((Wq z)(Wk x)^T / sqrt(d_head)) (Wv x), heads merged
    through Wo, then the latents added back as a residual. Attention rows
    are probability vectors over the input tokens.
    """
    if x.ndim != 3 or z.ndim != 3 or x.shape[-1] != z.shape[-1]:
        raise DimensionError(f"perceiver_attend: incompatible shapes {x.shape} vs {z.shape}")
    if x.shape[0] != z.shape[0]:
        raise DimensionError(f"perceiver_attend: batch mismatch {x.shape} vs {z.shape}")
    kv_src = T.concat([x, z], axis=1) if kv_include_latents else x
    q = _split_heads(T.matmul(z, p.wq), p.heads)
    k = _split_heads(T.matmul(kv_src, p.wk), p.heads)
    v = _split_heads(T.matmul(kv_src, p.wv), p.heads)
    d_head = z.shape[-1] // p.heads
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d_head))
    weights = T.softmax_rows(scores)
    mixed = _merge_heads(T.attn_mix(weights, v))
    out = T.add(T.matmul(mixed, p.wo), z)
    if return_weights:
        return out, weights
    return out


def nrm_refine(z: Tensor, p: NrmParams) -> Tensor:
    """w2 . GELU(w1 z + b1) + b2, plus the input as a residual."""
    if z.shape[-1] != p.w1.shape[0]:
        raise DimensionError(f"nrm_refine: token dim {z.shape} does not match {p.w1.shape}")
    hidden = T.gelu(T.linear(z, p.w1, p.b1))
    return T.add(T.linear(hidden, p.w2, p.b2), z)


class AseStack:
    """Input projection + latent queries + L x (attend, refine)."""

    def __init__(self, cfg: AseConfig, rng: RngStream, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.in_proj = Tensor(
            rng.child("in_proj").normal((cfg.input_dim, cfg.dim), dtype=dtype)
            / math.sqrt(cfg.input_dim),
            requires_grad=True,
        )
        self.latents = init_latents(cfg.num_queries, cfg.dim, rng.child("latents"), dtype)
        self.layers: list[tuple[PerceiverLayerParams, NrmParams]] = [
            (
                PerceiverLayerParams(cfg, rng.child(f"layer{i}.attn"), dtype),
                NrmParams(cfg, rng.child(f"layer{i}.nrm"), dtype),
            )
            for i in range(cfg.layers)
        ]

    def named_params(self) -> dict[str, Tensor]:
        out = {"ase.in_proj": self.in_proj, "ase.latents": self.latents}
        for i, (attn, nrm) in enumerate(self.layers):
            out.update(attn.named(f"ase.layer{i}"))
            out.update(nrm.named(f"ase.layer{i}"))
        return out


def extract_style(image_tokens: Tensor, stack: AseStack) -> Tensor:
    """Resample [B, S, D_in] image tokens into [B, N, D] style tokens."""
    if image_tokens.ndim != 3 or image_tokens.shape[-1] != stack.cfg.input_dim:
        raise DimensionError(
            f"extract_style: tokens {image_tokens.shape} do not match input dim "
            f"{stack.cfg.input_dim}"
        )
    x = T.matmul(image_tokens, stack.in_proj)
    z = expand_latents(stack.latents, image_tokens.shape[0])
    for attn, nrm in stack.layers:
        z = perceiver_attend(x, z, attn, stack.cfg.kv_include_latents)
        z = nrm_refine(z, nrm)
    return z
