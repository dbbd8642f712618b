"""Explicit modulation: fuse style tokens with aligned tokens, then build
the prompt sequence the denoiser conditions on.

The fusion ratio interpolates between raw style tokens (alpha=1) and
text-aligned tokens (alpha=0); endpoints are returned bit-exactly. The
prompt keeps text and fused tokens as separate segments so the denoiser
can weight the fused contribution by the adapter scale.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass
class FusionConfig:
    alpha: float = 0.8
    adapter_scale: float = 0.6

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"fusion alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.adapter_scale <= 1.0:
            raise ContractError(f"adapter_scale must be in [0, 1], got {self.adapter_scale}")


def interpolate(style_tokens: Tensor, aligned_tokens: Tensor, alpha: float) -> Tensor:
    """alpha * style + (1 - alpha) * aligned, elementwise; exact at the endpoints."""
    if style_tokens.shape != aligned_tokens.shape:
        raise DimensionError(
            f"interpolate: shapes differ {style_tokens.shape} vs {aligned_tokens.shape}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"interpolate: alpha must be in [0, 1], got {alpha}")
    if alpha == 1.0:
        return _identity(style_tokens)
    if alpha == 0.0:
        return _identity(aligned_tokens)
    return T.add(T.mul(style_tokens, alpha), T.mul(aligned_tokens, 1.0 - alpha))


def _identity(x: Tensor) -> Tensor:
    """Graph pass-through that preserves the payload bit-for-bit."""

    def grad_fn(g, acc):
        acc(x, g)

    return Tensor._result(x.data, (x,), grad_fn)


@dataclass
class PromptTokens:
    """Concatenated prompt [B, M+N, D] with recorded provenance boundary."""

    tokens: Tensor
    text_len: int

    @property
    def text(self) -> Tensor:
        return T.narrow(self.tokens, 1, 0, self.text_len)

    @property
    def fused(self) -> Tensor:
        n = self.tokens.shape[1] - self.text_len
        return T.narrow(self.tokens, 1, self.text_len, n)

    @property
    def fused_len(self) -> int:
        return self.tokens.shape[1] - self.text_len


def build_prompt(text_tokens: Tensor, fused_tokens: Tensor | None) -> PromptTokens:
    """Concatenate text tokens then fused tokens along the token axis."""
    if fused_tokens is None or fused_tokens.shape[1] == 0:
        return PromptTokens(tokens=_identity(text_tokens), text_len=text_tokens.shape[1])
    if text_tokens.shape[0] != fused_tokens.shape[0] or \
            text_tokens.shape[-1] != fused_tokens.shape[-1]:
        raise DimensionError(
            f"build_prompt: incompatible shapes {text_tokens.shape} vs {fused_tokens.shape}"
        )
    joined = T.concat([text_tokens, fused_tokens], axis=1)
    return PromptTokens(tokens=joined, text_len=text_tokens.shape[1])
