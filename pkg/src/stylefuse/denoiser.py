"""Small two-resolution encoder-decoder noise predictor.

Residual conv blocks at 24x24 and 12x12 with one cross-attention block
per resolution attending over the prompt tokens. Text-token keys/values
belong to the backbone; fused-token keys/values are adapter parameters
created only when an adapter is attached. The fused contribution is
weighted inside the joint softmax: fused attention weights are scaled by
the adapter strength and every row renormalized, so strength 1 is plain
attention over the concatenated prompt and strength 0 reproduces the
text-only computation exactly (same arithmetic, fused path untouched).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .fusion import PromptTokens
from .tensor import RngStream, Tensor


@dataclass
class DenoiserConfig:
    in_channels: int = 3
    base_channels: int = 32
    mid_channels: int = 64
    t_dim: int = 64
    ctx_dim: int = 64
    heads: int = 4
    groups: int = 8
    timesteps: int = 1000


def _weight(rng: RngStream, shape, fan_in: int, dtype) -> Tensor:
    return Tensor(rng.normal(shape, dtype=dtype) / math.sqrt(fan_in), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Conv:
    def __init__(self, rng: RngStream, c_in: int, c_out: int, k: int = 3, stride: int = 1,
                 dtype=np.float32, zero_init: bool = False):
        fan = c_in * k * k
        if zero_init:
            self.w = _zeros((c_out, c_in, k, k), dtype)
        else:
            self.w = _weight(rng, (c_out, c_in, k, k), fan, dtype)
        self.b = _zeros(c_out, dtype)
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class Norm:
    def __init__(self, channels: int, groups: int, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = _zeros(channels, dtype)
        self.groups = min(groups, channels)

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.gamma, self.beta, self.groups)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.g": self.gamma, f"{prefix}.b": self.beta}


class ResBlock:
    def __init__(self, rng: RngStream, c_in: int, c_out: int, t_dim: int, groups: int,
                 dtype=np.float32):
        self.norm1 = Norm(c_in, groups, dtype)
        self.conv1 = Conv(rng.child("conv1"), c_in, c_out, dtype=dtype)
        self.t_w = _weight(rng.child("t"), (t_dim, c_out), t_dim, dtype)
        self.t_b = _zeros(c_out, dtype)
        self.norm2 = Norm(c_out, groups, dtype)
        self.conv2 = Conv(rng.child("conv2"), c_out, c_out, dtype=dtype)
        self.skip = None if c_in == c_out else Conv(rng.child("skip"), c_in, c_out, k=1, dtype=dtype)

    def __call__(self, x: Tensor, t_emb: Tensor) -> Tensor:
        h = self.conv1(T.gelu(self.norm1(x)))
        shift = T.linear(T.gelu(t_emb), self.t_w, self.t_b)
        h = T.add(h, T.reshape(shift, (shift.shape[0], shift.shape[1], 1, 1)))
        h = self.conv2(T.gelu(self.norm2(h)))
        res = x if self.skip is None else self.skip(x)
        return T.add(h, res)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {**self.norm1.named(f"{prefix}.gn1"), **self.conv1.named(f"{prefix}.conv1"),
               f"{prefix}.t.w": self.t_w, f"{prefix}.t.b": self.t_b,
               **self.norm2.named(f"{prefix}.gn2"), **self.conv2.named(f"{prefix}.conv2")}
        if self.skip is not None:
            out.update(self.skip.named(f"{prefix}.skip"))
        return out


class CrossAttention:
    """Feature-map queries over prompt tokens, provenance-aware."""

    def __init__(self, rng: RngStream, channels: int, ctx_dim: int, heads: int, groups: int,
                 dtype=np.float32):
        self.channels = channels
        self.heads = heads
        self.norm = Norm(channels, groups, dtype)
        self.wq = _weight(rng.child("wq"), (channels, channels), channels, dtype)
        self.wo = _weight(rng.child("wo"), (channels, channels), channels, dtype)
        self.wk_text = _weight(rng.child("wk_text"), (ctx_dim, channels), ctx_dim, dtype)
        self.wv_text = _weight(rng.child("wv_text"), (ctx_dim, channels), ctx_dim, dtype)
        self.wk_fused: Tensor | None = None
        self.wv_fused: Tensor | None = None
        self._ctx_dim = ctx_dim
        self._dtype = dtype

    def attach_fused_kv(self, rng: RngStream) -> None:
        self.wk_fused = _weight(rng.child("wk_fused"), (self._ctx_dim, self.channels),
                                self._ctx_dim, self._dtype)
        self.wv_fused = _weight(rng.child("wv_fused"), (self._ctx_dim, self.channels),
                                self._ctx_dim, self._dtype)

    def _heads(self, x: Tensor) -> Tensor:
        b, t, c = x.shape
        return T.transpose(T.reshape(x, (b, t, self.heads, c // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, prompt: PromptTokens, adapter_scale: float) -> Tensor:
        b, c, h, w = x.shape
        seq = T.transpose(T.reshape(self.norm(x), (b, c, h * w)), (0, 2, 1))
        q = self._heads(T.matmul(seq, self.wq))
        d_head = c // self.heads
        inv_sqrt = 1.0 / math.sqrt(d_head)
        text = prompt.text if prompt.fused_len else prompt.tokens
        k_t = self._heads(T.matmul(text, self.wk_text))
        v_t = self._heads(T.matmul(text, self.wv_text))
        scores_t = T.mul(T.matmul(q, T.transpose(k_t, (0, 1, 3, 2))), inv_sqrt)
        use_fused = prompt.fused_len > 0 and adapter_scale != 0.0 and self.wk_fused is not None
        if not use_fused:
            mixed = T.matmul(T.softmax_rows(scores_t), v_t)
        else:
            fused = prompt.fused
            k_f = self._heads(T.matmul(fused, self.wk_fused))
            v_f = self._heads(T.matmul(fused, self.wv_fused))
            scores_f = T.mul(T.matmul(q, T.transpose(k_f, (0, 1, 3, 2))), inv_sqrt)
            joint = T.softmax_rows(T.concat([scores_t, scores_f], axis=-1))
            w_t = T.narrow(joint, 3, 0, prompt.text_len)
            w_f = T.mul(T.narrow(joint, 3, prompt.text_len, prompt.fused_len), adapter_scale)
            denom = T.add(T.sum_(w_t, axis=-1, keepdims=True),
                          T.sum_(w_f, axis=-1, keepdims=True))
            mixed = T.add(T.matmul(T.div(w_t, denom), v_t), T.matmul(T.div(w_f, denom), v_f))
        merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, h * w, c))
        out = T.matmul(merged, self.wo)
        return T.add(x, T.reshape(T.transpose(out, (0, 2, 1)), (b, c, h, w)))

    def named_backbone(self, prefix: str) -> dict[str, Tensor]:
        return {**self.norm.named(f"{prefix}.gn"), f"{prefix}.wq": self.wq,
                f"{prefix}.wo": self.wo, f"{prefix}.wk_text": self.wk_text,
                f"{prefix}.wv_text": self.wv_text}

    def named_fused(self, prefix: str) -> dict[str, Tensor]:
        if self.wk_fused is None:
            return {}
        return {f"{prefix}.wk_fused": self.wk_fused, f"{prefix}.wv_fused": self.wv_fused}


class Denoiser:
    """Predicts the noise component of a noisy image given t and the prompt."""

    def __init__(self, cfg: DenoiserConfig, rng: RngStream, dtype=np.float32):
        self.cfg = cfg
        c1, c2 = cfg.base_channels, cfg.mid_channels
        self.t_table = Tensor(
            rng.child("t_table").normal((cfg.timesteps, cfg.t_dim), dtype=dtype)
            / math.sqrt(cfg.t_dim),
            requires_grad=True,
        )
        self.conv_in = Conv(rng.child("conv_in"), cfg.in_channels, c1, dtype=dtype)
        self.res1 = ResBlock(rng.child("res1"), c1, c1, cfg.t_dim, cfg.groups, dtype)
        self.att1 = CrossAttention(rng.child("att1"), c1, cfg.ctx_dim, cfg.heads, cfg.groups, dtype)
        self.down = Conv(rng.child("down"), c1, c2, stride=2, dtype=dtype)
        self.res2 = ResBlock(rng.child("res2"), c2, c2, cfg.t_dim, cfg.groups, dtype)
        self.att2 = CrossAttention(rng.child("att2"), c2, cfg.ctx_dim, cfg.heads, cfg.groups, dtype)
        self.res3 = ResBlock(rng.child("res3"), c2, c2, cfg.t_dim, cfg.groups, dtype)
        self.up = Conv(rng.child("up"), c2, c1, dtype=dtype)
        self.res4 = ResBlock(rng.child("res4"), c1, c1, cfg.t_dim, cfg.groups, dtype)
        self.norm_out = Norm(c1, cfg.groups, dtype)
        self.conv_out = Conv(rng.child("conv_out"), c1, cfg.in_channels, dtype=dtype,
                             zero_init=True)

    def attach_fused_kv(self, rng: RngStream) -> None:
        self.att1.attach_fused_kv(rng.child("att1"))
        self.att2.attach_fused_kv(rng.child("att2"))

    def __call__(self, x: Tensor, t: np.ndarray, prompt: PromptTokens,
                 adapter_scale: float = 1.0) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise DimensionError(f"denoiser expects NCHW images, got {x.shape}")
        t_emb = T.gather_rows(self.t_table, np.asarray(t, dtype=np.int64))
        h1 = self.conv_in(x)
        h1 = self.res1(h1, t_emb)
        h1 = self.att1(h1, prompt, adapter_scale)
        h2 = self.down(h1)
        h2 = self.res2(h2, t_emb)
        h2 = self.att2(h2, prompt, adapter_scale)
        h2 = self.res3(h2, t_emb)
        h3 = self.up(T.upsample2x(h2))
        h3 = self.res4(T.add(h3, h1), t_emb)
        return self.conv_out(T.gelu(self.norm_out(h3)))

    def named_backbone(self) -> dict[str, Tensor]:
        out = {"den.t_table": self.t_table}
        out.update(self.conv_in.named("den.conv_in"))
        out.update(self.res1.named("den.res1"))
        out.update(self.att1.named_backbone("den.att1"))
        out.update(self.down.named("den.down"))
        out.update(self.res2.named("den.res2"))
        out.update(self.att2.named_backbone("den.att2"))
        out.update(self.res3.named("den.res3"))
        out.update(self.up.named("den.up"))
        out.update(self.res4.named("den.res4"))
        out.update(self.norm_out.named("den.out.gn"))
        out.update(self.conv_out.named("den.out.conv"))
        return out

    def named_fused(self) -> dict[str, Tensor]:
        return {**self.att1.named_fused("den.att1"), **self.att2.named_fused("den.att2")}
