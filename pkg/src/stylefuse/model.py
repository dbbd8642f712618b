"""The conditioned model: frozen-backbone pieces plus the trainable adapter.

The backbone is the text encoder, the learned null embeddings for
condition dropout, and the denoiser. The adapter is the style extractor,
the text-image aligner, the fused-token key/value projections inside the
denoiser's cross-attention, and the null fused tokens. Training phase 1
fits the backbone on text-only conditioning; phase 2 freezes it and fits
the adapter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import math

import numpy as np

from . import tensor as T
from . import toyworld as tw
from .aligner import TiaaParams, align
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import (NoiseSchedule, cfg_combine, diffuse_to, make_schedule, noise_mse,
                        sample_loop)
from .errors import ContractError, DimensionError
from .fusion import FusionConfig, PromptTokens, build_prompt, interpolate
from .style_extractor import AseConfig, AseStack, extract_style
from .tensor import RngStream, Tensor, no_grad


@dataclass
class GuidanceConfig:
    w: float = 0.6
    cond_drop_p: float = 0.05
    cfg_mode: str = "blend"


@dataclass
class PipelineConfig:
    text_dim: int = 64
    vocab_size: int = len(tw.VOCAB)
    caption_len: int = tw.CAPTION_LEN
    ase: AseConfig = field(default_factory=AseConfig)
    tiaa_heads: int = 1
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 50
    sampler: str = "ddpm"
    disable_tiaa: bool = False


class TextEncoder:
    """Token embedding table plus learned positional embeddings."""

    def __init__(self, cfg: PipelineConfig, rng: RngStream, dtype=np.float32):
        scale = 1.0 / math.sqrt(cfg.text_dim)
        self.tokens = Tensor(rng.child("tokens").normal(
            (cfg.vocab_size, cfg.text_dim), dtype=dtype) * scale, requires_grad=True)
        self.positions = Tensor(rng.child("positions").normal(
            (cfg.caption_len, cfg.text_dim), dtype=dtype) * scale, requires_grad=True)
        self.vocab_size = cfg.vocab_size
        self.caption_len = cfg.caption_len

    def __call__(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.shape[1] != self.caption_len:
            raise DimensionError(f"captions must have {self.caption_len} tokens, got {ids.shape}")
        return T.add(T.gather_rows(self.tokens, ids),
                     T.reshape(T.gather_rows(self.positions,
                                             np.arange(self.caption_len, dtype=np.int64)),
                               (1, self.caption_len, -1)))

    def named(self) -> dict[str, Tensor]:
        return {"text.tokens": self.tokens, "text.positions": self.positions}


def _mix_rows(tokens: Tensor, null_tokens: Tensor, drop: np.ndarray) -> Tensor:
    """Replace whole token sequences with the null sequence where drop is set."""
    m = Tensor(drop.astype(tokens.dtype).reshape(-1, 1, 1))
    keep = Tensor((1.0 - drop.astype(tokens.dtype)).reshape(-1, 1, 1))
    null = T.reshape(null_tokens, (1,) + null_tokens.shape)
    return T.add(T.mul(tokens, keep), T.mul(null, m))


class Pipeline:
    """Backbone + optional adapter with named parameter groups."""

    def __init__(self, cfg: PipelineConfig, rng: RngStream, dtype=np.float32,
                 with_adapter: bool = False):
        cfg.fusion.validate()
        cfg.denoiser.timesteps = cfg.timesteps
        self.cfg = cfg
        self.dtype = dtype
        self.schedule: NoiseSchedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
        init = rng.child("init")
        self.text_encoder = TextEncoder(cfg, init.child("text"), dtype)
        self.null_text = Tensor(
            init.child("null_text").normal((cfg.caption_len, cfg.text_dim), dtype=dtype)
            / math.sqrt(cfg.text_dim), requires_grad=True)
        self.denoiser = Denoiser(cfg.denoiser, init.child("denoiser"), dtype)
        self.ase: AseStack | None = None
        self.tiaa: TiaaParams | None = None
        self.null_fused: Tensor | None = None
        if with_adapter:
            self.attach_adapter(init)

    def attach_adapter(self, init_rng: RngStream) -> None:
        cfg = self.cfg
        self.ase = AseStack(cfg.ase, init_rng.child("ase"), self.dtype)
        self.tiaa = TiaaParams(cfg.ase.dim, cfg.text_dim, init_rng.child("tiaa"),
                               heads=cfg.tiaa_heads, dtype=self.dtype)
        self.null_fused = Tensor(
            init_rng.child("null_fused").normal((cfg.ase.num_queries, cfg.ase.dim),
                                                dtype=self.dtype)
            / math.sqrt(cfg.ase.dim), requires_grad=True)
        self.denoiser.attach_fused_kv(init_rng.child("fused_kv"))

    @property
    def has_adapter(self) -> bool:
        return self.ase is not None

    # -- parameter groups -------------------------------------------------
    def named_backbone(self) -> dict[str, Tensor]:
        out = dict(self.text_encoder.named())
        out["text.null"] = self.null_text
        out.update(self.denoiser.named_backbone())
        return out

    def named_adapter(self) -> dict[str, Tensor]:
        if not self.has_adapter:
            return {}
        out = self.ase.named_params()
        out.update(self.tiaa.named())
        out["fused.null"] = self.null_fused
        out.update(self.denoiser.named_fused())
        return out

    def named_all(self) -> dict[str, Tensor]:
        return {**self.named_backbone(), **self.named_adapter()}

    # -- conditioning ------------------------------------------------------
    def encode_text(self, captions: np.ndarray) -> Tensor:
        return self.text_encoder(captions)

    def style_tokens(self, style_images: np.ndarray) -> Tensor:
        """Style embeddings from [B, H, W, 3] reference images."""
        if not self.has_adapter:
            raise ContractError("style conditioning requires an attached adapter")
        raw = np.concatenate([tw.image_to_patch_tokens(im) for im in style_images], axis=0)
        return extract_style(Tensor(raw.astype(self.dtype)), self.ase)

    def fused_tokens(self, style_emb: Tensor, text_emb: Tensor, alpha: float):
        """TIAA alignment then fusion; returns (fused, attention map)."""
        if self.cfg.disable_tiaa:
            aligned, amap = style_emb, None
        else:
            aligned, amap = align(style_emb, text_emb, self.tiaa)
        return interpolate(style_emb, aligned, alpha), amap

    def build_conditioning(self, captions: np.ndarray, style_images: np.ndarray | None,
                           alpha: float | None = None,
                           drop: np.ndarray | None = None) -> PromptTokens:
        text_emb = self.encode_text(captions)
        text_for_prompt = text_emb if drop is None else _mix_rows(text_emb, self.null_text, drop)
        if style_images is None:
            return build_prompt(text_for_prompt, None)
        if not self.has_adapter:
            raise ContractError("style conditioning requires an attached adapter")
        alpha = self.cfg.fusion.alpha if alpha is None else alpha
        fused, _ = self.fused_tokens(self.style_tokens(style_images), text_emb, alpha)
        if drop is not None:
            fused = _mix_rows(fused, self.null_fused, drop)
        return build_prompt(text_for_prompt, fused)

    def null_conditioning(self, batch: int) -> PromptTokens:
        """The fully unconditional prompt (both conditions nulled)."""
        text = T.mul(T.reshape(self.null_text, (1,) + self.null_text.shape),
                     Tensor(np.ones((batch, 1, 1), dtype=self.dtype)))
        if not self.has_adapter:
            return build_prompt(text, None)
        fused = T.mul(T.reshape(self.null_fused, (1,) + self.null_fused.shape),
                      Tensor(np.ones((batch, 1, 1), dtype=self.dtype)))
        return build_prompt(text, fused)

    # -- training objective --------------------------------------------------
    def training_loss(self, x0: np.ndarray, captions: np.ndarray,
                      style_images: np.ndarray | None, t: np.ndarray, eps: np.ndarray,
                      drop: np.ndarray | None = None) -> Tensor:
        """MSE between the drawn noise and its prediction at step t.

        ``x0`` is [B, 3, H, W] in [-1, 1]; conditioning comes from the
        caption and (in the adapter phase) the style reference, with
        dropped samples conditioned on the learned nulls.
        """
        z_t = diffuse_to(x0, t, self.schedule, eps).astype(self.dtype)
        prompt = self.build_conditioning(captions, style_images, drop=drop)
        eps_hat = self.denoiser(Tensor(z_t), t, prompt, self.cfg.fusion.adapter_scale)
        diff = T.sub(eps_hat, Tensor(eps.astype(self.dtype)))
        return T.mean_(T.mul(diff, diff))

    # -- sampling ----------------------------------------------------------------
    def sample_batch(self, captions: np.ndarray, style_images: np.ndarray | None,
                     seeds, *, alpha: float | None = None,
                     adapter_scale: float | None = None, w: float | None = None,
                     steps: int | None = None, sampler: str | None = None) -> np.ndarray:
        """Draw one image per seed; returns [B, H, W, 3] in [0, 1].

        Each seed gets its own noise stream, so results are independent
        of how the batch is composed.
        """
        gcfg = self.cfg.guidance
        w = gcfg.w if w is None else w
        steps = self.cfg.sample_steps if steps is None else steps
        sampler = self.cfg.sampler if sampler is None else sampler
        scale = self.cfg.fusion.adapter_scale if adapter_scale is None else adapter_scale
        seeds = list(seeds)
        batch = len(seeds)
        captions = np.asarray(captions, dtype=np.int64)
        if captions.ndim == 1:
            captions = np.tile(captions[None, :], (batch, 1))
        with no_grad():
            cond = self.build_conditioning(captions, style_images, alpha=alpha)
            uncond = self.null_conditioning(batch)

            def eps_fn(x, t_parent):
                ts = np.full(batch, t_parent, dtype=np.int64)
                xt = Tensor(x)
                e_c = self.denoiser(xt, ts, cond, scale).data
                e_u = self.denoiser(xt, ts, uncond, scale).data
                return cfg_combine(e_c, e_u, w, gcfg.cfg_mode)

            rngs = [RngStream(seed).child("sample") for seed in seeds]
            shape_one = (3, tw.IMG_SIZE, tw.IMG_SIZE)
            x = sample_loop(eps_fn, rngs, shape_one, self.schedule, steps, sampler,
                            dtype=self.dtype)
        imgs = np.clip((x + 1.0) / 2.0, 0.0, 1.0)
        return imgs.transpose(0, 2, 3, 1).astype(np.float32)

    def sample(self, caption: np.ndarray, style_image: np.ndarray | None, seed: int,
               **knobs) -> np.ndarray:
        """Single image; see ``sample_batch`` for knobs."""
        style = None if style_image is None else style_image[None]
        return self.sample_batch(caption, style, [seed], **knobs)[0]
