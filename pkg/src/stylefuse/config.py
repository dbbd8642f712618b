"""Run configuration: defaults, `key = value` files, and CLI overrides.

Every knob named anywhere in the package lives here under a dotted key.
Files may override defaults, flags override files, unknown keys are
rejected, and the effective configuration is echoed verbatim into every
report and checkpoint header.
"""

from __future__ import annotations

from pathlib import Path

from .denoiser import DenoiserConfig
from .errors import ConfigError
from .fusion import FusionConfig
from .model import GuidanceConfig, PipelineConfig
from .style_extractor import AseConfig

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "toy.samples_per_cell": 64,
    "toy.holdout": "0:3,1:2,3:0",
    "ase.queries": 16,
    "ase.dim": 64,
    "ase.heads": 4,
    "ase.layers": 4,
    "ase.ff_dim": 256,
    "ase.input_dim": 48,
    "ase.kv_include_latents": False,
    "tiaa.heads": 1,
    "fusion.alpha": 0.8,
    "fusion.adapter_scale": 0.6,
    "diffusion.T": 1000,
    "diffusion.beta_start": 1e-4,
    "diffusion.beta_end": 0.02,
    "diffusion.steps": 50,
    "diffusion.sampler": "ddpm",
    "guidance.w": 0.6,
    "guidance.cond_drop_p": 0.05,
    "guidance.cfg_mode": "blend",
    "denoiser.base_channels": 32,
    "denoiser.mid_channels": 64,
    "denoiser.heads": 4,
    "denoiser.groups": 8,
    "denoiser.t_dim": 64,
    "text.dim": 64,
    "train.batch_size": 32,
    "train.pretrain_steps": 5000,
    "train.adapter_steps": 5000,
    "train.lr_pretrain": 1e-3,
    "train.lr_adapter": 3e-4,
    "train.weight_decay": 1e-4,
    "train.beta2": 0.99,
    "train.eps": 1e-8,
    "train.log_every": 100,
    "train.disable_tiaa": False,
    "eval.seeds": 16,
    "eval.cells": "seen",
    "sweep.alphas": "0.2,0.4,0.6,0.8,1.0",
    "sweep.cells": "0:0,1:1,2:2,3:3",
}


def _coerce(key: str, value: str):
    default = DEFAULTS[key]
    raw = value.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {value!r}") from e


class RunConfig:
    """Immutable-by-convention mapping of dotted keys to typed values."""

    def __init__(self, values: dict[str, object]):
        self._values = dict(values)

    def __getitem__(self, key: str):
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def get(self, key: str, default=None):
        return self._values.get(key, default)

    def with_overrides(self, overrides: dict[str, object]) -> "RunConfig":
        merged = dict(self._values)
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, str(value)) if isinstance(value, str) else value
        return RunConfig(merged)

    def echo(self) -> str:
        """Canonical `key = value` listing of the effective configuration."""
        def fmt(v):
            if isinstance(v, bool):
                return "true" if v else "false"
            if isinstance(v, float):
                return repr(v)
            return str(v)

        return "\n".join(f"{k} = {fmt(self._values[k])}" for k in sorted(self._values))

    def items(self):
        return self._values.items()


def parse_config_file(path) -> dict[str, object]:
    out: dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path=None, overrides: dict[str, object] | None = None) -> RunConfig:
    cfg = RunConfig(DEFAULTS)
    if path is not None:
        cfg = RunConfig({**DEFAULTS, **parse_config_file(path)})
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


def config_from_echo(echo: str) -> RunConfig:
    """Rebuild a RunConfig from a checkpoint's header echo."""
    values = dict(DEFAULTS)
    for line in echo.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"checkpoint echo carries unknown key {key!r}")
        values[key] = _coerce(key, value)
    return RunConfig(values)


def pipeline_config(cfg: RunConfig) -> PipelineConfig:
    return PipelineConfig(
        text_dim=cfg["text.dim"],
        ase=AseConfig(
            num_queries=cfg["ase.queries"],
            dim=cfg["ase.dim"],
            heads=cfg["ase.heads"],
            layers=cfg["ase.layers"],
            ff_dim=cfg["ase.ff_dim"],
            input_dim=cfg["ase.input_dim"],
            kv_include_latents=cfg["ase.kv_include_latents"],
        ),
        tiaa_heads=cfg["tiaa.heads"],
        denoiser=DenoiserConfig(
            base_channels=cfg["denoiser.base_channels"],
            mid_channels=cfg["denoiser.mid_channels"],
            t_dim=cfg["denoiser.t_dim"],
            ctx_dim=cfg["text.dim"],
            heads=cfg["denoiser.heads"],
            groups=cfg["denoiser.groups"],
            timesteps=cfg["diffusion.T"],
        ),
        fusion=FusionConfig(alpha=cfg["fusion.alpha"], adapter_scale=cfg["fusion.adapter_scale"]),
        guidance=GuidanceConfig(w=cfg["guidance.w"], cond_drop_p=cfg["guidance.cond_drop_p"],
                                cfg_mode=cfg["guidance.cfg_mode"]),
        timesteps=cfg["diffusion.T"],
        beta_start=cfg["diffusion.beta_start"],
        beta_end=cfg["diffusion.beta_end"],
        sample_steps=cfg["diffusion.steps"],
        sampler=cfg["diffusion.sampler"],
        disable_tiaa=cfg["train.disable_tiaa"],
    )
