"""Two-phase training: backbone pretraining, then frozen-backbone adapter fit.

The optimizer is a momentum-free adaptive update (second-moment scaling
with bias correction) plus decoupled weight decay. All randomness per
step comes from counter-based streams indexed by the step number, so a
resumed run replays the exact trajectory of an uninterrupted one.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, config_from_echo, pipeline_config
from .errors import CheckpointError, InvariantError, TrainingError
from .model import Pipeline
from .tensor import RngStream, Tensor
from .toyworld import ToyDataset

PHASES = ("pretrain", "adapter")


@dataclass
class TrainConfig:
    phase: str
    steps: int
    batch_size: int
    lr: float
    weight_decay: float
    beta2: float
    eps: float
    cond_drop_p: float
    seed: int
    log_every: int = 100

    @classmethod
    def from_run_config(cls, cfg: RunConfig, phase: str) -> "TrainConfig":
        if phase not in PHASES:
            raise TrainingError(f"unknown phase {phase!r}")
        return cls(
            phase=phase,
            steps=cfg[f"train.{phase}_steps"],
            batch_size=cfg["train.batch_size"],
            lr=cfg["train.lr_pretrain"] if phase == "pretrain" else cfg["train.lr_adapter"],
            weight_decay=cfg["train.weight_decay"],
            beta2=cfg["train.beta2"],
            eps=cfg["train.eps"],
            cond_drop_p=cfg["guidance.cond_drop_p"],
            seed=cfg["seed"],
            log_every=cfg["train.log_every"],
        )


class AdaptiveOptimizer:
    """Second-moment adaptive step (no momentum) with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta2: float = 0.99,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.v = {name: np.zeros_like(t.data) for name, t in self.params.items()}
        self.step_count = 0

    def step(self) -> None:
        self.step_count += 1
        correction = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            v = self.v[name]
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = g / (np.sqrt(v / correction) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - (self.lr * update).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"opt.{name}.v": v for name, v in self.v.items()}
        out["opt.step"] = np.array([self.step_count], dtype=np.float32)
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for name in self.v:
            key = f"opt.{name}.v"
            if key in tensors:
                self.v[name] = tensors[key].reshape(self.v[name].shape).astype(self.v[name].dtype)
        if "opt.step" in tensors:
            self.step_count = int(round(float(tensors["opt.step"][0])))


@dataclass
class TrainResult:
    checkpoint_path: str
    loss_log: list[tuple[int, float]]
    first_loss: float
    last_loss: float
    runtime_s: float


def _stack_split(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x0 = np.stack([s.target for s in samples]).transpose(0, 3, 1, 2) * 2.0 - 1.0
    captions = np.stack([s.caption for s in samples])
    refs = np.stack([s.style_ref for s in samples])
    return x0.astype(np.float32), captions.astype(np.int64), refs.astype(np.float32)


def freeze(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.requires_grad = False
        t.grad = None


def _snapshot(params: dict[str, Tensor]) -> dict[str, bytes]:
    return {name: t.data.tobytes() for name, t in params.items()}


def run_phase(pipeline: Pipeline, trainable: dict[str, Tensor], dataset: ToyDataset,
              tcfg: TrainConfig, *, use_style: bool, start_step: int = 0,
              optimizer: AdaptiveOptimizer | None = None,
              log_path: str | None = None) -> tuple[AdaptiveOptimizer, list[tuple[int, float]], float]:
    """Shared step loop; returns (optimizer, loss log, runtime seconds)."""
    x0, captions, refs = _stack_split(dataset.train)
    n = len(dataset.train)
    if optimizer is None:
        optimizer = AdaptiveOptimizer(trainable, tcfg.lr, tcfg.beta2, tcfg.eps,
                                      tcfg.weight_decay)
    root = RngStream(tcfg.seed).child(tcfg.phase)
    streams = {name: root.child(name) for name in ("batch", "t", "eps", "drop")}
    for s in streams.values():
        s.counter = start_step
    log: list[tuple[int, float]] = []
    started = time.time()
    timesteps = pipeline.schedule.steps
    batch = tcfg.batch_size
    for step in range(start_step, tcfg.steps):
        idx = streams["batch"].integers(0, n, (batch,))
        t = streams["t"].integers(0, timesteps, (batch,))
        eps = streams["eps"].normal((batch, 3, x0.shape[2], x0.shape[3]))
        drop = streams["drop"].uniform((batch,)) < tcfg.cond_drop_p
        loss = pipeline.training_loss(x0[idx], captions[idx],
                                      refs[idx] if use_style else None, t, eps, drop)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"loss diverged to {value} at step {step}", step=step)
        loss.backward()
        optimizer.step()
        optimizer.zero_grad()
        if step % tcfg.log_every == 0 or step == tcfg.steps - 1:
            log.append((step, value))
    runtime = time.time() - started
    if log_path:
        lines = ["step,loss"] + [f"{s},{v:.6f}" for s, v in log]
        Path(log_path).write_text("\n".join(lines) + "\n", encoding="ascii")
    return optimizer, log, runtime


def _meta_tensors(phase: str, step: int) -> dict[str, np.ndarray]:
    return {
        "meta.phase": np.array([PHASES.index(phase)], dtype=np.float32),
        "meta.step": np.array([step], dtype=np.float32),
    }


def _save(pipeline: Pipeline, path, cfg_echo: str, phase: str, step: int,
          optimizer: AdaptiveOptimizer) -> None:
    tensors = {name: t.data for name, t in pipeline.named_all().items()}
    tensors.update(optimizer.state_tensors())
    tensors.update(_meta_tensors(phase, step))
    save_checkpoint(path, tensors, cfg_echo)


def build_pipeline_from_checkpoint(ckpt: Checkpoint, dtype=np.float32) -> tuple[Pipeline, RunConfig]:
    """Rebuild the model described by a checkpoint's config echo and load it."""
    cfg = config_from_echo(ckpt.config_echo)
    with_adapter = "ase.latents" in ckpt.tensors
    pipeline = Pipeline(pipeline_config(cfg), RngStream(cfg["seed"]), dtype=dtype,
                        with_adapter=with_adapter)
    load_into_pipeline(pipeline, ckpt)
    return pipeline, cfg


def load_into_pipeline(pipeline: Pipeline, ckpt: Checkpoint) -> None:
    params = pipeline.named_all()
    missing = [n for n in params if n not in ckpt.tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {missing[:4]}...")
    for name, t in params.items():
        data = ckpt.tensors[name]
        if tuple(data.shape) != t.shape:
            raise CheckpointError(
                f"checkpoint tensor {name} has shape {data.shape}, expected {t.shape}"
            )
        t.data = data.astype(t.dtype)


def _resume_state(resume_path, phase: str) -> tuple[Checkpoint, int]:
    ckpt = load_checkpoint(resume_path)
    meta_phase = int(round(float(ckpt.tensors.get("meta.phase", np.array([-1.0]))[0])))
    if meta_phase != PHASES.index(phase):
        raise TrainingError(f"resume checkpoint is not a {phase} checkpoint")
    return ckpt, int(round(float(ckpt.tensors["meta.step"][0])))


def pretrain_backbone(cfg: RunConfig, dataset: ToyDataset, out_path,
                      resume: str | None = None) -> TrainResult:
    """Fit denoiser + text encoder + nulls on text-only conditioning."""
    tcfg = TrainConfig.from_run_config(cfg, "pretrain")
    pipeline = Pipeline(pipeline_config(cfg), RngStream(tcfg.seed), with_adapter=False)
    trainable = pipeline.named_backbone()
    optimizer, start = None, 0
    if resume is not None:
        ckpt, start = _resume_state(resume, "pretrain")
        load_into_pipeline(pipeline, ckpt)
        optimizer = AdaptiveOptimizer(trainable, tcfg.lr, tcfg.beta2, tcfg.eps,
                                      tcfg.weight_decay)
        optimizer.load_state(ckpt.tensors)
    optimizer, log, runtime = run_phase(pipeline, trainable, dataset, tcfg,
                                        use_style=False, start_step=start,
                                        optimizer=optimizer,
                                        log_path=f"{out_path}.loss.csv")
    _save(pipeline, out_path, cfg.echo(), "pretrain", tcfg.steps, optimizer)
    return TrainResult(str(out_path), log, log[0][1], log[-1][1], runtime)


def train_adapter(cfg: RunConfig, backbone_path, dataset: ToyDataset, out_path,
                  resume: str | None = None) -> TrainResult:
    """Fit the adapter against a frozen backbone; hard-fails if the backbone moves."""
    tcfg = TrainConfig.from_run_config(cfg, "adapter")
    backbone_ckpt = load_checkpoint(backbone_path)
    pipeline = Pipeline(pipeline_config(cfg), RngStream(tcfg.seed), with_adapter=True)
    backbone = pipeline.named_backbone()
    for name, t in backbone.items():
        if name not in backbone_ckpt.tensors:
            raise CheckpointError(f"backbone checkpoint lacks tensor {name}")
        t.data = backbone_ckpt.tensors[name].astype(t.dtype)
    freeze(backbone)
    trainable = pipeline.named_adapter()
    optimizer, start = None, 0
    if resume is not None:
        ckpt, start = _resume_state(resume, "adapter")
        load_into_pipeline(pipeline, ckpt)
        freeze(backbone)
        optimizer = AdaptiveOptimizer(trainable, tcfg.lr, tcfg.beta2, tcfg.eps,
                                      tcfg.weight_decay)
        optimizer.load_state(ckpt.tensors)
    before = _snapshot(backbone)
    optimizer, log, runtime = run_phase(pipeline, trainable, dataset, tcfg,
                                        use_style=True, start_step=start,
                                        optimizer=optimizer,
                                        log_path=f"{out_path}.loss.csv")
    for name, t in backbone.items():
        if t.grad is not None and np.any(t.grad):
            raise InvariantError(f"frozen parameter {name} accumulated gradient")
        if t.data.tobytes() != before[name]:
            raise InvariantError(f"frozen parameter {name} changed during adapter training")
    _save(pipeline, out_path, cfg.echo(), "adapter", tcfg.steps, optimizer)
    return TrainResult(str(out_path), log, log[0][1], log[-1][1], runtime)
