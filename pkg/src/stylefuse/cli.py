"""Single command-line entry point.

Subcommands: gen-data, train, sample, eval, sweep, inspect-attention,
selftest. Flags override config-file values which override defaults.
Exit codes: 0 success, 1 usage/vocabulary, 2 I/O, 3 numeric or
invariant failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import toyworld as tw
from .aligner import align, attention_entropy
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .errors import (CheckpointError, ConfigError, ContractError, DimensionError,
                     InvariantError, NumericError, TrainingError, VocabularyError)
from .evaluate import alpha_sweep, eval_accuracy, resolve_cells
from .selftest import run_selftest
from .tensor import RngStream, Tensor
from .toyworld import gen_dataset, load_dataset, parse_holdout, write_dataset
from .trainer import build_pipeline_from_checkpoint, pretrain_backbone, train_adapter

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _base_config(args, extra: dict | None = None) -> RunConfig:
    overrides: dict[str, object] = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = int(args.seed)
    if extra:
        overrides.update({k: v for k, v in extra.items() if v is not None})
    return load_config(getattr(args, "config", None), overrides)


def cmd_gen_data(args) -> int:
    cfg = _base_config(args, {
        "toy.samples_per_cell": args.samples_per_cell,
        "toy.holdout": args.holdout,
    })
    holdout = parse_holdout(cfg["toy.holdout"])
    rng = RngStream(cfg["seed"]).child("data")
    ds = gen_dataset(cfg["toy.samples_per_cell"], rng, holdout)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = write_dataset(ds, out)
    (out / "dataset.cfg").write_text(cfg.echo() + "\n", encoding="utf-8")
    print(f"wrote {len(ds.train)} train + {len(ds.holdout)} holdout samples")
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _base_config(args, {
        "train.pretrain_steps": args.steps if args.phase == "pretrain" else None,
        "train.adapter_steps": args.steps if args.phase == "adapter" else None,
        "train.disable_tiaa": args.disable_tiaa,
        "fusion.alpha": args.alpha,
        "fusion.adapter_scale": args.adapter_scale,
    })
    dataset = load_dataset(args.data)
    started = time.time()
    if args.phase == "pretrain":
        result = pretrain_backbone(cfg, dataset, args.out, resume=args.resume)
    else:
        if not args.backbone:
            raise ConfigError("adapter phase requires --backbone CHECKPOINT")
        result = train_adapter(cfg, args.backbone, dataset, args.out, resume=args.resume)
    print(f"phase={args.phase} steps run in {time.time() - started:.1f}s; "
          f"loss {result.first_loss:.4f} -> {result.last_loss:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss log: {result.checkpoint_path}.loss.csv")
    return EXIT_OK


def _load_pipeline(ckpt_path, overrides: dict | None = None):
    ckpt = load_checkpoint(ckpt_path)
    pipeline, cfg = build_pipeline_from_checkpoint(ckpt)
    if overrides:
        cfg = cfg.with_overrides({k: v for k, v in overrides.items() if v is not None})
    return pipeline, cfg


def cmd_sample(args) -> int:
    pipeline, cfg = _load_pipeline(args.ckpt, {
        "fusion.alpha": args.alpha,
        "fusion.adapter_scale": args.adapter_scale,
        "guidance.w": args.w,
        "diffusion.steps": args.steps,
        "diffusion.sampler": args.sampler,
        "seed": args.seed,
    })
    caption = tw.caption_for(args.caption)
    style = None
    if args.style_image:
        style = read_style_image(args.style_image)
    elif pipeline.has_adapter and cfg["fusion.adapter_scale"] != 0.0:
        print("note: no --style-image given; sampling text-only", file=sys.stderr)
    img = pipeline.sample(
        caption, style, seed=cfg["seed"],
        alpha=cfg["fusion.alpha"],
        adapter_scale=cfg["fusion.adapter_scale"] if style is not None else 0.0,
        w=cfg["guidance.w"], steps=cfg["diffusion.steps"], sampler=cfg["diffusion.sampler"],
    )
    tw.write_ppm(args.out, img)
    result = tw.oracle_classify(img)
    print(f"wrote {args.out}")
    print(f"oracle: style={result.style_id} (conf {result.style_confidence:.3f}) "
          f"content={result.content_id} (conf {result.content_confidence:.3f})")
    return EXIT_OK


def read_style_image(path) -> np.ndarray:
    img = tw.read_ppm(path)
    if img.shape != (tw.IMG_SIZE, tw.IMG_SIZE, 3):
        raise DimensionError(f"style image must be {tw.IMG_SIZE}x{tw.IMG_SIZE}, got {img.shape}")
    return img


def _holdout_from_cfg(cfg: RunConfig):
    return parse_holdout(cfg["toy.holdout"])


def cmd_eval(args) -> int:
    pipeline, cfg = _load_pipeline(args.ckpt, {
        "eval.cells": args.cells,
        "eval.seeds": args.seeds,
        "fusion.adapter_scale": args.adapter_scale,
        "seed": args.seed,
    })
    holdout = _holdout_from_cfg(cfg)
    cells = resolve_cells(cfg["eval.cells"], holdout)
    report = eval_accuracy(pipeline, cfg, cells, holdout)
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"report: {args.out}")
    print(f"style_accuracy={report.style_accuracy:.4f} "
          f"content_accuracy={report.content_accuracy:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    pipeline, cfg = _load_pipeline(args.ckpt, {
        "sweep.alphas": args.alphas,
        "eval.seeds": args.seeds,
        "seed": args.seed,
    })
    holdout = _holdout_from_cfg(cfg)
    alphas = [float(a) for a in str(cfg["sweep.alphas"]).split(",")]
    cells = resolve_cells(cfg["sweep.cells"], holdout)
    report = alpha_sweep(pipeline, cfg, alphas, cells, holdout)
    for alpha in alphas:
        print(f"alpha={alpha:g} diversity={report.diversity_by_alpha[alpha]:.6f}")
    print(f"spearman={report.trend['spearman']:.4f} "
          f"adjacent_inversions={report.trend['adjacent_inversions']}")
    if args.out:
        Path(args.out).write_text(report.to_text(), encoding="utf-8")
        print(f"report: {args.out}")
    return EXIT_OK


def cmd_inspect_attention(args) -> int:
    pipeline, cfg = _load_pipeline(args.ckpt, {"seed": args.seed})
    if not pipeline.has_adapter:
        raise ConfigError("inspect-attention needs an adapter checkpoint")
    caption = tw.caption_for(args.caption)
    style = read_style_image(args.style_image)
    style_emb = pipeline.style_tokens(style[None])
    text_emb = pipeline.encode_text(caption[None])
    _, amap = align(style_emb, text_emb, pipeline.tiaa)
    weights = amap.weights.data[0]
    entropy = attention_entropy(amap)[0]
    lines = ["query," + ",".join(f"tok{j}" for j in range(weights.shape[1])) + ",entropy_nats"]
    for i, row in enumerate(weights):
        lines.append(f"{i}," + ",".join(f"{v:.6f}" for v in row) + f",{entropy[i]:.6f}")
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="ascii")
    print(f"attention map: {args.out} ({weights.shape[0]} queries x {weights.shape[1]} tokens)")
    return EXIT_OK


def cmd_selftest(args) -> int:
    ok = run_selftest()
    if not ok:
        raise InvariantError("selftest found failing properties")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="stylefuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key = value run config file")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-data", help="render the styled-shapes dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--samples-per-cell", dest="samples_per_cell", type=int, default=None)
    p.add_argument("--holdout", default=None, help='held-out cells, e.g. "1:2,3:0,0:3"')
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run one training phase")
    common(p)
    p.add_argument("--phase", choices=("pretrain", "adapter"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backbone", default=None, help="pretrained checkpoint (adapter phase)")
    p.add_argument("--resume", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--disable-tiaa", dest="disable_tiaa", action="store_const", const=True,
                   default=None, help="ablation: bypass the text-image aligner")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--adapter-scale", dest="adapter_scale", type=float, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="sample one image from a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--caption", required=True, help="shape word (circle/square/triangle/cross)")
    p.add_argument("--style-image", dest="style_image", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--adapter-scale", dest="adapter_scale", type=float, default=None)
    p.add_argument("--w", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--sampler", choices=("ddpm", "paper"), default=None)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="oracle accuracy over grid cells")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cells", default=None, help="seen | holdout | all | explicit s:c list")
    p.add_argument("--seeds", type=int, default=None)
    p.add_argument("--adapter-scale", dest="adapter_scale", type=float, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="diversity across fusion ratios")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--alphas", default=None)
    p.add_argument("--seeds", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("inspect-attention", help="dump the aligner attention map as CSV")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--style-image", dest="style_image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_inspect_attention)

    p = sub.add_parser("selftest", help="run the built-in invariant suites")
    common(p)
    p.set_defaults(fn=cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (ConfigError, VocabularyError, ContractError, DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, FileNotFoundError, IOError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, TrainingError, InvariantError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
