"""Command-line entry point: ``contnet <command> ...``.

Exit codes: 0 success, 1 user error (bad flags, bad files), 2 internal invariant failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

import numpy as np

from .analysis import GOLDEN, summarize
from .autograd import ShapeError
from .checkpoint import CheckpointFormatError, load_checkpoint
from .data import DatasetFormatError, read_dataset, synth_dataset, write_dataset
from .model import (GROUP_CHOICES, PATCH_CHOICES, PE_CHOICES, ModelConfig, build_network,
                    make_ablation_config, tiny_config, variant_config)
from .train import TrainConfig, TrainingDiverged, evaluate, train

log = logging.getLogger("contnet")


class UsageError(Exception):
    pass


class InvariantError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"sizes must be positive, got {text!r}")
    return h, w


def _groups(text: str):
    return text if text == "depthwise" else int(text)


def _read_json(path: str) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return data


def _model_from(d: dict) -> ModelConfig:
    """A model section is either a full config or ``{"variant": name, ...overrides}``."""
    d = dict(d)
    if "stages" in d:
        return ModelConfig.from_dict(d)
    name = d.pop("variant", "tiny")
    if name == "tiny":
        return tiny_config(**d)
    return variant_config(name, **d)


def _variant_model(args) -> ModelConfig:
    cfg = variant_config(args.variant)
    if getattr(args, "groups", None) is not None:
        cfg = make_ablation_config(cfg, "groups", args.groups)
    if getattr(args, "pe", None) is not None:
        cfg = make_ablation_config(cfg, "pe", args.pe)
    if getattr(args, "patch_schedule", None) is not None:
        cfg = make_ablation_config(cfg, "patch_size", args.patch_schedule)
    if getattr(args, "input", None) is not None:
        cfg.input_size = args.input
    return cfg


def _print_report(report, fmt: str) -> None:
    if fmt == "tsv":
        sys.stdout.write(report.to_tsv())
        return
    print(report.to_text())
    deltas = report.golden_deltas()
    if deltas is not None:
        gflops, mparams = GOLDEN[report.variant]
        print(f"golden params {mparams}M  measured {report.total_params / 1e6:.2f}M  "
              f"delta {deltas['params']:+.2%}")
        print(f"golden flops  {gflops}G  measured {report.total_flops / 1e9:.3f}G  "
              f"delta {deltas['flops']:+.2%}")


def cmd_summary(args) -> int:
    cfg = _variant_model(args)
    report = summarize(build_network(cfg, seed=args.seed), cfg.input_size)
    _print_report(report, args.format)
    return 0


def cmd_shapes(args) -> int:
    cfg = _variant_model(args)
    report = summarize(build_network(cfg, seed=0), cfg.input_size)
    n, c, h, w = report.input_shape
    print(f"input   {h}x{w}x{c}")
    for name, shape in report.stages:
        print(f"{name:<8} {shape[2]}x{shape[3]}x{shape[1]}")
    final = next(r.output_shape for r in reversed(report.rows) if r.name.startswith("stages."))
    print(f"final   {final[2]}x{final[3]}x{final[1]}")
    print(f"logits  {report.rows[-1].output_shape[1]}")
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import TOLERANCE, gradcheck_config, gradient_suite

    cfg = gradcheck_config()
    if args.config:
        data = _read_json(args.config)
        cfg = ModelConfig.from_dict(data) if "stages" in data else gradcheck_config(**data)
    result = gradient_suite(cfg, seed=args.seed, max_entries=args.max_entries)
    errors = {**result["ops"], **{f"network:{k}": v for k, v in result["network"].items()}}
    for name, err in sorted(errors.items(), key=lambda kv: -kv[1])[: args.top]:
        print(f"{name:<48} {err:.3e}")
    print(f"worst relative error {result['worst']:.3e} (tolerance {TOLERANCE:g}) "
          f"in {result['seconds']:.1f}s")
    if not result["passed"]:
        raise InvariantError("gradient check exceeded tolerance")
    return 0


def cmd_synth(args) -> int:
    ds = synth_dataset(args.classes, args.count, args.size, seed=args.seed, channels=args.channels)
    write_dataset(args.out, ds)
    print(f"wrote {args.out}: {args.count} images {args.size[0]}x{args.size[1]}x{args.channels}, "
          f"{args.classes} classes")
    return 0


def _train_setup(data: dict, seed: Optional[int]):
    allowed = {"model", "train"}
    unknown = set(data) - allowed
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    model_cfg = _model_from(data.get("model", {"variant": "tiny"}))
    train_cfg = TrainConfig.from_dict(data.get("train", {}))
    if seed is not None:
        train_cfg.seed = seed
    return model_cfg, train_cfg


def cmd_train(args) -> int:
    data = _read_json(args.config) if args.config else {}
    model_cfg, train_cfg = _train_setup(data, args.seed)
    ds = read_dataset(args.data)
    if ds.shape[0] != model_cfg.in_channels or ds.class_count > model_cfg.num_classes:
        raise UsageError(f"dataset {ds.shape} with {ds.class_count} classes does not fit the model")
    model_cfg.input_size = ds.shape[1:]
    model = build_network(model_cfg, seed=train_cfg.seed, dtype=np.dtype(train_cfg.dtype))
    hist = train(model, ds, train_cfg, checkpoint_path=args.out)
    for i in range(0, len(hist["loss"]), max(1, args.log_every)):
        print(f"step {i:>5}  loss {hist['loss'][i]:.4f}")
    print(f"final loss {hist['loss'][-1]:.4f}  train accuracy {evaluate(model, ds):.4f}")
    print(f"checkpoint {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    ds = read_dataset(args.data)
    acc = evaluate(model, ds, batch_size=args.batch_size)
    print(f"top1 {acc:.4f}  ({int(round(acc * len(ds)))}/{len(ds)})")
    return 0


def cmd_ablate(args) -> int:
    base = tiny_config() if args.variant == "tiny" else variant_config(args.variant)
    if args.input:
        base.input_size = args.input
    axis = {"patch": "patch_size"}.get(args.axis, args.axis)
    choices = {"pe": list(PE_CHOICES), "patch_size": list(PATCH_CHOICES),
               "groups": [str(g) for g in GROUP_CHOICES], "lr": ["split", "uniform"]}[axis]
    selected = args.choice or choices
    for choice in selected:
        if choice not in choices:
            raise UsageError(f"unknown {args.axis} choice {choice!r}; expected one of {choices}")
    rows = []
    for choice in selected:
        cfg = base if axis == "lr" else make_ablation_config(base, axis, choice)
        model = build_network(cfg, seed=args.seed)
        report = summarize(model, cfg.input_size)
        row = {"choice": choice, "params": report.total_params, "flops": report.total_flops}
        if args.train_steps:
            ds = synth_dataset(cfg.num_classes, args.train_count, cfg.input_size, seed=args.seed)
            tc = TrainConfig.sgd(steps=args.train_steps, batch_size=args.batch_size, seed=args.seed)
            if axis == "lr" and choice == "uniform":
                tc.lr_ste = tc.lr_conv
            hist = train(model, ds, tc)
            row["final_loss"] = hist["loss"][-1]
            row["accuracy"] = evaluate(model, ds)
        rows.append(row)
    keys = list(rows[0])
    print("\t".join(keys))
    for row in rows:
        print("\t".join(f"{row[k]:.4f}" if isinstance(row[k], float) else str(row[k]) for k in keys))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="contnet", description="ConTNet reference tools")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    variants = ["ti", "s", "m", "b"]

    s = sub.add_parser("summary", help="per-layer parameter/FLOP report with golden deltas")
    s.add_argument("--variant", choices=variants, required=True)
    s.add_argument("--groups", type=_groups, choices=list(GROUP_CHOICES))
    s.add_argument("--pe", choices=list(PE_CHOICES))
    s.add_argument("--patch-schedule", choices=list(PATCH_CHOICES))
    s.add_argument("--input", type=_size)
    s.add_argument("--format", choices=["text", "tsv"], default="text")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_summary)

    s = sub.add_parser("shapes", help="per-stage feature-map trace")
    s.add_argument("--variant", choices=variants, required=True)
    s.add_argument("--input", type=_size, default=(224, 224))
    s.set_defaults(func=cmd_shapes)

    s = sub.add_parser("gradcheck", help="float64 finite-difference suite")
    s.add_argument("--config", help="JSON model config (full, or overrides of the default tiny net)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-entries", type=int, default=4)
    s.add_argument("--top", type=int, default=10)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a seeded synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=2)
    s.add_argument("--count", type=int, default=512)
    s.add_argument("--size", type=_size, default=(32, 32))
    s.add_argument("--channels", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train from a JSON config on a dataset file")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--log-every", type=int, default=50)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="top-1 accuracy of a checkpoint on a dataset file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--batch-size", type=int, default=256)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="build, summarize and optionally train ablation variants")
    s.add_argument("--axis", choices=["pe", "patch", "groups", "lr"], required=True)
    s.add_argument("--choice", action="append")
    s.add_argument("--variant", choices=variants + ["tiny"], default="s")
    s.add_argument("--input", type=_size)
    s.add_argument("--train-steps", type=int, default=0)
    s.add_argument("--train-count", type=int, default=256)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_ablate)
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ValueError, ShapeError, DatasetFormatError, CheckpointFormatError, OSError,
            TrainingDiverged) as exc:
        print(f"contnet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except InvariantError as exc:
        print(f"contnet {args.command}: invariant failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything else is a bug in the tool, not in the input
        log.exception("internal error")
        print(f"contnet {args.command}: internal error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
