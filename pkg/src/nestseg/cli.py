"""``nestseg`` command line: data generation, training, evaluation, cost tables, pruning, gradcheck."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import List, Optional

from .data import SyntheticConfig, generate_synthetic, load_dataset
from .graph import VARIANTS, ArchitectureSpec, build, flop_count, param_count, parse_key_values, parse_mode, parse_spec_fields
from .trainer import Checkpoint, TrainConfig, evaluate, train, write_metrics_csv

logger = logging.getLogger("nestseg")


class CommandError(Exception):
    """A user-facing failure: printed without traceback, exit status 2."""


def _threads() -> int:
    raw = os.environ.get("NESTSEG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CommandError(f"NESTSEG_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise CommandError(f"NESTSEG_THREADS must be >= 1, got {n}")
    return n


def _parse_size(text: str):
    try:
        parts = [int(p) for p in text.lower().replace("x", ",").split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid size {text!r}; use N or HxW") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"invalid size {text!r}; use N or HxW with positive values")
    return tuple(parts)


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise CommandError(f"output directory {out} is not writable")
    return out


def resolve_arch(args) -> ArchitectureSpec:
    """Build the spec from ``--arch`` (file or preset) plus explicit flag overrides."""
    arch = args.arch
    overrides = {}
    if arch in VARIANTS:
        overrides["variant"] = arch
    elif Path(arch).is_file():
        try:
            overrides = parse_spec_fields(parse_key_values(Path(arch).read_text()))
        except ValueError as exc:
            raise CommandError(f"{arch}: {exc}") from None
    else:
        raise CommandError(f"--arch {arch!r} is neither a preset {VARIANTS} nor an existing spec file")
    variant = overrides.get("variant", "unetpp")
    if getattr(args, "depth", None) is not None:
        overrides["depth"] = args.depth
    if getattr(args, "base_width", None) is not None:
        overrides.pop("widths", None)
        overrides["base_width"] = args.base_width
    if getattr(args, "no_deep_supervision", False):
        overrides["deep_supervision"] = False
    if getattr(args, "input_size", None) is not None:
        overrides["input_size"] = args.input_size
    overrides.pop("variant", None)
    try:
        return ArchitectureSpec.preset(variant, **overrides)
    except ValueError as exc:
        raise CommandError(str(exc)) from None


def resolve_train_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CommandError(f"train config not found: {path}")
        kv = parse_key_values(path.read_text())
        types = {f.name: f.type for f in fields(TrainConfig)}
        unknown = set(kv) - set(types)
        if unknown:
            raise CommandError(f"{path}: unknown train config keys {sorted(unknown)}")
        cast = {k: (int(v) if types[k] in (int, "int") else float(v)) for k, v in kv.items()}
        cfg = replace(cfg, **cast)
    flag_map = {"lr": "learning_rate", "epochs": "max_epochs", "batch_size": "batch_size",
                "patience": "early_stop_patience", "seed": "seed"}
    updates = {dst: getattr(args, src) for src, dst in flag_map.items() if getattr(args, src, None) is not None}
    try:
        return replace(cfg, **updates)
    except ValueError as exc:
        raise CommandError(str(exc)) from None


def _load_splits(manifest, names):
    try:
        return load_dataset(manifest, names)
    except (OSError, ValueError) as exc:
        raise CommandError(str(exc)) from None


def _echo_config(out: Path, name: str, items) -> None:
    (out / name).write_text("".join(f"{k} = {v}\n" for k, v in items))


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = _out_dir(args.out)
    cfg = SyntheticConfig(seed=args.seed, count=args.count, image_size=args.size,
                          noise=args.noise, depth=args.depth or 5)
    manifest = generate_synthetic(cfg, out)
    counts = manifest.counts()
    print(f"wrote {len(manifest.entries)} samples to {manifest.path} "
          f"(train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return 0


def cmd_train(args) -> int:
    spec = resolve_arch(args)
    cfg = resolve_train_config(args)
    if not Path(args.data).is_file():
        raise CommandError(f"manifest not found: {args.data}")
    out = _out_dir(args.out)
    splits = _load_splits(args.data, ("train", "val"))
    (out / "arch.txt").write_text(spec.to_text())
    _echo_config(out, "train_config.txt", asdict(cfg).items())
    graph = build(spec, seed=cfg.seed)
    try:
        result = train(graph, splits, cfg)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    result.checkpoint.save(out / "checkpoint.unpp")
    write_metrics_csv(out / "metrics.csv", result.history, with_time=args.timings)
    best = result.checkpoint
    print(f"best epoch {best.epoch} val iou {best.best_val_iou:.4f}; "
          f"{'early stop' if result.stopped_early else 'diverged' if result.diverged else 'max epochs'} "
          f"after {len(result.history) // 2} epochs -> {out / 'checkpoint.unpp'}")
    return 0


def _load_checkpoint(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except FileNotFoundError:
        raise CommandError(f"checkpoint not found: {path}") from None
    except ValueError as exc:
        raise CommandError(f"{path}: {exc}") from None


def _graph_from_checkpoint(args):
    ckpt = _load_checkpoint(args.checkpoint)
    spec = resolve_arch(args)
    graph = build(spec)
    try:
        ckpt.restore(graph)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    return graph, ckpt


def cmd_eval(args) -> int:
    try:
        parse_mode(args.mode)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    graph, ckpt = _graph_from_checkpoint(args)
    split = _load_splits(args.data, (args.split,))[args.split]
    try:
        rec = evaluate(graph, ckpt, split, args.mode, batch_size=args.batch_size, epoch=ckpt.epoch)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    out = _out_dir(args.out)
    name = "eval_" + args.mode.replace(":", "") + ".csv"
    write_metrics_csv(out / name, [rec], with_time=args.timings)
    print(f"{rec.mode} {rec.split}: loss {rec.loss:.4f} iou {rec.iou:.4f} dice {rec.dice:.4f} "
          f"params {rec.params} flops {rec.flops} -> {out / name}")
    return 0


def params_table(depth: int = 5, input_size=(96, 96), input_channels: int = 1) -> List[List]:
    rows = []
    for label, variant, ds in (("unet", "unet", False), ("wide_unet", "wide_unet", False),
                               ("unetpp_nods", "unetpp", False), ("unetpp_ds", "unetpp", True)):
        spec = ArchitectureSpec.preset(variant, depth=depth, deep_supervision=ds,
                                       input_size=input_size, input_channels=input_channels)
        graph = build(spec)
        rows.append([label, param_count(graph), flop_count(graph)])
    return rows


def cmd_params(args) -> int:
    try:
        rows = params_table(args.depth or 5, args.input_size or (96, 96), args.input_channels)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    lines = ["arch,params,flops"] + [f"{a},{p},{f}" for a, p, f in rows]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        (_out_dir(args.out) / "params.csv").write_text(text)
    return 0


def cmd_prune_report(args) -> int:
    from .pruning import pruning_report, write_report_csv

    graph, ckpt = _graph_from_checkpoint(args)
    split = _load_splits(args.data, (args.split,))[args.split]
    try:
        rows = pruning_report(graph, split, ckpt, n_images=args.images, warmup=args.warmup)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    out = _out_dir(args.out)
    write_report_csv(out / "prune_report.csv", rows)
    for r in rows:
        print(f"L{r.level}: params {r.params} flops {r.flops} "
              f"{r.seconds_per_image * 1e3:.2f} ms/img iou {r.iou:.4f} dice {r.dice:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_battery

    try:
        results = run_battery(args.op or None, instances=args.instances, seed=args.seed,
                              eps=args.eps, tol=args.tol)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    ok = True
    for name, rep in results.items():
        print(f"{name:24s} {rep}")
        ok &= rep.passed
    print("all passed" if ok else "FAILED")
    return 0 if ok else 1


# -- argument parsing ----------------------------------------------------------------

def _add_arch_flags(p, required=True):
    p.add_argument("--arch", required=required, default=None if required else "unetpp",
                   help="spec file or preset: unet, wide_unet, unetpp")
    p.add_argument("--depth", type=int, help="override depth (number of resolution levels)")
    p.add_argument("--base-width", type=int, help="override widths with base * 2**level")
    p.add_argument("--no-deep-supervision", action="store_true", help="single head on the last node")
    p.add_argument("--input-size", type=_parse_size, help="override input size, N or HxW")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nestseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic blob dataset and manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=_parse_size, default=(96, 96), help="N or HxW")
    p.add_argument("--noise", type=float, default=SyntheticConfig.noise)
    p.add_argument("--depth", type=int, default=5, help="network depth the sizes must suit")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train with Adam and early stopping")
    _add_arch_flags(p)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat key = value train config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--timings", action="store_true", help="record wall time in metrics.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint in accurate or fast mode")
    _add_arch_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--mode", default="accurate", help="accurate or fast:<d>")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timings", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="parameter and FLOP counts of the three architectures")
    p.add_argument("--depth", type=int)
    p.add_argument("--input-size", type=_parse_size)
    p.add_argument("--input-channels", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("prune-report", help="cost and accuracy of every pruning level")
    _add_arch_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--images", type=int, help="images to time (default: whole split)")
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prune_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the loss")
    p.add_argument("--op", action="append", help="restrict to one case (repeatable)")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except CommandError as exc:
        print(f"nestseg {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
