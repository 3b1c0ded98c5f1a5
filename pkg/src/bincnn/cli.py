"""Command-line surface: train, eval, export, infer, budget, dump-features.

One binary with subcommands. Any flag may also be supplied by a key=value
config file via --config; explicit command-line flags win. Errors print one
machine-parseable JSON line to stderr and exit nonzero.
"""

import argparse
import csv
import json
import sys

from . import budget as budget_mod
from .data import mnist_load
from .errors import ConfigError, DivergenceError, FormatError, IntegrityError, ShapeError
from .frozen import export_frozen, load_frozen
from .network import ARCHS, NONLINEARITIES, make_spec
from .training import (
    OptimConfig,
    StagePlan,
    STAGE_MODES,
    evaluate,
    restore_network,
    save_checkpoint,
    train,
)

_HANDLED = (ConfigError, ShapeError, FormatError, IntegrityError, DivergenceError,
            FileNotFoundError, NotADirectoryError)


def _add_spec_flags(p):
    p.add_argument("--arch", choices=ARCHS, help="network preset")
    p.add_argument("--width", type=int, help="stage-1 width (derived) or stem width (toy)")
    p.add_argument("--groups", type=int, help="conv groups")
    p.add_argument("--nonlinearity", choices=NONLINEARITIES + ("schedule",),
                   help="block nonlinearity (toy) or 'schedule'")
    p.add_argument("--num-classes", type=int, help="classifier outputs")
    p.add_argument("--real-conv", action="store_true", default=None,
                   help="toy: use real-valued convs (the linear control model)")
    p.add_argument("--stem-pool", action="store_true", default=None,
                   help="toy: add a 3x3/s2 maxpool after the stem")
    p.add_argument("--target-budget", type=float,
                   help="auto-tune derived width to this effective-MFLOPs class")


def _spec_from_args(args):
    if args.arch is None:
        raise ConfigError("--arch is required (directly or via --config)")
    kw = {}
    if args.real_conv is not None:
        kw["toy_real_conv"] = args.real_conv
    if args.stem_pool is not None:
        kw["toy_stem_pool"] = args.stem_pool
    spec = make_spec(args.arch, width=args.width, groups=args.groups or 1,
                     nonlinearity=args.nonlinearity, num_classes=args.num_classes, **kw)
    if spec.arch.startswith("derived") and spec.width == 0:
        target = args.target_budget
        if target is None:
            target = 135 if spec.arch == "derived44" else 90
        from dataclasses import replace

        spec = replace(spec, width=budget_mod.tune_width(spec, target))
    return spec


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bincnn",
        description="1-bit CNN engine: training, bit-packed inference, budget audit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_spec_flags(p)
    p.add_argument("--config", help="key=value file supplying any flag (flags win)")
    p.add_argument("--data-dir", help="directory with the IDX dataset files")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--schedule", choices=("multistep", "cosine"))
    p.add_argument("--milestones", help="comma-separated epoch indices for multistep")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--stage", help="comma-separated stage names: "
                                   + ",".join(sorted(STAGE_MODES)))
    p.add_argument("--teacher", help="checkpoint whose outputs provide soft labels")
    p.add_argument("--out", help="checkpoint output path")
    p.add_argument("--log", help="JSON-lines metrics path")

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("--config", help="key=value file supplying any flag (flags win)")
    p.add_argument("--model", help="checkpoint path")
    p.add_argument("--data-dir")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("export", help="freeze a checkpoint into a FrozenModel")
    p.add_argument("--config", help="key=value file supplying any flag (flags win)")
    p.add_argument("--model", help="checkpoint path")
    p.add_argument("--out", help="FrozenModel output path")
    p.add_argument("--nudge-zeros", action="store_true", default=None,
                   help="perturb exact-zero proxy weights to -epsilon instead of failing")

    p = sub.add_parser("infer", help="bit-domain inference from a FrozenModel")
    p.add_argument("--config", help="key=value file supplying any flag (flags win)")
    p.add_argument("--model", help="FrozenModel path")
    p.add_argument("--data-dir")
    p.add_argument("--out", help="optional CSV of per-sample predictions")
    p.add_argument("--limit", type=int, help="classify only the first N test images")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("budget", help="FLOPs/BOPs/params audit of a preset")
    _add_spec_flags(p)
    p.add_argument("--config", help="key=value file supplying any flag (flags win)")
    p.add_argument("--format", choices=("table", "json", "csv"))
    p.add_argument("--out", help="write the report here instead of stdout")

    p = sub.add_parser("dump-features", help="per-sample features + discrepancies CSV")
    p.add_argument("--config", help="key=value file supplying any flag (flags win)")
    p.add_argument("--model", help="checkpoint path")
    p.add_argument("--data-dir")
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--limit", type=int)
    p.add_argument("--seed", type=int)
    return parser


def _apply_config_file(args):
    """Fill argparse gaps from a key=value file; explicit flags win."""
    if getattr(args, "config", None) is None:
        return args
    with open(args.config) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(
                    f"{args.config}:{lineno}: expected key=value, got {line!r}"
                )
            key, value = (s.strip() for s in line.split("=", 1))
            attr = key.replace("-", "_")
            if not hasattr(args, attr):
                raise ConfigError(f"{args.config}:{lineno}: unknown flag {key!r}")
            if getattr(args, attr) is None:
                if value.lower() in ("true", "false"):
                    parsed = value.lower() == "true"
                elif attr in ("width", "groups", "num_classes", "epochs", "batch_size",
                              "seed", "limit"):
                    parsed = int(value)
                elif attr in ("lr", "weight_decay", "target_budget"):
                    parsed = float(value)
                else:
                    parsed = value
                setattr(args, attr, parsed)
    return args


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise ConfigError(f"--{n.replace('_', '-')} is required")


def cmd_train(args):
    _require(args, "data_dir", "out")
    spec = _spec_from_args(args)
    milestones = (45, 55)
    if args.milestones is not None:
        milestones = tuple(int(s) for s in args.milestones.split(",") if s != "")
    optim = OptimConfig(
        lr=0.01 if args.lr is None else args.lr,
        weight_decay=args.weight_decay or 0.0,
        schedule=args.schedule or "multistep",
        milestones=milestones,
        epochs=60 if args.epochs is None else args.epochs,
        batch_size=args.batch_size or 128,
    )
    plan = None
    if args.stage:
        teacher = None
        if args.teacher:
            teacher, _ = restore_network(args.teacher)
        plan = StagePlan(stages=tuple(args.stage.split(",")), teacher=teacher)
    data = mnist_load(args.data_dir)
    network, metrics = train(spec, optim, data, plan=plan, seed=args.seed or 0,
                             log_path=args.log, verbose=True)
    save_checkpoint(args.out, network, meta={"final": metrics[-1]})
    print(json.dumps({"checkpoint": args.out, "final": metrics[-1]}))
    return 0


def cmd_eval(args):
    _require(args, "model", "data_dir")
    network, _ = restore_network(args.model)
    data = mnist_load(args.data_dir)
    acc = evaluate(network, data.test)
    print(json.dumps({"top1": acc, "n": len(data.test)}))
    return 0


def cmd_export(args):
    _require(args, "model", "out")
    network, _ = restore_network(args.model)
    export_frozen(network, args.out, nudge_zeros=bool(args.nudge_zeros))
    print(json.dumps({"frozen": args.out}))
    return 0


def cmd_infer(args):
    _require(args, "model", "data_dir")
    fm = load_frozen(args.model)
    data = mnist_load(args.data_dir)
    images, labels = data.test.images, data.test.labels
    if args.limit:
        images, labels = images[: args.limit], labels[: args.limit]
    pred = fm.predict(images)
    acc = float((pred == labels).mean())
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample_id", "label", "prediction"])
            for i, (y, p) in enumerate(zip(labels, pred)):
                w.writerow([i, int(y), int(p)])
    print(json.dumps({"top1": acc, "n": int(images.shape[0])}))
    return 0


def cmd_budget(args):
    spec = _spec_from_args(args)
    report = budget_mod.count(spec)
    fmt = args.format or "table"
    if fmt == "json":
        text = report.to_json()
    elif fmt == "csv":
        text = report.to_csv()
    else:
        lines = [f"{'name':24s} {'kind':20s} {'FLOPs':>14s} {'BOPs':>14s} "
                 f"{'params_f':>10s} {'params_b':>10s}"]
        for r in report.rows:
            lines.append(f"{r.name:24s} {r.kind:20s} {r.flops:14d} {r.bops:14d} "
                         f"{r.params_float:10d} {r.params_binary:10d}")
        lines.append("")
        lines.append(f"width={spec.width}  " + report.summary())
        text = "\n".join(lines)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text if text.endswith("\n") else text + "\n")
    else:
        print(text)
    return 0


def cmd_dump_features(args):
    _require(args, "model", "data_dir", "out")
    network, _ = restore_network(args.model)
    data = mnist_load(args.data_dir)
    images, labels = data.test.images, data.test.labels
    if args.limit:
        images, labels = images[: args.limit], labels[: args.limit]
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        header = None
        for lo in range(0, images.shape[0], 256):
            batch = images[lo : lo + 256]
            stats = {"discrepancy": {}, "per_sample": True}
            network.forward(batch, train=False, stats=stats)
            feats = network.features
            layer_names = sorted(stats["discrepancy"])
            if header is None:
                header = (
                    ["sample_id", "label"]
                    + [f"feature_{i}" for i in range(feats.shape[1])]
                    + [f"discrepancy_{n}" for n in layer_names]
                )
                writer.writerow(header)
            discs = [stats["discrepancy"][n] for n in layer_names]
            for i in range(batch.shape[0]):
                row = [lo + i, int(labels[lo + i])]
                row += [f"{v:.6g}" for v in feats[i]]
                row += [f"{d[i]:.6g}" for d in discs]
                writer.writerow(row)
    print(json.dumps({"features": args.out, "n": int(images.shape[0])}))
    return 0


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "export": cmd_export,
    "infer": cmd_infer,
    "budget": cmd_budget,
    "dump-features": cmd_dump_features,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config_file(args)
        return _COMMANDS[args.command](args)
    except _HANDLED as e:
        sys.stderr.write(
            json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n"
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
