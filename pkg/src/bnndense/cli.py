"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import config as cfgtext
from .bench import bench_kernel
from .complexity import ATTENTION_NOTE, LayerCostSpec, attention_speedup, model_report, upsample_speedup
from .data import gen_dataset, read_dataset, stack, write_dataset
from .exceptions import ConfigError, DataError, DivergenceError, FormatError, ShapeError
from .network import ModelConfig, build_model, load_checkpoint
from .train import TrainConfig, ablate, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _load_configs(path):
    if path is None:
        return ModelConfig(), TrainConfig()
    return cfgtext.load_file(path, ModelConfig, TrainConfig)


def cmd_gen(args):
    samples = gen_dataset(args.seed, args.n, args.size)
    write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_train(args):
    model_cfg, train_cfg = _load_configs(args.config)
    result = train(train_cfg, model_cfg, on_epoch=lambda e: print(e.line(), flush=True))
    with open(args.out, "wb") as fh:
        fh.write(result.checkpoint)
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            fh.write(result.log_text())
    print(f"final val_miou={result.final_miou:.6f}")
    print(f"checkpoint={args.out}")


def cmd_eval(args):
    try:
        with open(args.ckpt, "rb") as fh:
            model = load_checkpoint(fh.read())
    except (OSError, FormatError) as exc:
        raise DataError(f"cannot load checkpoint: {exc}") from exc
    images, masks = stack(read_dataset(args.data))
    try:
        report = evaluate(model, images, masks)
    except ShapeError as exc:
        raise DataError(str(exc)) from exc
    for name in ("miou", "maxf"):
        if name in report:
            print(f"{name}={report[name]:.6f}")
    for i, v in enumerate(report["iou"]):
        print(f"iou_class{i}={v:.6f}")
    print(f"pixels={report['pixels']}")
    header = ["miou", "maxf"] + [f"iou_class{i}" for i in range(len(report["iou"]))]
    values = [report["miou"], report.get("maxf", float("nan"))] + report["iou"]
    print(",".join(header))
    print(",".join(f"{v:.6f}" for v in values))


def cmd_bench(args):
    spec = LayerCostSpec(args.cin, args.cout, args.k, args.k, args.hw, args.hw, args.hw, args.hw)
    for line in bench_kernel(spec, args.repeats).lines():
        print(line)


def cmd_complexity(args):
    model_cfg, _ = _load_configs(args.config)
    report = model_report(build_model(model_cfg))
    print(report.to_text(), end="")
    print()
    print(report.to_csv(), end="")
    ref = LayerCostSpec(256, 256, 3, 3, 40, 40, 80, 80, K=5)
    print()
    print(f"reference layer (256->256, 3x3, 40x40 -> 80x80, K=5): "
          f"upsample_sigma={upsample_speedup(ref):.4f} attention_sigma={attention_speedup(ref):.4f}")
    print(ATTENTION_NOTE)


def cmd_ablate(args):
    model_cfg, train_cfg = _load_configs(args.config)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {args.seeds!r}") from exc
    if not seeds:
        raise ConfigError("need at least one seed")

    def progress(label, seed, res):
        print(f"run variant={label!r} seed={seed} val_miou={res.final_miou:.6f}", flush=True)

    rows = ablate(args.table, seeds, train_cfg, model_cfg, on_run=progress)
    print("variant," + ",".join(f"seed{s}" for s in seeds) + ",mean")
    for row in rows:
        print(f"{row.label}," + ",".join(f"{v:.6f}" for v in row.scores) + f",{row.mean:.6f}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bnndense", description="Binary dense-prediction toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic dataset directory")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="two-stage training from a config file")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--log")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time the packed kernel against a direct float conv")
    b.add_argument("--cin", type=int, default=256)
    b.add_argument("--cout", type=int, default=256)
    b.add_argument("--k", type=int, default=3)
    b.add_argument("--hw", type=int, default=40)
    b.add_argument("--repeats", type=int, default=3)
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("complexity", help="analytic cost report for a model config")
    c.add_argument("--config")
    c.set_defaults(func=cmd_complexity)

    a = sub.add_parser("ablate", help="train ablation variants over several seeds")
    a.add_argument("--table", type=int, choices=(4, 5, 6), required=True)
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--config")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
