"""``veloxnet`` command line: summary, gradcheck, train, eval, bench, synth.

Exit codes: 0 success, 1 usage or configuration error, 2 data/format
error, 3 numeric failure (non-finite values or a failed gradient check).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DimensionError, NumericError, StateError, UsageError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _positive(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n


def _non_negative(value: str) -> int:
    n = int(value)
    if n < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value}")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="veloxnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    models = ("veloxnet", "squeezenet")
    presets = ("table-i", "paper-eq")

    s = sub.add_parser("summary", help="per-layer parameter and MAC report")
    s.add_argument("--model", choices=models, default="veloxnet")
    s.add_argument("--preset", choices=presets, default="table-i")
    s.add_argument("--ablation", default="full", help="e.g. depth4 or no_sgu+d128")
    s.add_argument("--classes", type=_positive, default=5)
    s.add_argument("--input", type=_positive, default=224)
    s.add_argument("--format", choices=("text", "csv", "json"), default="text")

    g = sub.add_parser("gradcheck", help="double-precision finite-difference suite")
    g.add_argument("--model", choices=models, default="veloxnet")
    g.add_argument("--preset", choices=presets, default="table-i")
    g.add_argument("--reduced", action="store_true", help="tiny instance (d=12, K=3)")
    g.add_argument("--tol", type=float, default=1e-4, help="end-to-end tolerance")
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="Adam training with checkpoint-on-best-val")
    t.add_argument("--data", required=True)
    t.add_argument("--model", choices=models, default="veloxnet")
    t.add_argument("--preset", choices=presets, default="table-i")
    t.add_argument("--epochs", type=_non_negative, default=300)
    t.add_argument("--lr", type=float, default=0.001)
    t.add_argument("--batch", type=_positive, default=32)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", required=True, help="CSV training log path")

    e = sub.add_parser("eval", help="metrics of a checkpoint on one split")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--json", help="write the metrics report here")

    b = sub.add_parser("bench", help="infer-mode throughput")
    b.add_argument("--model", choices=models, default="veloxnet")
    b.add_argument("--preset", choices=presets, default="table-i")
    b.add_argument("--classes", type=_positive, default=5)
    b.add_argument("--batch", type=_positive, default=1)
    b.add_argument("--iters", type=_positive, default=10)
    b.add_argument("--warmup", type=_non_negative, default=2)
    b.add_argument("--seed", type=int, default=0)

    y = sub.add_parser("synth", help="write the synthetic class-separable dataset")
    y.add_argument("--out", required=True)
    y.add_argument("--classes", type=_positive, default=5)
    y.add_argument("--per-class", type=_positive, default=8)
    y.add_argument("--seed", type=int, default=0)
    return p


def _echo(args, out) -> None:
    items = {k: v for k, v in vars(args).items() if k != "command"}
    print(f"# veloxnet {args.command} " + " ".join(f"{k}={v}" for k, v in items.items()), file=out)


def _summary(args, out) -> int:
    from .accounting import cost_report, emit_summary
    from .models import build_squeezenet, build_veloxnet

    if args.model == "veloxnet":
        graph = build_veloxnet(args.classes, args.preset, args.ablation.split("+"), args.input)
    else:
        graph = build_squeezenet(args.classes, args.input)
    out.write(emit_summary(cost_report(graph), args.format))
    return EXIT_OK


def _gradcheck(args, out) -> int:
    from .gradcheck import LAYER_TOL, layer_suite, model_check
    from .models import REDUCED_SQUEEZENET, REDUCED_VELOXNET, build_squeezenet, build_veloxnet

    results = layer_suite(args.seed, min(LAYER_TOL, args.tol))
    if args.model == "veloxnet":
        kw = REDUCED_VELOXNET if args.reduced else dict(classes=5)
        graph = build_veloxnet(preset=args.preset, **kw)
    else:
        graph = build_squeezenet(**(REDUCED_SQUEEZENET if args.reduced else dict(classes=5)))
    # full-size models get a handful of sampled parameters instead of 1%
    if args.reduced:
        results.append(model_check(graph, args.seed, tol=args.tol))
    else:
        results.append(model_check(graph, args.seed, fraction=0.0, min_samples=4, batch=1, tol=args.tol))
    for r in results:
        print(r.line(), file=out)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed", file=out)
    return EXIT_OK if not failed else EXIT_NUMERIC


def _train(args, out) -> int:
    from .data import load_manifest
    from .models import Model, build_model_graph
    from .train import fit

    manifest = load_manifest(args.data)
    graph = build_model_graph(args.model, manifest.classes, args.preset)
    model = Model(graph, seed=args.seed)

    def report(rec):
        print(f"epoch {rec.epoch} train_loss={rec.train_loss:.6f} train_acc={rec.train_accuracy:.4f} "
              f"val_loss={rec.val_loss:.6f} val_weighted_f1={rec.val_weighted_f1:.4f}", file=out)

    fit(model, manifest, args.epochs, args.lr, args.batch, args.seed, args.out, args.log, report)
    if not Path(args.out).exists():
        print("# no checkpoint written (no epochs run)", file=out)
    return EXIT_OK


def _eval(args, out) -> int:
    from .data import load_checkpoint, load_manifest
    from .train import evaluate

    manifest = load_manifest(args.data)
    model = load_checkpoint(args.ckpt)
    if model.graph.classes != manifest.classes:
        raise DataError(f"checkpoint has {model.graph.classes} classes, dataset has {manifest.classes}")
    report = evaluate(model, manifest, args.split)
    text = report.to_json()
    if args.json:
        Path(args.json).write_text(text, encoding="utf-8")
    print(f"split={args.split} accuracy={report.accuracy:.4f} weighted_precision={report.weighted_precision:.4f} "
          f"weighted_recall={report.weighted_recall:.4f} weighted_f1={report.weighted_f1:.4f} "
          f"loss={report.loss:.6f}", file=out)
    return EXIT_OK


def _bench(args, out) -> int:
    from .models import Model, build_model_graph
    from .train import bench

    model = Model(build_model_graph(args.model, args.classes, args.preset), seed=args.seed)
    rep = bench(model, args.batch, args.iters, args.warmup, args.seed)
    print(f"# {rep.header()}", file=out)
    print(f"# host: {rep.host}", file=out)
    print(f"images_per_second={rep.images_per_second:.3f} median_latency_s={rep.median_latency_s:.5f}", file=out)
    return EXIT_OK


def _synth(args, out) -> int:
    from .data import synth_dataset

    man = synth_dataset(args.out, args.classes, args.per_class, args.seed)
    counts = {s: len(man.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(man.entries)} samples to {args.out} " + " ".join(f"{k}={v}" for k, v in counts.items()),
          file=out)
    return EXIT_OK


_COMMANDS = {"summary": _summary, "gradcheck": _gradcheck, "train": _train, "eval": _eval,
             "bench": _bench, "synth": _synth}


def run(argv=None, out=None) -> int:
    out = out if out is not None else sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    _echo(args, out)
    try:
        return _COMMANDS[args.command](args, out)
    except (UsageError, ConfigError) as exc:
        code, exc_ = EXIT_USAGE, exc
    except (DataError, DimensionError, StateError, OSError) as exc:
        code, exc_ = EXIT_DATA, exc
    except (NumericError, FloatingPointError) as exc:
        code, exc_ = EXIT_NUMERIC, exc
    print(f"error: {exc_}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
