"""Command-line entry point.

Subcommands: gen, train, eval, audit-equivariance, scaling, convert, experiment.
Every command reads an optional JSON config (``--config``), applies
``--set key=value`` overrides, validates the result, and echoes the effective
configuration into its output directory.

Exit codes: 0 success, 2 validation failure, 3 schema/config error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from eq4d.errors import CountMismatch, Eq4dError, InvalidConfig, MalformedScan, SchemaError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CONFIG = 3
EXIT_IO = 4


def _overrides(args) -> list[str]:
    sets = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        sets.append(f"train.seed={args.seed}")
    if getattr(args, "precision", None) is not None:
        sets.append(f'precision="{args.precision}"')
    return sets


def _config(args, extra: Sequence[str] = ()):
    from eq4d.config import load_config

    return load_config(args.config, _overrides(args) + list(extra))


def _echo(cfg, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")


def _say(args, text: str) -> None:
    if not args.quiet:
        print(text, flush=True)


def cmd_gen(args) -> int:
    from eq4d.training import generate_dataset

    extra = [f'data.root="{args.out}"'] if args.out else []
    cfg = _config(args, extra)
    root = generate_dataset(cfg)
    _echo(cfg, root)
    _say(args, f"wrote {cfg.data.num_train} train and {cfg.data.num_val} val sequences to {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    from eq4d.diffcore import precision
    from eq4d.training import train

    extra = []
    if args.data:
        extra.append(f'data.root="{args.data}"')
    if args.out:
        extra.append(f'out="{args.out}"')
    if args.epochs is not None:
        extra.append(f"train.epochs={args.epochs}")
    cfg = _config(args, extra)
    out = Path(cfg.out)
    _echo(cfg, out)

    def progress(row):
        shown = {k: (round(v, 4) if isinstance(v, float) else v) for k, v in row.items()}
        _say(args, json.dumps(shown))

    with precision(cfg.precision):
        result = train(cfg, out_dir=out, resume=args.resume, progress=progress)
    if result.report is not None:
        (out / "metrics.json").write_text(result.report.to_json() + "\n")
        (out / "metrics.csv").write_text(result.report.to_csv(cfg.config_hash()))
    _say(args, f"checkpoint: {out / 'last.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from eq4d.diffcore import precision
    from eq4d.training import evaluate, evaluate_labels, load_split, load_trained

    if (args.checkpoint is None) == (args.predictions is None):
        raise InvalidConfig("eval needs exactly one of --checkpoint or --predictions")
    extra = [f'data.root="{args.data}"'] if args.data else []
    if args.checkpoint is not None:
        cfg, model = load_trained(args.checkpoint, _overrides(args) + extra)
    else:
        cfg, model = _config(args, extra), None
    out = Path(args.out)
    _echo(cfg, out)
    scenes = load_split(Path(cfg.data.root), args.split, cfg.eval.max_scenes)
    if model is None:
        report = evaluate_labels(Path(args.predictions), scenes)
    else:
        with precision(cfg.precision):
            report = evaluate(model, scenes, cfg, write_to=out)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    (out / "metrics.csv").write_text(report.to_csv(cfg.config_hash()))
    _say(args, f"lstq={report.lstq:.4f} s_assoc={report.s_assoc:.4f} s_cls={report.s_cls:.4f} pq={report.pq:.4f}")
    return EXIT_OK


def cmd_audit(args) -> int:
    from eq4d.audit import audit_layers, audit_model
    from eq4d.diffcore import single_threaded
    from eq4d.training import load_trained

    single_threaded()
    if args.checkpoint is not None:
        cfg, model = load_trained(args.checkpoint, _overrides(args))
        result = audit_model(model, cfg.audit.clouds, cfg.audit.max_points, cfg.audit.seed)
    else:
        cfg = _config(args)
        a = cfg.audit
        result = audit_layers(a.orders, a.clouds, a.max_points, cfg.precision, a.seed,
                              corrupt=args.corrupt_permutation)
    out = Path(args.out)
    _echo(cfg, out)
    (out / "audit.csv").write_text(result.to_csv(cfg.config_hash()))
    bad = [r for r in result.rows if not r.ok]
    _say(args, f"{len(result.rows)} rows, worst residual {result.worst():.3e}, "
               f"{len(bad)} over tolerance, {result.seconds:.1f}s")
    for r in bad[:10]:
        _say(args, f"  FAIL {r.layer} n={r.n} anchor={r.anchor}: {r.max_residual:.3e}")
    return EXIT_OK if not bad else EXIT_VALIDATION


def cmd_scaling(args) -> int:
    from eq4d.scaling import below_baseline, scaling_table, table_csv

    extra = []
    if args.K is not None:
        extra.append(f"scaling.K={args.K}")
    if args.orders:
        extra.append(f"scaling.orders={json.dumps([int(x) for x in args.orders.split(',')])}")
    cfg = _config(args, extra)
    rows = scaling_table(cfg.scaling.K, cfg.scaling.orders)
    text = table_csv(rows, cfg.config_hash())
    if args.out:
        out = Path(args.out)
        _echo(cfg, out)
        (out / "scaling.csv").write_text(text)
    if not args.quiet:
        sys.stdout.write(text)
    return EXIT_OK if below_baseline(rows) else EXIT_VALIDATION


def cmd_convert(args) -> int:
    from eq4d.pointcloud import decode_labels, load_scan, write_ply

    cloud = load_scan(Path(args.scan), Path(args.label) if args.label else None)
    extra = {}
    if args.prediction:
        sem, inst = decode_labels(Path(args.prediction).read_bytes(), len(cloud))
        extra = {"pred_semantic": sem, "pred_instance": inst}
    write_ply(Path(args.out), cloud, extra)
    _say(args, f"wrote {len(cloud)} points to {args.out}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    from eq4d.diffcore import precision
    from eq4d.experiments import pooling_variants, run_variants, trend_holds, trend_variants
    from eq4d.training import load_split

    extra = [f'data.root="{args.data}"'] if args.data else []
    if args.epochs is not None:
        extra.append(f"train.epochs={args.epochs}")
    cfg = _config(args, extra)
    out = Path(args.out)
    _echo(cfg, out)
    variants = trend_variants(cfg) if args.kind == "trend" else pooling_variants(cfg)
    root = Path(cfg.data.root)
    train_scenes = load_split(root, "train", cfg.data.num_train)
    val_scenes = load_split(root, "val", cfg.eval.max_scenes or cfg.data.num_val)
    seeds = [int(s) for s in args.seeds.split(",")]
    with precision(cfg.precision):
        result = run_variants(variants, seeds, train_scenes, val_scenes,
                              progress=lambda r: _say(args, f"{r.variant} seed={r.seed} "
                                                            f"s_assoc={r.s_assoc:.4f} ({r.seconds:.0f}s)"))
    (out / "experiment.csv").write_text(result.to_csv())
    for v in result.variants:
        _say(args, f"median s_assoc {v}: {result.median(v):.4f}")
    if args.kind == "trend":
        checks = trend_holds(result)
        (out / "trend.json").write_text(json.dumps(checks, indent=2) + "\n")
        for k, ok in checks.items():
            _say(args, f"{k}: {'pass' if ok else 'fail'}")
        return EXIT_OK if all(checks.values()) else EXIT_VALIDATION
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eq4d", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate the synthetic dataset")
    g.add_argument("--out", help="dataset root (overrides data.root)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", help="dataset root")
    t.add_argument("--out", help="run directory for checkpoint and logs")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or label files")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--predictions", type=Path, help="directory with sequences/*/{predictions,labels}/*.label")
    e.add_argument("--data", help="dataset root")
    e.add_argument("--split", default="val", choices=("train", "val"))
    e.add_argument("--out", default="eval_out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("audit-equivariance", parents=[common], help="layer-by-layer equivariance residuals")
    a.add_argument("--checkpoint", type=Path, help="audit a trained network instead of random layers")
    a.add_argument("--out", default="audit_out")
    a.add_argument("--corrupt-permutation", action="store_true", help=argparse.SUPPRESS)
    a.set_defaults(func=cmd_audit)

    s = sub.add_parser("scaling", parents=[common], help="parameter and feature-size table")
    s.add_argument("--K", type=int, help="feature budget c*n")
    s.add_argument("--orders", help="comma-separated anchor counts")
    s.add_argument("--out", help="directory for scaling.csv")
    s.set_defaults(func=cmd_scaling)

    c = sub.add_parser("convert", parents=[common], help="export a scan (and labels) to PLY")
    c.add_argument("scan")
    c.add_argument("--label")
    c.add_argument("--prediction", help="predicted .label file to attach")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_convert)

    x = sub.add_parser("experiment", parents=[common], help="matched-budget comparison runs")
    x.add_argument("--kind", choices=("trend", "pooling"), default="trend")
    x.add_argument("--seeds", default="0,1,2")
    x.add_argument("--data", help="dataset root")
    x.add_argument("--epochs", type=int)
    x.add_argument("--out", default="experiment_out")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InvalidConfig, SchemaError, MalformedScan, CountMismatch) as e:
        print(f"config/schema error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except Eq4dError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
