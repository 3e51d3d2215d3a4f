"""Command-line entry point: ``ttac <subcommand> ...``.

Pipeline::

    ttac gen-data --out data --seed 0
    ttac train-source --data data --out data/model.ckpt --seed 0
    ttac anchors --checkpoint data/model.ckpt --data data --out data/anchors.bin
    ttac run --config run.toml --seed 0 --out runs/a
    ttac report runs/a
    ttac sweep --config run.toml --param tau_pp --values 0.5,0.9 --out runs/sweep

Exit codes: 0 success, 1 input or runtime error, 2 usage error, invalid
configuration or missing prerequisite, 3 numerical failure (the state dump
path is printed).
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .anchors import SourceAnchors, compute_source_anchors
from .config import SttrConfig, coerce, dump_config, load_config
from .datagen import (
    DEFAULT_FAMILY,
    DEFAULT_SEVERITY,
    FAMILIES,
    Dataset,
    load_dataset,
    load_features,
    make_benchmark,
    save_dataset,
    write_manifest,
)
from .engine import EngineNumericalError, baseline_error, run_protocol
from .errors import ConfigurationError, TTACError
from .nn import Model, load_checkpoint, pretrain_source, save_checkpoint
from .report import RunReport, format_table, table_row

EXTRA_KEYS = ("checkpoint", "anchors", "target", "manifest")


class Prerequisite(Exception):
    """A required input file was not provided or does not exist."""


def _parse_sets(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise argparse.ArgumentTypeError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


# ------------------------------------------------------------------ gen-data


def cmd_gen_data(args) -> int:
    splits = make_benchmark(
        args.family, args.severity, seed=args.seed,
        n_classes=args.n_classes, input_dim=args.input_dim,
        n_source=args.n_source, n_target=args.n_target, n_source_test=args.n_source_test,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / "source_train.bin", splits.source_train, {"kind": "dataset"})
    save_dataset(out / "source_test.bin", splits.source_test, {"kind": "dataset"})
    save_dataset(out / "target.bin", splits.target, {"kind": "dataset"})
    write_manifest(out / "manifest.json", splits, {"seed": args.seed})
    print(f"wrote {out}/{{source_train,source_test,target}}.bin and manifest.json")
    return 0


# -------------------------------------------------------------- train-source


def cmd_train_source(args) -> int:
    data = Path(args.data)
    for name in ("source_train.bin", "source_test.bin"):
        if not (data / name).exists():
            raise Prerequisite(f"missing prerequisite: {data / name} (run `ttac gen-data` first)")
    train = load_dataset(data / "source_train.bin")
    test = load_dataset(data / "source_test.bin")
    n_classes = int(train.y.max()) + 1
    model = Model.init(
        train.x.shape[1], _int_list(args.hidden), args.feature_dim, n_classes,
        np.random.default_rng(args.seed), feature_activation=args.feature_activation,
    )
    model, acc = pretrain_source(
        model, train.x, train.y, epochs=args.epochs, lr=args.lr,
        batch_size=args.batch_size, weight_decay=args.weight_decay, seed=args.seed,
        x_val=test.x, y_val=test.y,
    )
    save_checkpoint(model, args.out)
    print(f"source accuracy {acc:.4f}; checkpoint written to {args.out}")
    return 0


# ------------------------------------------------------------------- anchors


def cmd_anchors(args) -> int:
    if not Path(args.checkpoint).exists():
        raise Prerequisite(f"missing prerequisite: checkpoint {args.checkpoint} (run `ttac train-source` first)")
    src = Path(args.data) / "source_train.bin"
    if not src.exists():
        raise Prerequisite(f"missing prerequisite: {src} (run `ttac gen-data` first)")
    model = load_checkpoint(args.checkpoint)
    train = load_dataset(src)
    compute_source_anchors(model, train.x, train.y).save(args.out)
    print(f"anchors written to {args.out}")
    return 0


# ----------------------------------------------------------------------- run


def _load_target(path) -> Dataset:
    path = Path(path)
    if path.suffix == ".csv":
        x, y = load_features(path, "csv")
        return Dataset(x, y)
    return load_dataset(path)


def _resolve(args, overrides: dict | None = None) -> tuple[SttrConfig, dict]:
    values = _parse_sets(args.set)
    values.update(overrides or {})
    if args.seed is not None:
        values["seed"] = args.seed
    config, extras = load_config(args.config, values, EXTRA_KEYS)
    base = Path(args.config).parent if args.config else Path(".")
    for key in EXTRA_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            extras[key] = flag
        elif key in extras:
            extras[key] = str(base / extras[key])
    return config, extras


def execute_run(config: SttrConfig, extras: dict, out_dir) -> dict:
    """Run one configuration end to end and write its report directory."""
    ckpt = extras.get("checkpoint")
    if not ckpt or not Path(ckpt).exists():
        raise Prerequisite("missing prerequisite: model checkpoint (set `checkpoint` or pass --checkpoint)")
    target_path = extras.get("target")
    if not target_path or not Path(target_path).exists():
        raise Prerequisite("missing prerequisite: target data (set `target` or pass --target)")
    anchors = None
    if config.anchor_mode == "source_stats":
        apath = extras.get("anchors")
        if not apath or not Path(apath).exists():
            raise Prerequisite(
                "missing prerequisite: anchors file (run `ttac anchors` and set `anchors` or pass --anchors)"
            )
        anchors = SourceAnchors.load(apath)
    model = load_checkpoint(ckpt)
    target = _load_target(target_path)
    out = Path(out_dir)
    result = run_protocol(model, anchors, target.x, target.y, config, dump_dir=out / "dump")
    rows, manifest = [], {}
    mpath = extras.get("manifest") or str(Path(target_path).with_name("manifest.json"))
    if Path(mpath).exists():
        manifest = json.loads(Path(mpath).read_text())
    if target.y is not None:
        corr = manifest.get("corruption", {})
        rows.append(table_row(
            corr.get("family", "unknown"), corr.get("severity", -1),
            baseline_error(model, target.x, target.y), result.final_error,
        ))
    report = RunReport.from_result(result, config, table=rows, extras={"inputs": extras})
    report.write(out)
    (out / "config.toml").write_text(dump_config(config, extras))
    (out / "predictions.jsonl").write_text(result.log.to_jsonl())
    return report.to_dict()


def cmd_run(args) -> int:
    config, extras = _resolve(args)
    report = execute_run(config, extras, args.out)
    print(f"final error {report['final_error']:.2f}% over {report['n_samples']} samples; report in {args.out}")
    return 0


# -------------------------------------------------------------------- report


def cmd_report(args) -> int:
    rows = []
    for run_dir in args.runs:
        path = Path(run_dir) / "report.json"
        if not path.exists():
            raise Prerequisite(f"missing prerequisite: {path} (run `ttac run` first)")
        rep = json.loads(path.read_text())
        rows.extend(rep.get("table") or [])
        print(f"{run_dir}: final error {rep['final_error']:.2f}% (seed {rep['seed']})")
    if rows:
        print(format_table(rows))
    if args.out:
        Path(args.out).write_text(json.dumps({"rows": rows}, indent=2, sort_keys=True) + "\n")
    return 0


# --------------------------------------------------------------------- sweep


def _sweep_worker(job):
    config_dict, extras, out_dir = job
    return execute_run(SttrConfig(**config_dict), extras, out_dir)["final_error"]


def cmd_sweep(args) -> int:
    values = [v for v in args.values.split(",") if v != ""]
    if not values:
        raise argparse.ArgumentTypeError("--values is empty")
    coerce(args.param, values[0])
    jobs, names = [], []
    for v in values:
        config, extras = _resolve(args, {args.param: v})
        name = f"{args.param}={v}"
        jobs.append((config.to_dict(), extras, str(Path(args.out) / name)))
        names.append((name, v))
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            errors = list(pool.map(_sweep_worker, jobs))
    else:
        errors = [_sweep_worker(j) for j in jobs]
    index = {
        "param": args.param,
        "runs": [
            {"value": v, "dir": name, "final_error": e} for (name, v), e in zip(names, errors)
        ],
    }
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    for run in index["runs"]:
        print(f"{args.param}={run['value']}: {run['final_error']:.2f}%")
    return 0


# -------------------------------------------------------------------- parser


def _add_run_args(p):
    p.add_argument("--config", help="flat TOML config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--checkpoint")
    p.add_argument("--anchors")
    p.add_argument("--target", help="target dataset (.bin) or labeled feature CSV")
    p.add_argument("--manifest", help="dataset manifest for the report table")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttac", description="Streaming test-time adaptation with anchored clustering")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic source/target benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--family", choices=FAMILIES, default=DEFAULT_FAMILY)
    p.add_argument("--severity", type=int, default=DEFAULT_SEVERITY)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-classes", type=int, default=10)
    p.add_argument("--input-dim", type=int, default=32)
    p.add_argument("--n-source", type=int, default=5000)
    p.add_argument("--n-source-test", type=int, default=1000)
    p.add_argument("--n-target", type=int, default=2000)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-source", help="train the source model")
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", default="64,64")
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--feature-activation", choices=("identity", "relu", "tanh"), default="identity")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("anchors", help="compute source anchors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; anchors are deterministic")
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("run", help="stream the target data through TTAC")
    _add_run_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="summarize run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", help="write the combined table as JSON")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="run one config per value of a parameter")
    _add_run_args(p)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (Prerequisite, argparse.ArgumentTypeError, ConfigurationError) as exc:
        print(f"ttac {args.command}: {exc}", file=sys.stderr)
        return 2
    except EngineNumericalError as exc:
        where = exc.dump_path or "no dump directory"
        print(f"ttac {args.command}: numerical failure: {exc}; state dumped to {where}", file=sys.stderr)
        return 3
    except (TTACError, OSError) as exc:
        print(f"ttac {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
