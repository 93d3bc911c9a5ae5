"""Command-line entry point.

Every command that produces artifacts creates a fresh run directory under
``--out`` (``<command>-NNN``) holding ``config.txt`` plus its outputs; earlier
runs are never touched. Exit codes: 0 success, 1 invalid input, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ConfigError, RunConfig, load_config, parse_config_text
from .evaluation import a_distance, evaluate
from .geometry import CloudFormatError, generate_domain_pair, read_dataset, write_dataset
from .models import ModelBundle
from .prepare import prepare
from .selftrain import TrainingDiverged, build_feature_bank, pretrain, run_self_training

__all__ = ["main"]

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tam", description="Sim-to-real point cloud adaptation on synthetic domains.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True, out=True):
        sp.add_argument("--config", type=Path, help="key = value file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        if data:
            sp.add_argument("--data", type=Path, required=True, help="dataset directory from generate-data")
        if out:
            sp.add_argument("--out", type=Path, default=Path("runs"), help="parent of the run directory")

    common(sub.add_parser("generate-data", help="write a synthetic source/target pair"), data=False)
    common(sub.add_parser("pretrain", help="source plus self-supervised training"))
    common(sub.add_parser("adapt", help="pretraining followed by contrastive self-training"))
    ev = sub.add_parser("eval", help="accuracy and confusion matrix of a trained run")
    ev.add_argument("--run", type=Path, required=True, help="run directory holding config.txt and model.tamw")
    ev.add_argument("--data", type=Path, required=True)
    ev.add_argument("--domain", choices=("source", "target"), default="target")
    ev.add_argument("--out", type=Path, default=Path("runs"))
    adist = sub.add_parser("a-distance", help="domain discrepancy of global or learned features")
    common(adist)
    adist.add_argument("--run", type=Path, help="use the projected features of this trained run")
    ex = sub.add_parser("export-features", help="per-sample feature CSV of a trained run")
    ex.add_argument("--run", type=Path, required=True)
    ex.add_argument("--data", type=Path, required=True)
    ex.add_argument("--out", type=Path, default=Path("runs"))
    gc = sub.add_parser("grad-check", help="finite-difference check of every kernel and loss")
    gc.add_argument("--instances", type=int, default=20)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    return p


def _overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def _new_run_dir(parent: Path, command: str) -> Path:
    parent.mkdir(parents=True, exist_ok=True)
    i = 1
    while True:
        path = parent / f"{command}-{i:03d}"
        try:
            path.mkdir()
            return path
        except FileExistsError:
            i += 1


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    keys = list(rows[0])
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in keys})


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _load_run(run: Path) -> tuple[RunConfig, ModelBundle]:
    cfg_path, ckpt = run / "config.txt", run / "model.tamw"
    if not cfg_path.is_file() or not ckpt.is_file():
        raise ConfigError(f"{run} is not a trained run directory")
    cfg = RunConfig().updated(parse_config_text(cfg_path.read_text(encoding="utf-8")))
    bundle = ModelBundle(cfg.model(), seed=cfg.seed, posenc=cfg.posenc())
    bundle.load_state_dict(ad.load_checkpoint(ckpt))
    bundle.eval()
    return cfg, bundle


def _prepared(cfg: RunConfig, data: Path):
    if not (data / "labels.csv").is_file():
        raise ConfigError(f"{data} has no labels.csv; run generate-data first")
    S, T = read_dataset(data)
    if not S or not T:
        raise ConfigError("dataset needs both source and target samples")
    k = cfg.model().edge_k
    return prepare(S, cfg.posenc(), cfg.implicit(), k, cfg.seed), prepare(T, cfg.posenc(), cfg.implicit(), k, cfg.seed)


def _train(args, cfg: RunConfig, adapt: bool) -> int:
    PS, PT = _prepared(cfg, args.data)
    run = _new_run_dir(args.out, args.command)
    (run / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    bundle = ModelBundle(cfg.model(), seed=cfg.seed, posenc=cfg.posenc())
    history = pretrain(bundle, PS, PT, cfg.train())
    _write_csv(run / ("pretrain_metrics.csv" if adapt else "metrics.csv"), history)
    if adapt:

        def acc(b, d):
            return evaluate(b, d).accuracy

        rounds = run_self_training(bundle, PS, PT, cfg.selftrain(), evaluate=acc)
        _write_csv(run / "metrics.csv", rounds)
    bundle.round_to_f32()
    ad.save_checkpoint(run / "model.tamw", bundle.state_dict())
    report = evaluate(bundle, PT)
    (run / "confusion.csv").write_text(report.to_csv(), encoding="utf-8")
    _write_csv(run / "final.csv", [{"source_acc": evaluate(bundle, PS).accuracy, "target_acc": report.accuracy}])
    print(f"target accuracy {report.accuracy:.6f}")
    print(f"run directory {run}")
    return EXIT_OK


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "grad-check":
        from .gradsuite import run_gradient_suite

        errors = run_gradient_suite(instances=args.instances)
        for name, err in errors.items():
            print(f"{'PASS' if err < args.tolerance else 'FAIL'} {name} max_rel_err={err:.3e}")
        return EXIT_OK if max(errors.values()) < args.tolerance else EXIT_RUNTIME

    if cmd in ("eval", "export-features"):
        cfg, bundle = _load_run(args.run)
        PS, PT = _prepared(cfg, args.data)
        run = _new_run_dir(args.out, cmd)
        (run / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        if cmd == "eval":
            report = evaluate(bundle, PT if args.domain == "target" else PS)
            (run / "confusion.csv").write_text(report.to_csv(), encoding="utf-8")
            _write_csv(run / "metrics.csv", [{"domain": args.domain, "accuracy": report.accuracy}])
            print(f"{args.domain} accuracy {report.accuracy:.6f}")
        else:
            rows = []
            for data in (PS, PT):
                z = build_feature_bank(bundle, data).features
                for i in range(len(data)):
                    rows.append({"domain": data.domain, "index": i, "label": int(data.true_labels[i]),
                                 **{f"z{j}": float(v) for j, v in enumerate(z[i])}})
            _write_csv(run / "features.csv", rows)
            print(f"wrote {len(rows)} feature rows")
        print(f"run directory {run}")
        return EXIT_OK

    cfg = load_config(args.config, _overrides(args.set))
    if cmd == "generate-data":
        S, T = generate_domain_pair(cfg.synth())
        run = _new_run_dir(args.out, cmd)
        (run / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        write_dataset(S + T, run)
        print(f"wrote {len(S)} source and {len(T)} target clouds to {run}")
        return EXIT_OK
    if cmd == "a-distance":
        PS, PT = _prepared(cfg, args.data)
        if args.run is not None:
            _, bundle = _load_run(args.run)
            fs, ft = build_feature_bank(bundle, PS).features, build_feature_bank(bundle, PT).features
        else:
            fs, ft = PS.global_features, PT.global_features
        if min(len(fs), len(ft)) < 20:
            raise ConfigError("a-distance needs at least 20 clouds per domain")
        value = a_distance(fs, ft, seed=cfg.seed)
        run = _new_run_dir(args.out, cmd)
        (run / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        _write_csv(run / "metrics.csv", [{"a_distance": value}])
        print(f"A-distance {value:.6f}")
        return EXIT_OK
    return _train(args, cfg, cmd == "adapt")


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"tam: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    try:
        return _dispatch(args)
    except (ConfigError, CloudFormatError, ad.CheckpointFormatError, FileNotFoundError, KeyError) as exc:
        print(f"tam: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingDiverged, ValueError, RuntimeError, MemoryError) as exc:
        print(f"tam: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
