"""Command-line front end: ``stprobe {gen-data,train,stp,energy,report}``.

Every command reads an optional INI config, applies ``--section.key value``
overrides and writes its outputs into ``<output.dir>/<command>-<hash>/``
where the hash covers the merged config.  The merged config is echoed there
as ``config.ini``; wall-clock timestamps only ever go to ``run.log``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, describe_keys
from .energy import (ArchDims, EnergyConstants, MissingFrequencyError, SpikeStats, FREQ_NAMES,
                     analytic_report, energy_report)
from .stp import StpReport, classify_verdict, run_stp
from .tasks import (BinaryAddingSpec, DataFormatError, gen_binary_adding, load_dataset,
                    load_mnist_idx, make_ps_mnist, save_dataset)
from .train import (METRIC_FIELDS, Checkpoint, CheckpointError, TrainingDivergence,
                    metrics_rows, train_run, write_metrics_csv)

DATA_ENV = "STPROBE_DATA"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
TASKS = ("binary_adding", "ps_mnist")
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

log = logging.getLogger("stprobe")


class DataError(Exception):
    pass


# -- paths ------------------------------------------------------------------------

def data_root(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(DATA_ENV) or cfg["output"]["data_dir"] or "data")


def binary_adding_spec(cfg: ExperimentConfig) -> BinaryAddingSpec:
    t = cfg["task"]
    try:
        return BinaryAddingSpec(T=t["T"], train_size=t["train_size"], test_size=t["test_size"],
                                seed=t["seed"], balance=t["balance"])
    except ValueError as exc:
        raise ConfigError(f"[task]: {exc}") from exc


def dataset_paths(cfg: ExperimentConfig) -> dict:
    root = data_root(cfg)
    name = cfg["task"]["name"]
    if name == "binary_adding":
        stem = f"binary_adding-{binary_adding_spec(cfg).spec_hash()[:12]}"
    elif name == "ps_mnist":
        stem = f"ps_mnist-{cfg['task']['permutation_seed']}"
    else:
        raise ConfigError(f"task.name must be one of {TASKS}, got {name!r}")
    return {split: root / f"{stem}-{split}.stpd" for split in ("train", "test")}


def _find_idx(directory: Path, base: str) -> Path:
    for candidate in (directory / base, directory / f"{base}.gz"):
        if candidate.exists():
            return candidate
    raise DataError(f"MNIST file {base} not found in {directory}")


def mnist_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg["task"]["mnist_dir"]) if cfg["task"]["mnist_dir"] else data_root(cfg) / "mnist"


def load_splits(cfg: ExperimentConfig):
    paths = dataset_paths(cfg)
    for p in paths.values():
        if not p.exists():
            raise DataError(f"{p} missing; run `stprobe gen-data` with the same [task] first")
    train, test = load_dataset(paths["train"]), load_dataset(paths["test"])
    lim_tr, lim_te = cfg["task"]["limit_train"], cfg["task"]["limit_test"]
    if lim_tr:
        train = train.subset(np.arange(min(lim_tr, len(train))))
    if lim_te:
        test = test.subset(np.arange(min(lim_te, len(test))))
    return train, test


RUN_SECTIONS = {"train": ("task", "train"), "stp": ("task", "train", "stp"),
                "energy": ("task", "train", "energy")}


def run_dir(cfg: ExperimentConfig, command: str) -> Path:
    digest = cfg.run_hash(RUN_SECTIONS[command])[:12]
    path = Path(cfg["output"]["dir"]) / f"{command}-{digest}"
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.ini").write_text(cfg.serialize(), encoding="utf-8")
    return path


def attach_log(path: Path) -> logging.Handler:
    handler = logging.FileHandler(path / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logging.getLogger("stprobe").addHandler(handler)
    logging.getLogger("stprobe").setLevel(logging.INFO)
    return handler


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    paths = dataset_paths(cfg)
    paths["train"].parent.mkdir(parents=True, exist_ok=True)
    if cfg["task"]["name"] == "binary_adding":
        spec = binary_adding_spec(cfg)
        train, test = gen_binary_adding(spec)
        digest = spec.spec_hash()
    else:
        directory = mnist_dir(cfg)
        splits = []
        for split in ("train", "test"):
            img, lab = (_find_idx(directory, f) for f in MNIST_FILES[split])
            images, labels = load_mnist_idx(img, lab)
            splits.append(make_ps_mnist(images, labels, cfg["task"]["permutation_seed"]))
        train, test = splits
        digest = f"permutation seed {cfg['task']['permutation_seed']}"
    save_dataset(train, paths["train"])
    save_dataset(test, paths["test"])
    print(f"spec {digest}")
    print(f"train {len(train)} samples -> {paths['train']}")
    print(f"test {len(test)} samples -> {paths['test']}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    config = cfg.train_config()
    train, test = load_splits(cfg)
    out = run_dir(cfg, "train")
    handler = attach_log(out)
    try:
        result = train_run(config, train, test)
    finally:
        logging.getLogger("stprobe").removeHandler(handler)
        handler.close()
    run_id = out.name
    write_metrics_csv(out / "metrics.csv", result.history, run_id, cfg["task"]["name"],
                      config.algorithm)
    result.best.save(out / "checkpoint.stpb")
    final = result.history[-1]
    _write_json(out / "report.json", {
        "task": cfg["task"]["name"], "algorithm": config.algorithm, "seed": config.seed,
        "final_epoch": final["epoch"], "test_accuracy": 100.0 * final["test_accuracy"],
        "best_epoch": result.best.epoch,
        "best_test_accuracy": 100.0 * max(r["test_accuracy"] for r in result.history),
    })
    print(f"{config.algorithm} test accuracy {100.0 * final['test_accuracy']:.2f}% -> {out}")
    return EXIT_OK


def cmd_stp(cfg: ExperimentConfig, args) -> int:
    config = cfg.train_config()
    train, test = load_splits(cfg)
    stp = cfg["stp"]
    out = run_dir(cfg, "stp")
    handler = attach_log(out)
    try:
        report = run_stp(cfg["task"]["name"], config, train, test,
                         theta_credit=stp["theta_credit"], theta_temporal=stp["theta_temporal"],
                         workers=stp["workers"])
    finally:
        logging.getLogger("stprobe").removeHandler(handler)
        handler.close()
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for arm in report.arms:
            w.writerows(metrics_rows(arm.history, out.name, report.task, arm.algorithm))
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    for arm in report.arms:
        if arm.checkpoint is not None:
            (out / f"checkpoint-{arm.algorithm}.stpb").write_bytes(arm.checkpoint)
    for arm in report.arms:
        acc = "failed" if arm.accuracy is None else f"{arm.accuracy:.2f}%"
        print(f"{arm.algorithm:5s} {acc}")
    print(f"verdict {report.verdict} -> {out}")
    if any(a.accuracy is None for a in report.arms):
        for a in report.arms:
            if a.error:
                print(f"{a.algorithm} failed: {a.error}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_energy(cfg: ExperimentConfig, args) -> int:
    e = cfg["energy"]
    try:
        consts = EnergyConstants(e["e_ac"], e["e_mac"])
        if e["mode"] == "analytic":
            dims = ArchDims(m=e["m"], n=e["n"], k=e["k"], h=e["h"], T=e["T"], T_in=e["T_in"],
                            layers=e["layers"])
            stats = SpikeStats(**{name: e[name] for name in FREQ_NAMES})
            report = analytic_report(e["archs"], dims, stats, consts)
        elif e["mode"] == "measured":
            if not e["checkpoint"]:
                raise ConfigError("measured mode needs energy.checkpoint")
            config = cfg.train_config()
            _, test = load_splits(cfg)
            try:
                ckpt = Checkpoint.load(e["checkpoint"])
                net, _ = ckpt.restore(config, test.channels, test.n_classes)
            except FileNotFoundError as exc:
                raise DataError(str(exc)) from exc
            inputs = test.inputs[: e["samples"]]
            report = energy_report(net, inputs, consts, config.algorithm)
        else:
            raise ConfigError(f"energy.mode must be analytic or measured, got {e['mode']!r}")
    except (MissingFrequencyError, CheckpointError) as exc:
        raise ConfigError(str(exc)) from exc
    except ValueError as exc:
        if isinstance(exc, (ConfigError, DataFormatError)):
            raise
        raise ConfigError(f"[energy]: {exc}") from exc
    out = run_dir(cfg, "energy")
    report.write_csv(out / "energy.csv")
    for r in report.rows:
        print(f"{r.layer:12s} {r.architecture:12s} {r.op_kind:5s} {r.op_count:>16.6g} "
              f"{r.energy_nJ:>14.6g} nJ  ratio {r.ratio:.4g}")
    print(f"-> {out / 'energy.csv'}")
    return EXIT_OK


SUMMARY_FIELDS = ("task", "seed", "theta_credit", "theta_temporal", "acc_stbp", "acc_sdbp",
                  "acc_notd", "verdict", "runs")


def summarize_reports(reports) -> list[tuple]:
    """One row per report plus a mean row for every task seen more than once."""
    rows = []
    by_key = {}
    for r in reports:
        acc = [r.accuracy(a) for a in ("stbp", "sdbp", "notd")]
        rows.append((r.task, str(r.seed), r.theta_credit, r.theta_temporal, *acc,
                     r.verdict, 1))
        by_key.setdefault((r.task, r.theta_credit, r.theta_temporal), []).append(acc)
    for (task, tc, tt), accs in by_key.items():
        if len(accs) < 2 or any(a is None for row in accs for a in row):
            continue
        mean = np.mean(np.array(accs, dtype=np.float64), axis=0).tolist()
        rows.append((task, "mean", tc, tt, *mean, classify_verdict(*mean, tc, tt), len(accs)))
    return rows


def cmd_report(cfg: ExperimentConfig, args) -> int:
    reports = []
    for d in args.runs:
        path = Path(d) / "report.json" if Path(d).is_dir() else Path(d)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            reports.append(StpReport.from_dict(data))
        except FileNotFoundError as exc:
            raise DataError(f"{path}: no report") from exc
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: not an STP report ({exc})") from exc
    reports.sort(key=lambda r: (r.task, r.seed))
    rows = summarize_reports(reports)
    out = Path(args.out) if args.out else Path(cfg["output"]["dir"]) / "summary.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for row in rows:
            # 10 significant digits hide the 1e-15 noise of percent scaling
            w.writerow(["" if v is None else (f"{v:.10g}" if isinstance(v, float) else v)
                        for v in row])
    for row in rows:
        print(",".join("" if v is None else (f"{v:.2f}" if isinstance(v, float) else str(v))
                       for v in row))
    print(f"-> {out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "materialize the task's train/test splits"),
    "train": (cmd_train, "train one algorithm; metrics.csv and best checkpoint"),
    "stp": (cmd_stp, "train all three arms and judge the benchmark"),
    "energy": (cmd_energy, "theoretical energy of a model or of architecture formulas"),
    "report": (cmd_report, "merge stp run directories into a summary CSV"),
}


# -- argument handling ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    epilog = ("overrides: --section.key value (or --section.key=value); accepted keys:\n"
              + describe_keys()
              + f"\n\nenvironment: {DATA_ENV} selects the data root directory"
              "\nexit codes: 0 ok, 2 config error, 3 data error, 4 training divergence")
    parser = argparse.ArgumentParser(
        prog="stprobe", description="Spiking temporal probe experiments.",
        epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("-c", "--config", help="INI config file")
        p.add_argument("--algorithm", help="shorthand for --train.algorithm")
        p.add_argument("--epochs", help="shorthand for --train.epochs")
        p.add_argument("--seed", help="shorthand for --train.seed")
        p.add_argument("--thresholds", nargs=2, metavar=("CREDIT", "TEMPORAL"),
                       help="shorthand for --stp.theta_credit and --stp.theta_temporal")
        p.add_argument("--print-config", action="store_true",
                       help="print the merged config and exit")
        if name == "report":
            p.add_argument("runs", nargs="+", help="stp run directories or report.json files")
            p.add_argument("-o", "--out", help="summary CSV path")
    return parser


def split_overrides(tokens: list[str]) -> list[tuple[str, str]]:
    """Pair up ``--section.key value`` tokens argparse did not recognise."""
    pairs = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognised argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"{tok} needs a value")
            key, value = tok[2:], tokens[i + 1]
            i += 2
        pairs.append((key, value))
    return pairs


def merged_config(args, extra: list[str]) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg.apply_overrides(split_overrides(extra))
    shorthands = [("train.algorithm", args.algorithm), ("train.epochs", args.epochs),
                  ("train.seed", args.seed)]
    if args.thresholds:
        shorthands += [("stp.theta_credit", args.thresholds[0]),
                       ("stp.theta_temporal", args.thresholds[1])]
    cfg.apply_overrides([(k, v) for k, v in shorthands if v is not None])
    cfg.train_config()  # validate eagerly
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = merged_config(args, extra)
        if args.print_config:
            sys.stdout.write(cfg.serialize())
            return EXIT_OK
        return COMMANDS[args.command][0](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if args.config and not Path(args.config).exists() else EXIT_DATA
    except (DataError, DataFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergence, FloatingPointError) as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
