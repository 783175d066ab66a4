"""Command-line pipeline: synth, extract, train, predict, evaluate, explain,
export-timeseries, match-blacklist.

Exit codes: 0 success, 1 usage error, 2 data error, 3 model/schema error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .aggregate import group_by_external_host, write_discard_report
from .explain import (
    UnknownFeature,
    export_multiway_importance,
    importance_report,
    partial_dependence,
    write_summary,
)
from .features import (
    FEATURE_NAMES,
    export_timeseries_matrix,
    extract_features,
    read_feature_csv,
    write_feature_csv,
)
from .flows import FlowParseError, NetworkConfig, read_flow_file
from .forest import (
    ConfusionMatrix,
    ForestModel,
    SchemaMismatch,
    SingleClassDataset,
    TrainConfig,
    train_forest,
)
from .labels import (
    LabeledDataset,
    LabelSet,
    MalformedEntry,
    NoMaliciousRows,
    build_training_set,
    load_blacklist,
    match_predictions,
    write_blacklist,
    write_dataset_csv,
)
from .synth import benchmark_profiles, bot_profile, default_config, generate_day, normal_profile

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("c2detect")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- helpers -----------------------------------------------------------------

def _atomic_write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def load_toml(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"invalid config {path}: {exc}") from None


def network_config(path) -> NetworkConfig:
    data = load_toml(path)
    if not data:
        return default_config()
    data = data.get("network", data)
    try:
        return NetworkConfig.from_dict(data)
    except ValueError as exc:
        raise UsageError(f"invalid network config: {exc}") from None


class Run:
    """Collects what a command read and wrote, then writes its manifest."""

    def __init__(self, args, config: dict):
        self.command = args.command
        self.seed = args.seed
        self.config = config
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.stats: dict = {}
        self.started = time.time()

    def write_manifest(self, anchor) -> None:
        manifest = {
            "command": self.command,
            "inputs": self.inputs,
            "config": self.config,
            "config_digest": _digest(self.config),
            "seed": self.seed,
            "tool_version": __version__,
            "started_at": self.started,
            "finished_at": time.time(),
            "outputs": self.outputs,
            "stats": self.stats,
        }
        target = Path(str(anchor) + ".manifest.json")
        _atomic_write_text(target, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _read_flows(path, args, run: Run):
    try:
        records, report = read_flow_file(path, strict=not args.lenient, header=args.header)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    except FlowParseError as exc:
        raise DataError(f"{path}: {exc}") from None
    run.inputs.append(str(path))
    run.stats["lines"] = report.n_lines
    run.stats["skipped_lines"] = report.n_errors
    return records


def _read_features(path):
    try:
        return read_feature_csv(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    except ValueError as exc:
        raise SchemaMismatch(str(exc)) from None


def _blacklist(path) -> LabelSet:
    try:
        return load_blacklist(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def _dataset_from_features(rows, labels: LabelSet | None, day: int = 0) -> LabeledDataset:
    hosts = [h for h, _, _ in rows]
    X = np.array([fv.as_array() for _, _, fv in rows]).reshape(len(rows), len(FEATURE_NAMES))
    if labels is not None:
        fam = [labels.family(h) or "" for h in hosts]
    else:
        fam = [lab if lab not in ("", "unknown") else "" for _, lab, _ in rows]
    y = np.array([1 if f else 0 for f in fam], dtype=np.int64)
    return LabeledDataset(hosts, X, y, fam, np.full(len(rows), day, dtype=np.int64))


# -- commands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    bot, normal = benchmark_profiles(args.bot_hosts, args.normal_hosts) if args.benchmark else (
        bot_profile(n_hosts=args.bot_hosts), normal_profile(n_hosts=args.normal_hosts))
    config = network_config(args.config)
    run = Run(args, {"bot": repr(bot), "normal": repr(normal), "network": config.to_dict()})
    day = generate_day(bot, normal, config, seed=args.seed)
    _atomic_write_text(args.out_flows, "".join(line + "\n" for line in day.flows.to_csv_lines()))
    write_blacklist(args.out_truth, day.truth.entries)
    run.outputs += [str(args.out_flows), str(args.out_truth)]
    run.stats.update(flows=len(day.flows), hosts=len(day.host_kind), bots=len(day.truth))
    run.write_manifest(args.out_flows)
    log.info("wrote %d flows for %d hosts", len(day.flows), len(day.host_kind))
    return EXIT_OK


def cmd_extract(args) -> int:
    config = network_config(args.config)
    run = Run(args, {"network": config.to_dict(), "lenient": args.lenient})
    records = _read_flows(args.flows, args, run)
    grouped = group_by_external_host(records, config)
    rows = [(v.host_ip, extract_features(v, config)) for v in grouped.views]
    labels = None
    if args.labels:
        bl = _blacklist(args.labels)
        run.inputs.append(str(args.labels))
        labels = {h: bl.family(h) or "unknown" for h, _ in rows}
    write_feature_csv(args.out, rows, labels)
    run.outputs.append(str(args.out))
    if args.discards:
        write_discard_report(args.discards, grouped.discards)
        run.outputs.append(str(args.discards))
    run.stats.update(hosts=len(rows), discarded_flows=len(grouped.discards))
    run.write_manifest(args.out)
    return EXIT_OK


def _train_config(args) -> tuple[TrainConfig, dict]:
    raw = load_toml(args.train_config)
    raw = raw.get("train", raw)
    raw["seed"] = args.seed
    if args.no_balance:
        raw["balance"] = False
    for key in ("n_trees", "mtry"):
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    try:
        return TrainConfig.from_dict(raw), raw
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from None


def cmd_train(args) -> int:
    config, raw = _train_config(args)
    unknown_per_day = int(raw.get("unknown_per_day", args.unknown_per_day))
    run = Run(args, {"train": {k: v for k, v in raw.items()}, "unknown_per_day": unknown_per_day})
    labels = _blacklist(args.labels) if args.labels else None
    days = []
    for d, path in enumerate(args.features):
        days.append(_dataset_from_features(_read_features(path), labels, day=d))
        run.inputs.append(str(path))
    try:
        train = build_training_set(days, unknown_per_day=unknown_per_day, seed=args.seed)
        model = train_forest(train, config, threads=args.threads)
    except (SingleClassDataset, NoMaliciousRows) as exc:
        raise DataError(str(exc)) from None
    model.save(args.out)
    run.outputs.append(str(args.out))
    if args.training_set:
        write_dataset_csv(args.training_set, train)
        run.outputs.append(str(args.training_set))
    report = {"oob": model.oob_stats.to_dict(), "oob_excluded": model.oob_excluded,
              "per_tree": model.per_tree_rates, "n_rows": len(train),
              "n_malicious": train.n_malicious}
    if args.report:
        _atomic_write_text(args.report, json.dumps(report, indent=2) + "\n")
        run.outputs.append(str(args.report))
    run.stats.update(report)
    run.write_manifest(args.out)
    cm = model.oob_stats
    print(f"OOB confusion: TP={cm.tp} FP={cm.fp} TN={cm.tn} FN={cm.fn}")
    print(f"OOB error={cm.error:.4f} TPR={cm.tpr:.4f} FPR={cm.fpr:.4f} FNR={cm.fnr:.4f}")
    return EXIT_OK


def _load_model(path) -> ForestModel:
    try:
        return ForestModel.load(path)
    except OSError as exc:
        raise DataError(f"cannot read model {path}: {exc}") from None
    except (ValueError, KeyError) as exc:
        raise SchemaMismatch(f"{path}: not a valid model file ({exc})") from None


def _check_schema(model: ForestModel, width: int) -> None:
    if tuple(model.feature_names) != FEATURE_NAMES or width != len(FEATURE_NAMES):
        raise SchemaMismatch("feature file schema does not match the model")


def cmd_predict(args) -> int:
    model = _load_model(args.model)
    rows = _read_features(args.features)
    _check_schema(model, len(FEATURE_NAMES))
    run = Run(args, {"threshold": args.threshold})
    run.inputs += [str(args.model), str(args.features)]
    X = np.array([fv.as_array() for _, _, fv in rows]).reshape(len(rows), len(FEATURE_NAMES))
    labels, scores = model.predict_scores(X, args.threshold) if len(rows) else ([], [])
    order = sorted(range(len(rows)), key=lambda i: (-scores[i], rows[i][0]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["host_ip", "label", "score"])
    for i in order:
        w.writerow([rows[i][0], "malicious" if labels[i] else "unknown", repr(float(scores[i]))])
    _atomic_write_text(args.out, buf.getvalue())
    run.outputs.append(str(args.out))
    run.stats["rows"] = len(rows)
    run.write_manifest(args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = _load_model(args.model)
    rows = _read_features(args.features)
    labels = _blacklist(args.labels) if args.labels else None
    ds = _dataset_from_features(rows, labels)
    pred, _ = model.predict_scores(ds.X, args.threshold) if len(ds) else (np.zeros(0), None)
    cm = ConfusionMatrix.from_predictions(ds.y == 1, np.asarray(pred) == 1)
    text = json.dumps(cm.to_dict(), indent=2) + "\n"
    if args.out:
        run = Run(args, {"threshold": args.threshold})
        run.inputs += [str(args.model), str(args.features)] + ([str(args.labels)] if args.labels else [])
        _atomic_write_text(args.out, text)
        run.outputs.append(str(args.out))
        run.stats = cm.to_dict()
        run.write_manifest(args.out)
    print(text, end="")
    return EXIT_OK


def cmd_explain(args) -> int:
    model = _load_model(args.model)
    rows = _read_features(args.features)
    ds = _dataset_from_features(rows, None)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = Run(args, {"top_k": args.top_k, "repeats": args.repeats, "grid_size": args.grid_size,
                     "pdp_features": args.pdp_feature})
    run.inputs += [str(args.model), str(args.features)]
    for f in args.pdp_feature or ():
        if f not in model.feature_names:
            raise UnknownFeature(f)
    if model.n_trees and len(ds):
        oob = model.trained_on(ds)
        if not oob:
            log.warning("features are not the model's training set; importance uses all trees")
        report = importance_report(model, ds, np.random.default_rng(args.seed), args.repeats,
                                   args.top_k, oob=oob)
    else:
        report = None
    export_multiway_importance(report, out / "multiway_importance.csv")
    run.outputs.append(str(out / "multiway_importance.csv"))
    if args.pdp_feature:
        targets = list(args.pdp_feature)
    elif report is not None:
        ranked = np.argsort(report.mean_min_depth, kind="stable")[:2]
        targets = [model.feature_names[i] for i in ranked]
    else:
        targets = []
    curves = []
    if len(ds):
        for f in targets:
            curve = partial_dependence(model, ds, f, args.grid_size)
            path = out / f"pdp_{f}.csv"
            curve.write(path)
            run.outputs.append(str(path))
            curves.append(curve)
    if report is not None:
        write_summary(out / "summary.json", report, curves)
        run.outputs.append(str(out / "summary.json"))
    run.write_manifest(out / "explain")
    return EXIT_OK


def cmd_export_timeseries(args) -> int:
    config = network_config(args.config)
    run = Run(args, {"network": config.to_dict(), "lenient": args.lenient})
    records = _read_flows(args.flows, args, run)
    views = group_by_external_host(records, config).views
    labels = None
    if args.labels:
        bl = _blacklist(args.labels)
        run.inputs.append(str(args.labels))
        labels = {v.host_ip: bl.family(v.host_ip) or "unknown" for v in views}
    n = export_timeseries_matrix(args.out, views, config, labels)
    run.outputs.append(str(args.out))
    run.stats["rows"] = n
    run.write_manifest(args.out)
    return EXIT_OK


def cmd_match_blacklist(args) -> int:
    lists = [_blacklist(p) for p in args.blacklist]
    predicted = []
    try:
        with open(args.predictions, newline="") as fh:
            for rec in csv.DictReader(fh):
                if args.all or rec["label"] == "malicious":
                    predicted.append((rec["host_ip"], float(rec["score"])))
    except OSError as exc:
        raise DataError(f"cannot read {args.predictions}: {exc}") from None
    except (KeyError, ValueError) as exc:
        raise DataError(f"{args.predictions}: malformed prediction file ({exc})") from None
    report = match_predictions(predicted, lists)
    report.write(args.out, args.summary)
    run = Run(args, {"all": args.all})
    run.inputs += [str(args.predictions), *map(str, args.blacklist)]
    run.outputs += [str(args.out)] + ([str(args.summary)] if args.summary else [])
    run.stats = report.summary()
    run.write_manifest(args.out)
    print(json.dumps(report.summary(), indent=2))
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="c2detect", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0, help="single source of randomness")
    p.add_argument("--threads", type=int, default=1)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--lenient", dest="lenient", action="store_true", default=True,
                      help="skip and count malformed flow lines (default)")
    mode.add_argument("--strict", dest="lenient", action="store_false",
                      help="fail on the first malformed flow line")
    p.add_argument("--header", action="store_true", help="flow CSV files start with a header row")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="generate a labelled synthetic day")
    s.add_argument("--bot-hosts", type=int, default=100)
    s.add_argument("--normal-hosts", type=int, default=900)
    s.add_argument("--benchmark", action="store_true", help="use the overlapping benchmark profiles")
    s.add_argument("--config")
    s.add_argument("--out-flows", required=True)
    s.add_argument("--out-truth", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract", help="flows -> per-host feature CSV")
    s.add_argument("flows")
    s.add_argument("--config")
    s.add_argument("--labels", help="blacklist CSV used to fill the label column")
    s.add_argument("--discards", help="write discarded flows report here")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="fit a balanced random forest")
    s.add_argument("features", nargs="+", help="one feature CSV per day")
    s.add_argument("--labels", help="blacklist CSV; otherwise the label column is used")
    s.add_argument("--train-config")
    s.add_argument("--n-trees", type=int)
    s.add_argument("--mtry", type=int)
    s.add_argument("--unknown-per-day", type=int, default=1000)
    s.add_argument("--no-balance", action="store_true", help="plain bootstrap baseline")
    s.add_argument("--training-set", help="also write the assembled training rows here")
    s.add_argument("--report", help="write OOB report JSON here")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="score hosts with a trained model")
    s.add_argument("model")
    s.add_argument("features")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="confusion matrix against labels")
    s.add_argument("model")
    s.add_argument("features")
    s.add_argument("--labels")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("explain", help="importance table and partial dependence curves")
    s.add_argument("model")
    s.add_argument("features", help="the training set written by 'train --training-set'")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--pdp-feature", action="append")
    s.add_argument("--top-k", type=int, default=11)
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--grid-size", type=int, default=20)
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("export-timeseries", help="288x3 per-host matrix")
    s.add_argument("flows")
    s.add_argument("--config")
    s.add_argument("--labels")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_timeseries)

    s = sub.add_parser("match-blacklist", help="cross-check predictions with blacklists")
    s.add_argument("predictions")
    s.add_argument("--blacklist", action="append", required=True)
    s.add_argument("--all", action="store_true", help="match every prediction, not only malicious")
    s.add_argument("--out", required=True)
    s.add_argument("--summary")
    s.set_defaults(func=cmd_match_blacklist)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"c2detect: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"c2detect: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, MalformedEntry) as exc:
        print(f"c2detect: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SchemaMismatch, UnknownFeature) as exc:
        print(f"c2detect: model error: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
