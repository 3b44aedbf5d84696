"""Command-line entry point: ``cnnlstm-ids <command> [flags]``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
divergence (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from .config import RunConfig, build_run_config, load_config_file
from .errors import (ConfigError, DataError, DivergenceError, IdsError, ModelFormatError, NonFiniteError,
                     UsageError)
from .evaluation import crossval, cv_section, evaluate, write_report
from .gradcheck import format_results, run_gradcheck
from .model import build_model, load_model, predict_proba, save_model
from .optim import train

log = logging.getLogger("cnnlstm_ids")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ArgumentError(UsageError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(message)


# -- argument wiring ------------------------------------------------------------

_RUN_FLAGS = [
    # flag, RunConfig key, type, help
    ("--seed", "seed", int, "seed for splits, initialisation, shuffling and dropout (default 42)"),
    ("--label-column", "label_column", str, "name of the label column (default Label)"),
    ("--normal-label", "normal_label", str, "label value meaning benign traffic (default NORMAL)"),
    ("--dataset", "dataset", str, "identifier drop-list preset: dnp3, iec104 or none"),
    ("--drop-columns", "drop_columns", str, "extra comma-separated columns to ignore"),
    ("--split-ratio", "split_ratio", float, "training share of the stratified split (default 0.7)"),
    ("--fit-scope", "fit_scope", str, "min-max fit on train_only (default) or whole_dataset"),
    ("--threshold", "threshold", float, "attack threshold on the probability (default 0.5)"),
    ("--conv-filters", "conv_filters", str, "filters per conv block (default 64,64,64)"),
    ("--kernel-size", "kernel_size", str, "kernel size per conv block (default 3,3,3)"),
    ("--pool", "pool", int, "max-pool extent (default 2)"),
    ("--lstm-units", "lstm_units", str, "units per LSTM layer, bottom first (default 64,128)"),
    ("--dense-units", "dense_units", int, "width of the dense layer (default 128)"),
    ("--dropout", "dropout", float, "dropout rate after the dense layer (default 0.4)"),
    ("--lr", "learning_rate", float, "Adam learning rate (default 0.001)"),
    ("--epochs", "epochs", int, "maximum epochs (default 150)"),
    ("--batch-size", "batch_size", int, "mini-batch size (default 16)"),
    ("--patience", "patience", int, "early-stopping patience in epochs (default 10)"),
    ("--validation-source", "validation_source", str,
     "early-stopping monitor: carve (slice of the training split) or test"),
    ("--validation-fraction", "validation_fraction", float, "size of the carved validation slice (default 0.1)"),
    ("--pos-weight", "pos_weight", float, "weight of the attack class in the loss (default 1)"),
    ("--folds", "folds", int, "number of cross-validation folds (default 5)"),
]


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value settings file (flags override it)")
    for flag, key, kind, text in _RUN_FLAGS:
        p.add_argument(flag, dest=key, type=kind, default=None, help=text)
    p.add_argument("--no-restore-best", dest="restore_best", action="store_const", const=False, default=None,
                   help="keep the last epoch's weights instead of the best one")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cnnlstm-ids", description="Hybrid CNN-LSTM intrusion detection on flow CSVs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="clean, encode, binarise and normalise a flow CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="normalised CSV to write")
    p.add_argument("--sidecar", help="provenance JSON (default: <out>.json)")
    _add_run_flags(p)

    p = sub.add_parser("train", help="train on the 70%% split, score the 30%% split")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="model file to write")
    p.add_argument("--out", required=True, help="JSON report to write")
    _add_run_flags(p)

    p = sub.add_parser("evaluate", help="score a labelled CSV with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=None)

    p = sub.add_parser("predict", help="write attack probabilities for each row of a CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=None)

    p = sub.add_parser("crossval", help="stratified k-fold cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_run_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer's gradients")
    p.add_argument("--seeds", type=int, default=50)

    p = sub.add_parser("synth", help="write a synthetic two-class flow CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--n-normal", type=int, default=666)
    p.add_argument("--n-attack", type=int, default=6660)
    p.add_argument("--features", type=int, default=60)
    p.add_argument("--separation", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--label-column", default="Label")
    return parser


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    flags = {key: getattr(args, key, None) for _, key, _, _ in _RUN_FLAGS}
    flags["restore_best"] = getattr(args, "restore_best", None)
    return build_run_config(file_values, flags)


# -- pipeline helpers -------------------------------------------------------------

def _load_labelled(path, cfg: RunConfig) -> D.FlowTable:
    table = D.load_csv(path, cfg.label_column, cfg.drop_list())
    return D.clean(D.binarize_labels(table, cfg.normal_label))


def _dataset_section(table: D.FlowTable) -> dict:
    prov = table.provenance
    return {"source": prov.get("source"), "rows": len(table), "features": table.n_features,
            "class_counts": {str(k): v for k, v in table.class_counts().items()},
            "dropped_columns": prov.get("dropped_columns", []),
            "constant_columns": prov.get("constant_columns", []),
            "dropped_rows": prov.get("dropped_rows", 0),
            "encodings": prov.get("encodings", {}), "warnings": prov.get("warnings", [])}


def _split_and_scale(table: D.FlowTable, cfg: RunConfig):
    plan = D.stratified_split(table, cfg.split_ratio, cfg.seed)
    fit_on = table.subset(plan.train) if cfg.fit_scope == "train_only" else table
    spec = D.minmax_fit(fit_on, cfg.fit_scope)
    return plan, spec


def _preprocessing_meta(table: D.FlowTable, spec: D.NormalizationSpec, cfg: RunConfig) -> dict:
    return {"label_column": cfg.label_column, "normal_label": cfg.normal_label,
            "drop_columns": cfg.drop_list(), "normalization": spec.to_dict(),
            "encodings": table.provenance.get("encodings", {})}


def _prepare_for_model(model, path, label_required: bool) -> D.FlowTable:
    meta = model.metadata.get("preprocessing")
    if not meta:
        raise ModelFormatError("model file carries no preprocessing metadata")
    spec = D.NormalizationSpec.from_dict(meta["normalization"])
    table = D.load_csv(path, meta["label_column"], meta["drop_columns"], require_label=label_required)
    table = _apply_encodings(table, meta.get("encodings", {}))
    table = table.select(spec.feature_names)
    if label_required:
        table = D.binarize_labels(table, meta["normal_label"])
    return table, spec


def _apply_encodings(table: D.FlowTable, encodings: dict) -> D.FlowTable:
    """Re-map categorical codes to the ones seen at training time (unseen values become NaN)."""
    local = table.provenance.get("encodings", {})
    X = table.X.copy()
    for name, train_map in encodings.items():
        if name not in table.feature_names:
            continue
        j = table.feature_names.index(name)
        inverse = {code: value for value, code in local.get(name, {}).items()}
        if not inverse:
            continue
        X[:, j] = [train_map.get(inverse.get(int(v)), np.nan) if np.isfinite(v) else np.nan for v in X[:, j]]
    return D.FlowTable(list(table.feature_names), X, table.labels, table.provenance)


def _finite_rows(table: D.FlowTable) -> D.FlowTable:
    keep = np.all(np.isfinite(table.X), axis=1)
    return table.subset(np.flatnonzero(keep))


# -- commands ------------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    cfg = run_config_from_args(args)
    table = _load_labelled(args.data, cfg)
    plan, spec = _split_and_scale(table, cfg)
    scaled = D.minmax_apply(spec, table)
    D.write_csv(scaled, args.out, cfg.label_column)
    sidecar = args.sidecar or str(args.out) + ".json"
    D.write_sidecar({"dataset": _dataset_section(table), "steps": scaled.provenance["steps"],
                     "normalization": spec.to_dict(), "config": cfg.to_dict(),
                     "split": {"ratio": cfg.split_ratio, "seed": cfg.seed,
                               "train": plan.train.tolist(), "test": plan.test.tolist()}}, sidecar)
    print(f"wrote {args.out} ({len(scaled)} rows, {scaled.n_features} features) and {sidecar}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = run_config_from_args(args)
    start = time.perf_counter()
    table = _load_labelled(args.data, cfg)
    plan, spec = _split_and_scale(table, cfg)
    fit = D.minmax_apply(spec, table.subset(plan.train))
    test = D.minmax_apply(spec, table.subset(plan.test))
    arch = cfg.architecture(table.n_features)
    model = build_model(arch, cfg.seed)
    run = train(model, fit, cfg.training(), monitor_table=test)
    model.metadata["preprocessing"] = _preprocessing_meta(table, spec, cfg)
    save_model(model, args.model)
    cm, ms = evaluate(model, test, cfg.threshold)
    report = {
        "command": "train",
        "dataset": _dataset_section(table),
        "config": {"run": cfg.to_dict(), "architecture": arch.to_dict(), "training": cfg.training().to_dict()},
        "seed": cfg.seed,
        "split": {"ratio": cfg.split_ratio, "train_rows": len(plan.train), "test_rows": len(plan.test),
                  "train_class_counts": {str(k): v for k, v in table.subset(plan.train).class_counts().items()},
                  "test_class_counts": {str(k): v for k, v in table.subset(plan.test).class_counts().items()}},
        "training": {"best_epoch": run.best_epoch, "stopped_epoch": run.stopped_epoch, "history": run.history},
        "confusion": cm.to_dict(),
        "metrics": ms.to_dict(),
        "duration_seconds": round(time.perf_counter() - start, 3),
    }
    write_report(report, args.out)
    print(f"test accuracy {ms.accuracy:.2f}%  precision {ms.precision:.2f}%  recall {ms.recall:.2f}%  "
          f"F1 {ms.f1:.2f}%  (best epoch {run.best_epoch}/{run.stopped_epoch})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    start = time.perf_counter()
    model = load_model(args.model)
    table, spec = _prepare_for_model(model, args.data, label_required=True)
    table = D.minmax_apply(spec, _finite_rows(table))
    threshold = 0.5 if args.threshold is None else args.threshold
    cm, ms = evaluate(model, table, threshold)
    write_report({"command": "evaluate", "model": str(args.model), "dataset": _dataset_section(table),
                  "config": {"architecture": model.config.to_dict(), "threshold": threshold},
                  "seed": model.seed, "confusion": cm.to_dict(), "metrics": ms.to_dict(),
                  "duration_seconds": round(time.perf_counter() - start, 3)}, args.out)
    print(f"accuracy {ms.accuracy:.2f}%  precision {ms.precision:.2f}%  recall {ms.recall:.2f}%  F1 {ms.f1:.2f}%")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_model(args.model)
    table, spec = _prepare_for_model(model, args.data, label_required=False)
    bad = np.flatnonzero(~np.all(np.isfinite(table.X), axis=1))
    if bad.size:
        raise DataError(f"rows {bad[:10].tolist()} contain missing or non-finite values")
    p = predict_proba(model, D.minmax_apply(spec, table).X)
    threshold = 0.5 if args.threshold is None else args.threshold
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "probability", "prediction"])
        for i, pi in enumerate(p):
            w.writerow([i, repr(float(pi)), int(pi >= threshold)])
    print(f"wrote {len(p)} predictions to {args.out}")
    return EXIT_OK


def cmd_crossval(args) -> int:
    cfg = run_config_from_args(args)
    start = time.perf_counter()
    table = _load_labelled(args.data, cfg)
    arch = cfg.architecture(table.n_features)
    arch.validate()
    cv = crossval(table, arch, cfg.training(), cfg.folds, cfg.seed, cfg.threshold)
    write_report({"command": "crossval", "dataset": _dataset_section(table),
                  "config": {"run": cfg.to_dict(), "architecture": arch.to_dict(),
                             "training": cfg.training().to_dict()},
                  "seed": cfg.seed, "crossval": cv_section(cv),
                  "duration_seconds": round(time.perf_counter() - start, 3)}, args.out)
    m = cv.means
    print(f"{cv.k}-fold means: accuracy {m['accuracy']:.2f}%  precision {m['precision']:.2f}%  "
          f"recall {m['recall']:.2f}%  F1 {m['f1']:.2f}%  loss {m['loss']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    results = run_gradcheck(args.seeds)
    print(format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_synth(args) -> int:
    table = D.generate_synthetic(args.n_normal, args.n_attack, args.features, args.separation, args.seed)
    named = replace(table, labels=np.array(["NORMAL" if v == 0 else "ATTACK" for v in table.labels], dtype=object))
    D.write_csv(named, args.out, args.label_column)
    print(f"wrote {len(table)} rows to {args.out}")
    return EXIT_OK


COMMANDS = {"preprocess": cmd_preprocess, "train": cmd_train, "evaluate": cmd_evaluate,
            "predict": cmd_predict, "crossval": cmd_crossval, "gradcheck": cmd_gradcheck, "synth": cmd_synth}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ArgumentError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, NonFiniteError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ModelFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except IdsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
