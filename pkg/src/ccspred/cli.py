"""Command-line entry point: ``ccspred {generate,train,compare,predict,config-schema}``.

Every command reads a JSON run configuration; ``--seed`` and ``--output-dir``
only override values from that file. Exit status is 0 iff every requested
output was fully written (argparse usage errors exit with 2).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, container
from .config import config_schema, load_config
from .dataset import (AGES, FeatureSchema, default_schema, generate_synthetic, load_csv,
                      split_80_20, write_csv)
from .errors import CCSError, EmptyDatasetError, SchemaError
from .evaluation import mae, mape, r2, run_comparison
from .models import MODEL_KINDS, derive_seed, make_regressor

log = logging.getLogger("ccspred")

CSV_NAMES = {7: "concrete_7d.csv", 28: "concrete_28d.csv"}
SIDECAR = "generator_sidecar.json"
PREDICTION_COLUMN = "predicted_psi"


# -- file helpers -----------------------------------------------------------

class _Staged:
    """Collects temp files and renames them into place only when all succeeded."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.pending = []

    def path(self, name):
        fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.dir)
        os.close(fd)
        self.pending.append((Path(tmp), self.dir / name))
        return tmp

    def text(self, name, content):
        with open(self.path(name), "w", encoding="utf-8", newline="") as fh:
            fh.write(content)

    def commit(self):
        mask = os.umask(0)
        os.umask(mask)
        for tmp, final in self.pending:
            os.chmod(tmp, 0o666 & ~mask)    # mkstemp creates 0600
            os.replace(tmp, final)
        self.pending = []

    def discard(self):
        for tmp, _ in self.pending:
            tmp.unlink(missing_ok=True)
        self.pending = []


def _output_dir(cfg, args):
    # the --output-dir flag beats the environment variable, which beats the config
    out = Path(args.output_dir) if getattr(args, "output_dir", None) else cfg.output_path
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- data -------------------------------------------------------------------

def load_datasets(cfg):
    """{age: EncodedDataset} from the config's generator or CSV pair.

    CSV vocabularies are unified across both files: the second file extends
    what the first one introduced, and both end up under the same schema.
    """
    src = cfg.data
    if src.generator is not None:
        return generate_synthetic(src.generator)
    if src.schema is not None:
        schema, fit = FeatureSchema.load(cfg.resolve(src.schema)), False
    else:
        schema, fit = default_schema(), True
    loaded = {}
    for age, path in ((7, src.csv_7), (28, src.csv_28)):
        if path is None:
            continue
        res = load_csv(cfg.resolve(path), schema, fit=fit)
        if age not in res.datasets:
            raise SchemaError(f"{path}: no {age}-day target column "
                              f"{res.schema.target_name(age)!r}")
        schema = res.schema
        loaded[age] = res.datasets[age]
        for a, n in res.dropped.items():
            if a == age and n:
                log.warning("%s: dropped %d incomplete rows", path, n)
    return {age: replace(ds, schema=schema) for age, ds in loaded.items()}


def _read_prediction_input(path, schema):
    """Encode a prediction CSV, keeping every row (no dropping)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: missing header row") from None
        rows = [r for r in reader if r]
    col = {name.strip(): i for i, name in enumerate(header)}
    for name in schema.feature_names:
        if name not in col:
            raise SchemaError(f"missing column {name!r}")
    num = np.empty((len(rows), schema.p_num))
    cat = np.empty((len(rows), schema.p_cat), dtype=np.int64)
    for i, r in enumerate(rows):
        for j, s in enumerate(schema.numerical):
            raw = r[col[s.name]] if col[s.name] < len(r) else ""
            try:
                num[i, j] = float(raw)
            except ValueError:
                raise SchemaError(f"row {i + 2}: column {s.name!r} is not numeric: {raw!r}") from None
        for j, s in enumerate(schema.categorical):
            raw = r[col[s.name]].strip() if col[s.name] < len(r) else ""
            cat[i, j] = s.index(raw)
    return header, rows, num, cat


# -- commands ---------------------------------------------------------------

def cmd_generate(cfg, args):
    gen = cfg.data.generator
    if gen is None:
        raise SchemaError("generate needs a 'data.generator' block in the config")
    data = generate_synthetic(gen)
    out = _output_dir(cfg, args)
    sidecar = cfg.to_dict()
    sidecar["output_dir"] = "."
    stage = _Staged(out)
    try:
        for age in AGES:
            write_csv(stage.path(CSV_NAMES[age]), [data[age]])
        stage.text(SIDECAR, json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        stage.commit()
    finally:
        stage.discard()
    print(f"wrote {data[28].n} rows to {out / CSV_NAMES[7]} and {out / CSV_NAMES[28]}")
    return 0


def cmd_train(cfg, args):
    age, kind = args.age, args.model
    data = load_datasets(cfg)
    if age not in data:
        raise EmptyDatasetError(f"no {age}-day data configured")
    train, test = split_80_20(data[age], derive_seed(cfg.seed, "split", age))
    model = make_regressor(kind, cfg.models).fit(train, seed=derive_seed(cfg.seed, kind, age))
    out = _output_dir(cfg, args)
    name = f"model_{kind}_{age}d.ccsm"
    stage = _Staged(out)
    try:
        with open(stage.path(name), "wb") as fh:
            fh.write(container.dumps(model))
        stage.text("schema.json", model.schema.to_json() + "\n")
        stage.commit()
    finally:
        stage.discard()
    for label, part in (("train", train), ("test", test)):
        pred = model.predict(part)
        print(f"{label:5s} n={part.n:6d}  R2={r2(part.target, pred):.4f}  "
              f"MAE={mae(part.target, pred):.2f} psi  MAPE={mape(part.target, pred):.2f}%")
    hist = getattr(model, "history", None)
    if hist is not None and hist.val_loss:
        print(f"best validation MSE {min(hist.val_loss):.6f} ksi^2 at epoch {hist.best_epoch}")
    print(f"saved {out / name}")
    return 0


def _importance_csv(report):
    kinds = [k for k in report.kinds if k in report.importance]
    lines = [",".join(["feature"] + kinds)]
    lines.append(",".join(["method"] + [report.importance[k].method for k in kinds]))
    for j, f in enumerate(report.feature_names):
        lines.append(",".join([f] + [repr(float(report.importance[k].values[j])) for k in kinds]))
    return "\n".join(lines) + "\n"


def cmd_compare(cfg, args):
    data = load_datasets(cfg)
    report = run_comparison(data, cfg.models, seed=cfg.seed,
                            permutation_repeats=cfg.evaluation.permutation_repeats,
                            importance_age=cfg.evaluation.importance_age,
                            progress=lambda msg: log.info(msg))
    footer = {"ccspred_version": __version__, "config_hash": cfg.hash()}
    out = _output_dir(cfg, args)
    stage = _Staged(out)
    try:
        stage.text("report.txt", report.to_table(footer))
        stage.text("report.json", report.to_json(footer))
        for (kind, age), res in sorted(report.results.items()):
            if res.error is None:
                body = "actual_psi,predicted_psi\n" + "".join(
                    f"{a!r},{p!r}\n" for a, p in zip(res.actual.tolist(), res.predicted.tolist()))
                stage.text(f"scatter_{kind}_{age}.csv", body)
        if report.importance:
            stage.text("importance.csv", _importance_csv(report))
        stage.commit()
    finally:
        stage.discard()
    sys.stdout.write(report.to_table(footer))
    if not report.ok:
        print("one or more models failed; see the ERROR lines above", file=sys.stderr)
        return 1
    return 0


def cmd_predict(cfg, args):
    model = container.load(args.model_file)
    header, rows, num, cat = _read_prediction_input(args.input, model.schema)
    pred = model.predict_rows(num, cat, model.schema)
    output = Path(args.output)
    output.parent.mkdir(parents=True, exist_ok=True)
    stage = _Staged(output.parent)
    try:
        with open(stage.path(output.name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header + [PREDICTION_COLUMN])
            for r, p in zip(rows, pred.tolist()):
                w.writerow(r + [repr(p)])
        stage.commit()
    finally:
        stage.discard()
    print(f"wrote {len(rows)} predictions to {output}")
    return 0


def cmd_config_schema(cfg, args):
    sys.stdout.write(json.dumps(config_schema(), indent=2, sort_keys=True) + "\n")
    return 0


# -- argument parsing -------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="ccspred", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ccspred {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--output-dir", help="override the config output directory")
        return p

    with_config(sub.add_parser("generate", help="write the synthetic 7/28-day CSV pair"))
    p = with_config(sub.add_parser("train", help="fit one model on the 80%% split and save it"))
    p.add_argument("--model", required=True, choices=MODEL_KINDS)
    p.add_argument("--age", required=True, type=int, choices=AGES)
    with_config(sub.add_parser("compare", help="fit all five models and write the reports"))
    p = sub.add_parser("predict", help="append predicted_psi to a CSV using a saved model")
    p.add_argument("--model-file", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    sub.add_parser("config-schema", help="print the JSON Schema for config files")
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "compare": cmd_compare,
    "predict": cmd_predict,
    "config-schema": cmd_config_schema,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None
        if getattr(args, "config", None):
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg.seed = args.seed
        return COMMANDS[args.command](cfg, args)
    except (CCSError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
