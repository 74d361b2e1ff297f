"""Metrics, feature importance, and the five-model comparison protocol."""

from __future__ import annotations

import hashlib
import json
import logging
import traceback
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import AGES, split_80_20
from .errors import UndefinedMetricError
from .models import DISPLAY_NAMES, MODEL_KINDS, ModelConfigs, derive_seed, make_regressor

log = logging.getLogger(__name__)


def r2(actual, pred):
    a = np.asarray(actual, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if len(a) < 2:
        raise UndefinedMetricError("R² needs at least two values")
    ss_tot = np.sum((a - a.mean()) ** 2)
    if ss_tot == 0:
        raise UndefinedMetricError("R² is undefined for constant actuals")
    return float(1.0 - np.sum((a - p) ** 2) / ss_tot)


def mae(actual, pred):
    a = np.asarray(actual, dtype=np.float64)
    return float(np.mean(np.abs(a - np.asarray(pred, dtype=np.float64))))


def mape(actual, pred):
    a = np.asarray(actual, dtype=np.float64)
    if (a <= 0).any():
        raise UndefinedMetricError("MAPE needs strictly positive actuals")
    return float(100.0 * np.mean(np.abs(a - np.asarray(pred, dtype=np.float64)) / a))


METRICS = {"r2": r2, "mae": mae, "mape": mape}


@dataclass
class Importance:
    method: str                 # "intrinsic" | "permutation"
    raw: np.ndarray
    values: np.ndarray          # normalised to sum 1
    degenerate: bool = False    # raw was all zero; values fell back to uniform


def normalize(raw):
    raw = np.clip(np.asarray(raw, dtype=np.float64), 0.0, None)
    total = raw.sum()
    if total > 0:
        return raw / total, False
    return np.full(len(raw), 1.0 / len(raw)), True


def permutation_importance(model, test, metric=mae, repeats=5, seed=0):
    """Mean metric increase when one original feature column is shuffled.

    A categorical feature is shuffled as a whole index column, which moves its
    one-hot group jointly.
    """
    rng = np.random.default_rng(seed)
    baseline = metric(test.target, model.predict(test))
    p_num = test.schema.p_num
    raw = np.zeros(len(test.schema.feature_names))
    for j in range(len(raw)):
        deltas = []
        for _ in range(repeats):
            perm = rng.permutation(test.n)
            num, cat = test.numeric.copy(), test.categorical.copy()
            if j < p_num:
                num[:, j] = num[perm, j]
            else:
                cat[:, j - p_num] = cat[perm, j - p_num]
            pred = model.predict_rows(num, cat, test.schema)
            deltas.append(metric(test.target, pred) - baseline)
        raw[j] = max(0.0, float(np.mean(deltas)))
    values, degenerate = normalize(raw)
    return Importance("permutation", raw, values, degenerate)


def intrinsic_importance(model):
    raw = model.intrinsic_importance()
    if raw is None:
        return None
    values, degenerate = normalize(raw)
    return Importance("intrinsic", np.asarray(raw, dtype=np.float64), values, degenerate)


def _digest(rows):
    return hashlib.sha256(np.ascontiguousarray(rows, dtype="<i8").tobytes()).hexdigest()[:16]


@dataclass
class ModelResult:
    kind: str
    age: int
    r2: float = float("nan")
    mae_psi: float = float("nan")
    mape_percent: float = float("nan")
    n_test: int = 0
    train_digest: str = ""
    test_digest: str = ""
    error: str | None = None
    actual: np.ndarray = None
    predicted: np.ndarray = None


@dataclass
class EvalReport:
    seed: int
    results: dict = field(default_factory=dict)             # (kind, age) -> ModelResult
    importance: dict = field(default_factory=dict)          # kind -> Importance (reported)
    permutation: dict = field(default_factory=dict)         # kind -> Importance
    feature_names: list = field(default_factory=list)
    split_seeds: dict = field(default_factory=dict)
    importance_age: int = 28
    kinds: tuple = MODEL_KINDS
    ages: tuple = AGES

    @property
    def ok(self):
        return all(r.error is None for r in self.results.values())

    def metric_cells(self):
        return [(k, a, m) for k in self.kinds for a in self.ages
                for m in ("r2", "mae_psi", "mape_percent")
                if (k, a) in self.results and self.results[k, a].error is None]

    def to_dict(self, footer=None):
        doc = {
            "seed": self.seed,
            "split_seeds": {str(a): s for a, s in self.split_seeds.items()},
            "importance_age": self.importance_age,
            "features": list(self.feature_names),
            "metrics": {},
            "importance": {},
            "permutation_importance": {},
            "errors": {},
        }
        for (kind, age), r in self.results.items():
            if r.error is not None:
                doc["errors"].setdefault(kind, {})[str(age)] = r.error
                continue
            doc["metrics"].setdefault(kind, {})[str(age)] = {
                "r2": r.r2, "mae_psi": r.mae_psi, "mape_percent": r.mape_percent,
                "n_test": r.n_test, "train_rows_sha": r.train_digest,
                "test_rows_sha": r.test_digest,
            }
        for key, table in (("importance", self.importance),
                           ("permutation_importance", self.permutation)):
            for kind, imp in table.items():
                doc[key][kind] = {
                    "method": imp.method,
                    "degenerate": imp.degenerate,
                    "values": dict(zip(self.feature_names, map(float, imp.values))),
                    "raw": dict(zip(self.feature_names, map(float, imp.raw))),
                }
        if footer:
            doc["footer"] = footer
        return doc

    def to_json(self, footer=None):
        return json.dumps(self.to_dict(footer), indent=2, sort_keys=True) + "\n"

    def to_table(self, footer=None):
        cols = ["R² 7-Day", "R² 28-Day", "MAE 7-Day", "MAE 28-Day", "MAPE 7-Day", "MAPE 28-Day"]
        width = max(len(DISPLAY_NAMES[k]) for k in self.kinds) + 2
        lines = ["Model performance comparison (7-Day and 28-Day predictions)", "",
                 "Method".ljust(width) + "".join(c.rjust(13) for c in cols)]
        lines.append("-" * len(lines[-1]))
        for kind in self.kinds:
            cells = []
            for metric, fmt in (("r2", "{:.2f}"), ("mae_psi", "{:.2f}"), ("mape_percent", "{:.2f}")):
                for age in self.ages:
                    r = self.results.get((kind, age))
                    cells.append("error" if r is None or r.error else fmt.format(getattr(r, metric)))
            lines.append(DISPLAY_NAMES[kind].ljust(width) + "".join(c.rjust(13) for c in cells))
        lines += ["", "MAE in psi, MAPE in %.", "",
                  f"Relative importance of the input variables ({self.importance_age}-day fits)", ""]
        kinds = [k for k in self.kinds if k in self.importance]
        fw = max(len(f) for f in self.feature_names) + 2
        lines.append("Feature".ljust(fw) + "".join(k.rjust(13) for k in kinds))
        lines.append("".ljust(fw) + "".join(
            f"({self.importance[k].method[:5]})".rjust(13) for k in kinds))
        for j, name in enumerate(self.feature_names):
            lines.append(name.ljust(fw) + "".join(
                f"{self.importance[k].values[j]:.4f}".rjust(13) for k in kinds))
        for kind, age in sorted(self.results):
            r = self.results[kind, age]
            if r.error:
                lines.append(f"ERROR {kind} {age}-day: {r.error.splitlines()[0]}")
        if footer:
            lines += [""] + [f"{k}: {v}" for k, v in footer.items()]
        return "\n".join(lines) + "\n"


def run_comparison(datasets, configs=None, seed=42, kinds=MODEL_KINDS, permutation_repeats=5,
                   importance_age=28, progress=None):
    """Fit every model kind on the same 80% split per age and score the 20% test split.

    Each age is split independently with a seed derived from ``seed``; each
    model gets its own derived seed. Importance is computed on the
    ``importance_age`` fits: intrinsic where the model defines it, otherwise
    permutation (test split, MAE). Permutation importance is computed for
    every model as well. Failures become error entries instead of aborting.
    """
    configs = configs or ModelConfigs()
    first = next(iter(datasets.values()))
    report = EvalReport(seed=seed, feature_names=first.schema.feature_names,
                        importance_age=importance_age, kinds=tuple(kinds),
                        ages=tuple(sorted(datasets)))
    for age in report.ages:
        split_seed = derive_seed(seed, "split", age)
        report.split_seeds[age] = split_seed
        train, test = split_80_20(datasets[age], split_seed)
        for kind in kinds:
            res = ModelResult(kind, age, train_digest=_digest(train.rows),
                              test_digest=_digest(test.rows))
            report.results[kind, age] = res
            if progress:
                progress(f"fitting {kind} ({age}-day, n_train={train.n})")
            try:
                model = make_regressor(kind, configs).fit(train, seed=derive_seed(seed, kind, age))
                pred = model.predict(test)
                res.r2, res.mae_psi = r2(test.target, pred), mae(test.target, pred)
                res.mape_percent, res.n_test = mape(test.target, pred), test.n
                res.actual, res.predicted = test.target.copy(), pred
                if age == importance_age:
                    perm = permutation_importance(model, test, mae, permutation_repeats,
                                                  seed=derive_seed(seed, "perm", kind))
                    report.permutation[kind] = perm
                    report.importance[kind] = intrinsic_importance(model) or perm
            except Exception as exc:  # noqa: BLE001 - recorded in the report
                log.warning("%s (%s-day) failed: %s\n%s", kind, age, exc, traceback.format_exc())
                res.error = f"{type(exc).__name__}: {exc}"
    return report
