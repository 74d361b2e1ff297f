"""Feature schema, CSV ingestion, encoding/splitting, and the synthetic generator."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import (ConfigError, ConstantColumnError, EmptyDatasetError,
                     OutOfVocabularyError, SchemaError)

AGES = (7, 28)


@dataclass(frozen=True)
class NumericalSpec:
    name: str
    unit: str
    min: float
    max: float


@dataclass(frozen=True)
class CategoricalSpec:
    name: str
    vocab: tuple = ()

    @property
    def K(self):
        return len(self.vocab)

    def index(self, value):
        try:
            return self.vocab.index(value)
        except ValueError:
            raise OutOfVocabularyError(value, self.name) from None


@dataclass(frozen=True)
class FeatureSchema:
    numerical: tuple
    categorical: tuple
    targets: tuple = (("7", "strength_7d_psi"), ("28", "strength_28d_psi"))

    def __post_init__(self):
        names = [s.name for s in self.numerical] + [s.name for s in self.categorical]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate feature names in {names}")
        for s in self.numerical:
            if not s.min < s.max:
                raise SchemaError(f"{s.name}: min {s.min} must be < max {s.max}")
        for s in self.categorical:
            if len(set(s.vocab)) != len(s.vocab):
                raise SchemaError(f"{s.name}: duplicate vocabulary entries")

    @property
    def feature_names(self):
        return [s.name for s in self.numerical] + [s.name for s in self.categorical]

    @property
    def p_num(self):
        return len(self.numerical)

    @property
    def p_cat(self):
        return len(self.categorical)

    @property
    def cardinalities(self):
        return [s.K for s in self.categorical]

    @property
    def one_hot_width(self):
        return self.p_num + sum(self.cardinalities)

    def target_name(self, age):
        for a, name in self.targets:
            if int(a) == int(age):
                return name
        raise SchemaError(f"no target column for age {age}")

    def check_fitted(self):
        for s in self.categorical:
            if s.K < 1:
                raise SchemaError(f"{s.name}: empty vocabulary")

    def to_dict(self):
        return {
            "numerical": [{"name": s.name, "unit": s.unit, "min": s.min, "max": s.max}
                          for s in self.numerical],
            "categorical": [{"name": s.name, "vocab": list(s.vocab)} for s in self.categorical],
            "targets": {a: name for a, name in self.targets},
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                numerical=tuple(NumericalSpec(x["name"], x["unit"], float(x["min"]), float(x["max"]))
                                for x in d["numerical"]),
                categorical=tuple(CategoricalSpec(x["name"], tuple(x["vocab"]))
                                  for x in d["categorical"]),
                targets=tuple(sorted(((str(a), n) for a, n in d["targets"].items()),
                                     key=lambda t: int(t[0]))),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed schema document: {exc}") from None

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


# Field-dataset summary statistics: (name, unit, min, max, mean, std).
FEATURE_TABLE = (
    ("cement_lb_cy", "lb/CY", 208.5, 1380.0, 571.95, 73.67),
    ("wc_ratio", "", 0.14, 3.03, 0.38, 0.06),
    ("concrete_temp_f", "F", 50.0, 97.0, 76.0, 8.96),
    ("air_temp_f", "F", 35.0, 109.0, 71.1, 14.97),
    ("elapsed_time_min", "min", 5.0, 118.0, 39.7, 13.43),
    ("placement_air_pct", "%", 1.0, 9.5, 4.3, 1.1),
    ("placement_slump_in", "in", 1.0, 9.0, 5.5, 1.5),
)
MATERIAL_CODE = "material_code"
FRACTURE_TYPE = "fracture_type"
FRACTURE_TYPES = ("cone", "cone_and_split", "columnar", "shear", "side_fracture", "end_fracture")


def default_schema(material_codes=(), fracture_types=()):
    """Standard nine-feature layout; vocabularies are empty until fitted unless given."""
    return FeatureSchema(
        numerical=tuple(NumericalSpec(n, u, lo, hi) for n, u, lo, hi, _, _ in FEATURE_TABLE),
        categorical=(CategoricalSpec(MATERIAL_CODE, tuple(material_codes)),
                     CategoricalSpec(FRACTURE_TYPE, tuple(fracture_types))),
    )


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EncodedDataset:
    schema: FeatureSchema
    numeric: np.ndarray        # [n, p_num]
    categorical: np.ndarray    # [n, p_cat] vocabulary indices
    target: np.ndarray         # [n] psi
    age: int
    rows: np.ndarray = None    # source row ids, carried through take()

    def __post_init__(self):
        n = len(self.target)
        num = _frozen(self.numeric, np.float64).reshape(n, self.schema.p_num)
        cat = _frozen(self.categorical, np.int64).reshape(n, self.schema.p_cat)
        rows = np.arange(n) if self.rows is None else self.rows
        object.__setattr__(self, "numeric", num)
        object.__setattr__(self, "categorical", cat)
        object.__setattr__(self, "target", _frozen(self.target, np.float64))
        object.__setattr__(self, "rows", _frozen(rows, np.int64))
        if len(self.rows) != n:
            raise SchemaError("row count mismatch between blocks")
        if n and not (self.target > 0).all():
            raise SchemaError("targets must be strictly positive")
        for j, spec in enumerate(self.schema.categorical):
            col = cat[:, j]
            if n and (col.min() < 0 or col.max() >= spec.K):
                bad = int(col[(col < 0) | (col >= spec.K)][0])
                raise OutOfVocabularyError(bad, spec.name)

    def __len__(self):
        return len(self.target)

    @property
    def n(self):
        return len(self.target)

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, numeric=self.numeric[idx], categorical=self.categorical[idx],
                       target=self.target[idx], rows=self.rows[idx])

    def with_numeric(self, numeric):
        return replace(self, numeric=numeric)

    def features(self):
        """Raw feature matrix [n, p_num + p_cat] with categories as float indices."""
        return np.hstack([self.numeric, self.categorical.astype(np.float64)])


@dataclass
class CsvLoad:
    schema: FeatureSchema
    datasets: dict
    dropped: dict


def _parse_float(s):
    try:
        v = float(s)
    except (TypeError, ValueError):
        return None
    return v if math.isfinite(v) else None


def load_csv(path, schema, fit=True):
    """Read a CSV into one EncodedDataset per target column present.

    Rows with a blank/unparseable feature (or non-positive target) are dropped
    and counted. In fit mode unseen categories extend the vocabulary in
    first-appearance order; otherwise they raise OutOfVocabularyError.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: missing header row") from None
        col = {name.strip(): i for i, name in enumerate(header)}
        for name in schema.feature_names:
            if name not in col:
                raise SchemaError(f"missing column {name!r}")
        ages = [int(a) for a, name in schema.targets if name in col]
        if not ages:
            names = [name for _, name in schema.targets]
            raise SchemaError(f"no target column among {names}")
        vocabs = [list(s.vocab) for s in schema.categorical]
        lookup = [{v: i for i, v in enumerate(voc)} for voc in vocabs]
        num_rows, cat_rows, targets, dropped_features = [], [], {a: [] for a in ages}, 0
        for record in reader:
            if not record:
                continue
            nums = [_parse_float(record[col[s.name]]) if col[s.name] < len(record) else None
                    for s in schema.numerical]
            cats = [record[col[s.name]].strip() if col[s.name] < len(record) else ""
                    for s in schema.categorical]
            if any(v is None for v in nums) or any(c == "" for c in cats):
                dropped_features += 1
                continue
            idx = []
            for j, c in enumerate(cats):
                k = lookup[j].get(c)
                if k is None:
                    if not fit:
                        raise OutOfVocabularyError(c, schema.categorical[j].name)
                    k = lookup[j][c] = len(vocabs[j])
                    vocabs[j].append(c)
                idx.append(k)
            num_rows.append(nums)
            cat_rows.append(idx)
            for a in ages:
                name = schema.target_name(a)
                t = _parse_float(record[col[name]]) if col[name] < len(record) else None
                targets[a].append(t if t is not None and t > 0 else None)

    fitted = replace(schema, categorical=tuple(
        replace(s, vocab=tuple(v)) for s, v in zip(schema.categorical, vocabs)))
    num = np.array(num_rows, dtype=np.float64).reshape(-1, schema.p_num)
    cat = np.array(cat_rows, dtype=np.int64).reshape(-1, schema.p_cat)
    datasets, dropped = {}, {}
    for a in ages:
        t = targets[a]
        keep = np.array([v is not None for v in t], dtype=bool)
        dropped[a] = dropped_features + int((~keep).sum())
        if not keep.any():
            raise EmptyDatasetError(f"{path}: zero usable rows for {a}-day target")
        tv = np.array([v for v in t if v is not None], dtype=np.float64)
        datasets[a] = EncodedDataset(fitted, num[keep], cat[keep], tv, a,
                                     rows=np.flatnonzero(keep))
    return CsvLoad(fitted, datasets, dropped)


def write_csv(path, datasets):
    """Write one or more same-feature datasets (different ages) as one CSV."""
    first = datasets[0]
    schema = first.schema
    header = schema.feature_names + [schema.target_name(d.age) for d in datasets]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(first.n):
            row = [repr(float(v)) for v in first.numeric[i]]
            row += [s.vocab[k] for s, k in zip(schema.categorical, first.categorical[i])]
            row += [repr(float(d.target[i])) for d in datasets]
            w.writerow(row)


def split_80_20(ds, seed):
    """Random 80/20 partition; train gets ceil(0.8 n) rows."""
    n = ds.n
    if n < 5:
        raise EmptyDatasetError(f"too few rows to split: {n} < 5")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = math.ceil(0.8 * n)
    return ds.take(perm[:n_train]), ds.take(perm[n_train:])


@dataclass(frozen=True, eq=False)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x):
        return (x - self.mean) / self.std

    def invert(self, z):
        return z * self.std + self.mean


def fit_standardize(train):
    x = train.numeric
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    for j, s in enumerate(std):
        if not s > 0:
            raise ConstantColumnError(f"constant column {train.schema.numerical[j].name!r}")
    return StandardizationStats(mean, std)


def apply_standardize(ds, stats):
    return ds.with_numeric(stats.apply(ds.numeric))


def one_hot(ds):
    """[n, p_num + sum K]: numeric block followed by one indicator group per categorical."""
    return one_hot_arrays(ds.numeric, ds.categorical, ds.schema.cardinalities)


def one_hot_arrays(numeric, categorical, cardinalities):
    n = len(numeric)
    blocks = [np.asarray(numeric, dtype=np.float64)]
    for j, k in enumerate(cardinalities):
        block = np.zeros((n, k))
        block[np.arange(n), categorical[:, j]] = 1.0
        blocks.append(block)
    return np.hstack(blocks)


def one_hot_groups(schema):
    """Column slice of each original feature within the one-hot layout."""
    groups = [slice(j, j + 1) for j in range(schema.p_num)]
    start = schema.p_num
    for k in schema.cardinalities:
        groups.append(slice(start, start + k))
        start += k
    return groups


# -- synthetic data ---------------------------------------------------------

@dataclass
class GeneratorConfig:
    """Synthetic stand-in for the field dataset.

    The 28-day strength follows an Abrams-law core::

        S28 = A / B**wc * (cement/cement_ref)**cement_exponent
              * (1 - air_penalty*(air - air_ref)) * exp(temp terms)
              * exp(code effect) * exp(N(0, cov_28**2))

    and S7 = maturity_ratio * S28 * exp(N(0, cov_7**2)). Elapsed time and
    slump do not enter the strength.
    """

    n: int = 20000
    seed: int = 42
    cov_28: float = 0.04
    cov_7: float = 0.06
    n_material_codes: int = 142
    n_fracture_types: int = 6
    abrams_a: float = 18000.0
    abrams_b: float = 20.0
    cement_exponent: float = 0.5
    cement_ref: float = 572.0
    air_penalty: float = 0.05
    air_ref: float = 4.3
    concrete_temp_linear: float = -0.004
    concrete_temp_quadratic: float = -0.0015
    concrete_temp_ref: float = 76.0
    air_temp_linear: float = 0.002
    air_temp_ref: float = 71.1
    code_sigma: float = 0.06
    maturity_ratio: float = 0.72
    fracture_noise: float = 0.5
    feature_spread: float = 1.0

    def validate(self):
        if self.n < 1:
            raise ConfigError(f"generator n must be >= 1, got {self.n}")
        for name in ("cov_28", "cov_7", "code_sigma", "feature_spread", "fracture_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.cov_7 <= self.cov_28 and (self.cov_7 or self.cov_28):
            raise ConfigError("cov_7 must exceed cov_28")
        if not 0 < self.maturity_ratio < 1:
            raise ConfigError("maturity_ratio must lie in (0, 1)")
        if not self.abrams_b > 1:
            raise ConfigError("abrams_b must be > 1")
        if self.n_material_codes < 1:
            raise ConfigError("n_material_codes must be >= 1")
        if not 1 <= self.n_fracture_types <= len(FRACTURE_TYPES):
            raise ConfigError(f"n_fracture_types must be in [1, {len(FRACTURE_TYPES)}]")
        if not 0 <= self.fracture_noise <= 1:
            raise ConfigError("fracture_noise must lie in [0, 1]")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def latent_strength(self, numeric, code_effect):
        """Noise-free 28-day strength for raw numeric rows (column order of FEATURE_TABLE)."""
        cement, wc, t_conc, t_air = numeric[:, 0], numeric[:, 1], numeric[:, 2], numeric[:, 3]
        air = numeric[:, 5]
        dt = t_conc - self.concrete_temp_ref
        temp = (self.concrete_temp_linear * dt + self.concrete_temp_quadratic * dt * dt
                + self.air_temp_linear * (t_air - self.air_temp_ref))
        return (self.abrams_a / self.abrams_b ** wc
                * (cement / self.cement_ref) ** self.cement_exponent
                * (1.0 - self.air_penalty * (air - self.air_ref))
                * np.exp(temp + code_effect))


def material_code_names(k):
    """Plant / class / fly-ash % / HPC / cement-type codes, e.g. ``1-C20HPC-1L``."""
    combos = itertools.product((1, 2, 3), ("A", "AA", "B", "C", "D", "S"), (0, 15, 20, 25),
                               ("", "HPC"), ("1L", "1"))
    names = [f"{p}-{c}{fa if fa else ''}{h}-{ct}" for p, c, fa, h, ct in combos]
    if k > len(names):
        names += [f"X-{i:04d}" for i in range(k - len(names))]
    return names[:k]


def _truncated_normal(rng, mean, std, lo, hi, n):
    if std == 0:
        return np.full(n, float(mean))
    out = rng.normal(mean, std, n)
    bad = (out < lo) | (out > hi)
    while bad.any():
        out[bad] = rng.normal(mean, std, int(bad.sum()))
        bad = (out < lo) | (out > hi)
    return out


def _first_appearance(codes, k):
    """Relabel integer codes by first appearance; unseen codes are dropped."""
    _, first = np.unique(codes, return_index=True)
    order = [int(codes[i]) for i in np.sort(first)]
    remap = np.full(k, -1, dtype=np.int64)
    remap[order] = np.arange(len(order))
    return remap[codes], order


def generate_synthetic(cfg, return_latent=False):
    """Return ``{7: EncodedDataset, 28: EncodedDataset}`` sharing feature rows.

    With ``return_latent`` also return the noise-free 28-day strength per row.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n
    numeric = np.column_stack([
        _truncated_normal(rng, mean, std * cfg.feature_spread, lo, hi, n)
        for _, _, lo, hi, mean, std in FEATURE_TABLE
    ])
    code_effects = rng.normal(0.0, 1.0, cfg.n_material_codes) * cfg.code_sigma
    codes = rng.integers(0, cfg.n_material_codes, n)
    latent = cfg.latent_strength(numeric, code_effects[codes])
    s28 = latent * np.exp(rng.normal(0.0, 1.0, n) * cfg.cov_28)
    s7 = cfg.maturity_ratio * s28 * np.exp(rng.normal(0.0, 1.0, n) * cfg.cov_7)
    s28 = np.maximum(s28, 1.0)
    s7 = np.maximum(s7, 1.0)

    # fracture mode: strength sextile, replaced by a random mode with prob fracture_noise
    k_frac = cfg.n_fracture_types
    rank = np.argsort(np.argsort(s28, kind="stable"), kind="stable")
    frac = (rank * k_frac) // n
    noisy = rng.random(n) < cfg.fracture_noise
    frac = np.where(noisy, rng.integers(0, k_frac, n), frac)

    codes, code_order = _first_appearance(codes, cfg.n_material_codes)
    frac, frac_order = _first_appearance(frac, k_frac)
    code_names = material_code_names(cfg.n_material_codes)
    schema = default_schema([code_names[i] for i in code_order],
                            [FRACTURE_TYPES[i] for i in frac_order])
    cat = np.column_stack([codes, frac])
    out = {7: EncodedDataset(schema, numeric, cat, s7, 7),
           28: EncodedDataset(schema, numeric, cat, s28, 28)}
    return (out, latent) if return_latent else out
