"""The five regressors behind one fit/predict contract.

Every regressor is fitted on an :class:`EncodedDataset` and predicts strength
in psi for rows encoded under the same schema. Gradient-trained models
standardise numeric inputs with training-split statistics; trees and the
closed-form linear solve consume raw values.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import classical, neural
from .dataset import (StandardizationStats, apply_standardize, fit_standardize,
                      one_hot_arrays, one_hot_groups)
from .errors import IncompatibleSchemaError

MODEL_KINDS = ("linear", "tree", "forest", "transformer", "embednet")
DISPLAY_NAMES = {
    "linear": "Linear Regression",
    "tree": "Decision Tree",
    "forest": "Random Forest",
    "transformer": "Transformer-based NN",
    "embednet": "Feature Embedding-based NN",
}


@dataclass
class LinearConfig:
    ridge: float = 1e-8


@dataclass
class TreeConfig:
    max_depth: int | None = 12
    min_samples_leaf: int = 5
    min_samples_split: int = 10


@dataclass
class ForestConfig:
    n_trees: int = 200
    m_try: int | None = None          # None -> max(1, p // 3)
    max_depth: int | None = None
    min_samples_leaf: int = 1
    min_samples_split: int = 2
    bootstrap: bool = True
    n_jobs: int = 1


@dataclass
class ModelConfigs:
    linear: LinearConfig = field(default_factory=LinearConfig)
    tree: TreeConfig = field(default_factory=TreeConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    transformer: neural.TabTransformerConfig = field(default_factory=neural.TabTransformerConfig)
    embednet: neural.EmbedNetConfig = field(default_factory=neural.EmbedNetConfig)


def derive_seed(*keys):
    """Stable 63-bit seed from integer/str keys (independent of call order)."""
    ints = [k if isinstance(k, int) else int.from_bytes(str(k).encode(), "little") for k in keys]
    return int(np.random.SeedSequence(ints).generate_state(1, np.uint64)[0] >> np.uint64(1))


class Regressor:
    kind = ""

    def __init__(self, config):
        self.config = config
        self.schema = None
        self.seed = None

    @property
    def schema_hash(self):
        return self.schema.hash() if self.schema is not None else None

    def fit(self, train, seed=0):
        train.schema.check_fitted()
        self.schema = train.schema
        self.seed = int(seed)
        self._fit(train)
        return self

    def predict(self, ds):
        return self.predict_rows(ds.numeric, ds.categorical, ds.schema)

    def predict_rows(self, numeric, categorical, schema):
        if self.schema is None:
            raise RuntimeError(f"{self.kind} model is not fitted")
        if schema.hash() != self.schema_hash:
            raise IncompatibleSchemaError(
                f"rows encoded under schema {schema.hash()}, model fitted on {self.schema_hash}")
        numeric = np.asarray(numeric, dtype=np.float64).reshape(-1, schema.p_num)
        categorical = np.asarray(categorical, dtype=np.int64).reshape(-1, schema.p_cat)
        if len(numeric) == 0:
            return np.zeros(0)
        return self._predict(numeric, categorical)

    def intrinsic_importance(self):
        """Unnormalised per-feature importance, or None when the model has none."""
        return None


class LinearRegressor(Regressor):
    kind = "linear"

    def _fit(self, train):
        X = one_hot_arrays(train.numeric, train.categorical, self.schema.cardinalities)
        self.model = classical.fit_linear(X, train.target, ridge=self.config.ridge)
        self.column_std = X.std(axis=0)

    def _predict(self, numeric, categorical):
        return self.model.predict(one_hot_arrays(numeric, categorical, self.schema.cardinalities))

    def intrinsic_importance(self):
        contrib = np.abs(self.model.coef) * self.column_std
        return np.array([contrib[g].sum() for g in one_hot_groups(self.schema)])


def _tree_inputs(schema, numeric, categorical):
    X = np.hstack([numeric, categorical.astype(np.float64)])
    is_cat = np.array([False] * schema.p_num + [True] * schema.p_cat)
    n_cat = np.array([0] * schema.p_num + schema.cardinalities, dtype=np.int64)
    return X, is_cat, n_cat


class TreeRegressor(Regressor):
    kind = "tree"

    def _fit(self, train):
        X, is_cat, n_cat = _tree_inputs(self.schema, train.numeric, train.categorical)
        c = self.config
        self.model = classical.fit_tree(X, train.target, is_cat, max_depth=c.max_depth,
                                        min_samples_leaf=c.min_samples_leaf,
                                        min_samples_split=c.min_samples_split,
                                        n_categories=n_cat)

    def _predict(self, numeric, categorical):
        return self.model.predict(_tree_inputs(self.schema, numeric, categorical)[0])

    def intrinsic_importance(self):
        return self.model.feature_gains(len(self.schema.feature_names))


class ForestRegressor(TreeRegressor):
    kind = "forest"

    def _fit(self, train):
        X, is_cat, n_cat = _tree_inputs(self.schema, train.numeric, train.categorical)
        c = self.config
        self.model = classical.fit_forest(
            X, train.target, is_cat, n_trees=c.n_trees, m_try=c.m_try, max_depth=c.max_depth,
            min_samples_leaf=c.min_samples_leaf, min_samples_split=c.min_samples_split,
            bootstrap=c.bootstrap, seed=self.seed, n_jobs=c.n_jobs, n_categories=n_cat)


class NeuralRegressor(Regressor):
    """Standardises numerics, carves a validation slice, trains with ndcore."""

    def _fit(self, train):
        self.stats = fit_standardize(train)
        std = apply_standardize(train, self.stats)
        cfg = replace(self.config, seed=self.seed)
        rng = np.random.default_rng(derive_seed(self.seed, "validation"))
        perm = rng.permutation(std.n)
        n_val = int(round(cfg.validation_fraction * std.n)) if std.n >= 10 else 0
        fit_part, val_part = std.take(perm[n_val:]), std.take(perm[:n_val])
        self.network = neural.build_model(self.kind, cfg, self.schema.p_num,
                                          self.schema.cardinalities)
        self.history = neural.train(self.network, fit_part, val_part if n_val else None)

    def build_empty(self, stats):
        """Shell with architecture but unset weights (used when loading containers)."""
        self.stats = stats
        self.network = neural.build_model(self.kind, replace(self.config, seed=self.seed or 0),
                                          self.schema.p_num, self.schema.cardinalities)
        self.history = None

    def _predict(self, numeric, categorical):
        z = self.stats.apply(numeric)
        if self.kind == "embednet":
            inputs = (z, categorical)
        else:
            inputs = (one_hot_arrays(z, categorical, self.schema.cardinalities),)
        return neural.predict_scaled(self.network, inputs) * neural.TARGET_SCALE


class TransformerRegressor(NeuralRegressor):
    kind = "transformer"


class EmbedNetRegressor(NeuralRegressor):
    kind = "embednet"


REGRESSORS = {
    "linear": LinearRegressor,
    "tree": TreeRegressor,
    "forest": ForestRegressor,
    "transformer": TransformerRegressor,
    "embednet": EmbedNetRegressor,
}


def make_regressor(kind, configs=None):
    if kind not in REGRESSORS:
        raise ValueError(f"unknown model kind {kind!r}; valid kinds: {', '.join(MODEL_KINDS)}")
    configs = configs or ModelConfigs()
    return REGRESSORS[kind](getattr(configs, kind))
