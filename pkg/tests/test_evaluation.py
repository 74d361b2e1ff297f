import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from ccspred.dataset import GeneratorConfig, generate_synthetic
from ccspred.errors import IncompatibleSchemaError, UndefinedMetricError
from ccspred.evaluation import (intrinsic_importance, mae, mape, normalize,
                                permutation_importance, r2, run_comparison)
from ccspred.models import (MODEL_KINDS, ForestConfig, LinearRegressor, ModelConfigs,
                            TreeConfig, make_regressor)
from ccspred.neural import EmbedNetConfig, TabTransformerConfig

positive = arrays(np.float64, st.integers(2, 30), elements=st.floats(1, 1e4))


# -- metrics ------------------------------------------------------------------

def test_r2_examples():
    a = np.array([1.0, 2.0, 3.0])
    assert r2(a, a) == 1.0
    assert r2(a, np.full(3, a.mean())) == 0.0
    assert r2(a, [2.0, 2.0, 2.0]) == 0.0


def test_r2_undefined():
    with pytest.raises(UndefinedMetricError):
        r2([5.0, 5.0], [1.0, 2.0])
    with pytest.raises(UndefinedMetricError):
        r2([5.0], [5.0])


def test_mae_examples():
    assert mae([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert abs(mae([100.0, 200.0], [90.0, 210.0]) - 10.0) <= 1e-12
    assert mae([5.0], [2.0]) == 3.0


def test_mape_examples():
    assert mape([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert abs(mape([100.0, 200.0], [90.0, 210.0]) - 7.5) <= 1e-12
    a = np.array([4000.0, 5000.0, 6000.0])
    assert abs(mape(a, a * 1.025) - 2.5) <= 1e-12
    with pytest.raises(UndefinedMetricError):
        mape([0.0, 1.0], [1.0, 1.0])


@given(positive, st.integers(0, 1000))
def test_metric_properties(a, seed):
    assume(np.ptp(a) > 1e-6 * np.abs(a).max())
    p = a + np.random.default_rng(seed).normal(size=len(a)) * 10
    assert r2(a, p) <= 1.0
    assert mae(a, p) >= 0 and mape(a, p) >= 0
    perm = np.random.default_rng(seed).permutation(len(a))
    assert mae(a[perm], p[perm]) == pytest.approx(mae(a, p), rel=1e-12)
    assert mae(3 * a, 3 * p) == pytest.approx(3 * mae(a, p), rel=1e-12)
    assert mape(3 * a, 3 * p) == pytest.approx(mape(a, p), rel=1e-12)


def test_r2_of_train_mean_is_zero():
    y = np.random.default_rng(0).normal(size=50) + 10
    assert r2(y, np.full(50, y.mean())) == 0.0


# -- importance ---------------------------------------------------------------

@pytest.fixture(scope="module")
def small_data():
    return generate_synthetic(GeneratorConfig(n=600, seed=11, n_material_codes=12))


def test_normalize_degenerate_flag():
    values, degenerate = normalize(np.zeros(9))
    assert degenerate and np.allclose(values, 1 / 9)
    values, degenerate = normalize([2.0, -1.0, 2.0])
    assert not degenerate and list(values) == [0.5, 0.0, 0.5]


def test_permutation_importance_ignored_feature_is_zero(small_data):
    ds = small_data[28]
    m = make_regressor("linear").fit(ds)
    m.model.coef[4] = 0.0           # elapsed time
    imp = permutation_importance(m, ds, repeats=3, seed=1)
    assert imp.raw[4] == 0.0
    assert abs(imp.values.sum() - 1) < 1e-12


def test_permutation_importance_constant_model(small_data):
    ds = small_data[28]
    m = make_regressor("tree", ModelConfigs(tree=TreeConfig(max_depth=0))).fit(ds)
    imp = permutation_importance(m, ds, repeats=2)
    assert imp.degenerate and np.allclose(imp.values, 1 / 9) and not imp.raw.any()


def test_intrinsic_single_split_tree():
    from ccspred.dataset import EncodedDataset, default_schema
    s = default_schema(("a",), ("x",))
    num = np.zeros((4, 7)) + np.arange(7)
    num[:, 1] = [1.0, 2.0, 3.0, 4.0]
    ds = EncodedDataset(s, num, np.zeros((4, 2), dtype=int), np.array([1.0, 1, 11, 11]), 28)
    m = make_regressor("tree", ModelConfigs(tree=TreeConfig(None, 1, 2))).fit(ds)
    imp = intrinsic_importance(m)
    assert imp.values[1] == 1.0 and imp.values.sum() == 1.0


def test_intrinsic_linear_picks_active_feature(small_data):
    ds = small_data[28]
    rng = np.random.default_rng(0)
    num = rng.normal(size=ds.numeric.shape)
    y = 5000 + 2 * num[:, 0] * 100
    from dataclasses import replace
    m = LinearRegressor(ModelConfigs().linear).fit(replace(ds, numeric=num, target=y))
    imp = intrinsic_importance(m)
    assert imp.values[0] == pytest.approx(1.0, abs=1e-4)   # one-hot null space leaves solver noise


def test_forest_importance_sums_to_one(small_data):
    m = make_regressor("forest", ModelConfigs(forest=ForestConfig(n_trees=5))).fit(small_data[28])
    assert abs(intrinsic_importance(m).values.sum() - 1) < 1e-12


def test_neural_models_have_no_intrinsic_importance():
    assert make_regressor("embednet").intrinsic_importance() is None


# -- model contract -----------------------------------------------------------

def _fast_configs():
    return ModelConfigs(forest=ForestConfig(n_trees=5),
                        transformer=TabTransformerConfig(d_model=8, heads=2, layers=1, epochs=2),
                        embednet=EmbedNetConfig(hidden=8, epochs=2))


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_contract_length_purity_and_schema_check(kind, small_data):
    ds = small_data[28]
    m = make_regressor(kind, _fast_configs()).fit(ds.take(np.arange(400)), seed=3)
    test = ds.take(np.arange(400, 600))
    a = m.predict(test)
    b = m.predict(test)
    assert len(a) == test.n and np.array_equal(a, b)
    assert len(m.predict(test.take(np.arange(0)))) == 0
    other = generate_synthetic(GeneratorConfig(n=100, seed=99, n_material_codes=3))[28]
    with pytest.raises(IncompatibleSchemaError):
        m.predict(other)


def test_unknown_kind_lists_valid_kinds():
    with pytest.raises(ValueError, match="linear, tree, forest, transformer, embednet"):
        make_regressor("knn")


# -- comparison ---------------------------------------------------------------

@pytest.fixture(scope="module")
def report(small_data):
    return run_comparison(small_data, _fast_configs(), seed=5, permutation_repeats=2)


def test_report_shape(report):
    assert report.ok
    assert len(report.metric_cells()) == 30
    assert set(report.importance) == set(MODEL_KINDS)
    for imp in report.importance.values():
        assert len(imp.values) == 9 and (imp.values >= 0).all()
        assert abs(imp.values.sum() - 1) < 1e-12
    assert report.importance["embednet"].method == "permutation"
    assert report.importance["forest"].method == "intrinsic"


def test_all_models_share_splits(report):
    for age in (7, 28):
        digests = {(report.results[k, age].train_digest, report.results[k, age].test_digest)
                   for k in MODEL_KINDS}
        assert len(digests) == 1


def test_comparison_is_deterministic(small_data, report):
    again = run_comparison(small_data, _fast_configs(), seed=5, permutation_repeats=2)
    assert again.to_json() == report.to_json()


def test_table_layout(report):
    text = report.to_table()
    header = [l for l in text.splitlines() if l.startswith("Method")][0]
    assert header.split() == ["Method", "R²", "7-Day", "R²", "28-Day", "MAE", "7-Day", "MAE",
                              "28-Day", "MAPE", "7-Day", "MAPE", "28-Day"]
    for name in ("Linear Regression", "Decision Tree", "Random Forest", "Transformer-based NN",
                 "Feature Embedding-based NN"):
        assert name in text


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_failures_become_error_entries(small_data):
    bad = ModelConfigs(embednet=EmbedNetConfig(hidden=8, epochs=2, lr=1e300))
    rep = run_comparison(small_data, bad, seed=1, kinds=("linear", "embednet"),
                         permutation_repeats=1)
    assert not rep.ok
    assert rep.results["linear", 28].error is None
    assert rep.results["embednet", 28].error.startswith("TrainingDivergedError")
    assert "embednet" in rep.to_dict()["errors"]
