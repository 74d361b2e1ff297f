import numpy as np
import pytest
from hypothesis import given, strategies as st

from ccspred import ndcore as nd
from ccspred.dataset import EncodedDataset, default_schema, one_hot_arrays
from ccspred.errors import (ConfigError, IncompatibleSchemaError, OutOfVocabularyError,
                            TrainingDivergedError)
from ccspred.evaluation import r2
from ccspred.neural import (EmbedNetConfig, TabTransformerConfig, build_model, embedding_dim,
                            predict_psi, train)
from conftest import model_grad_check


def linear_task(n, seed):
    """Noiseless target, linear in the numerics plus a per-code offset (psi)."""
    rng = np.random.default_rng(seed)
    schema = default_schema(("a", "b", "c"), ("x", "y"))
    num = rng.normal(size=(n, 7))
    cat = np.column_stack([rng.integers(0, 3, n), rng.integers(0, 2, n)])
    y = 5000 + num @ np.array([600, -400, 200, 100, 0, -150, 50.0]) + np.array([0, 300, -300])[cat[:, 0]]
    return EncodedDataset(schema, num, cat, y, 28)


def _batch(rng, m, cards=(142, 6)):
    num = rng.normal(size=(m, 7))
    cat = np.column_stack([rng.integers(0, k, m) for k in cards])
    return num, cat


# -- embedding_dim ------------------------------------------------------------

@pytest.mark.parametrize("K,d", [(142, 16), (6, 6), (2, 2), (1, 2), (3, 4), (256, 16), (257, 18)])
def test_embedding_dim(K, d):
    assert embedding_dim(K) == d


def test_embedding_dim_empty_vocab():
    with pytest.raises(ConfigError):
        embedding_dim(0)


@given(st.integers(1, 10_000))
def test_embedding_dim_monotone(K):
    assert embedding_dim(K + 1) >= embedding_dim(K)


# -- embednet -----------------------------------------------------------------

def test_embednet_unified_width():
    m = build_model("embednet", EmbedNetConfig(), 7, [142, 6])
    assert m.emb_dims == [16, 6] and m.input_width == 29
    assert m.tables[0].shape == (142, 16) and np.abs(m.tables[0].data).max() <= 1.0
    assert len(m.blocks) == 5


def test_embednet_block_count_fidelity_flag():
    with pytest.raises(ConfigError):
        build_model("embednet", EmbedNetConfig(n_blocks=3), 7, [3, 2])
    m = build_model("embednet", EmbedNetConfig(n_blocks=3, enforce_five_blocks=False), 7, [3, 2])
    assert len(m.blocks) == 3


def test_embednet_zero_head_predicts_exact_zero(rng):
    m = build_model("embednet", EmbedNetConfig(hidden=16), 7, [142, 6])
    for p in m.head:
        p.data[...] = 0.0
    assert np.array_equal(m.forward(*_batch(rng, 50)).data, np.zeros(50))


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 1e3))
def test_embednet_predictions_non_negative(seed, scale):
    r = np.random.default_rng(seed)
    m = build_model("embednet", EmbedNetConfig(hidden=8, seed=seed % 1000), 7, [142, 6])
    m.head[1].data[...] = r.normal() * 5     # push the head into the ReLU's flat region too
    num, cat = _batch(r, 64)
    assert (m.forward(num * scale, cat).data >= 0).all()


def test_embednet_oov_index_propagates(rng):
    m = build_model("embednet", EmbedNetConfig(hidden=8), 7, [3, 2])
    num, _ = _batch(rng, 2, (3, 2))
    with pytest.raises(OutOfVocabularyError):
        m.forward(num, np.array([[0, 0], [3, 0]]))


def test_embednet_gradient_check(rng):
    m = build_model("embednet", EmbedNetConfig(hidden=8, seed=3), 7, [142, 6])
    m.head[1].data[...] = 3.0                # keep the ReLU head away from its kink
    num, cat = _batch(rng, 16)
    y = rng.uniform(3, 7, 16)
    worst, count = model_grad_check(m, lambda: nd.mse_loss(m.forward(num, cat), y), 120)
    assert count >= 100 and worst < 1e-4


def test_embedding_rows_absent_from_batch_get_zero_grad(rng):
    m = build_model("embednet", EmbedNetConfig(hidden=8), 7, [5, 3])
    num = rng.normal(size=(6, 7))
    cat = np.array([[0, 0], [1, 1], [0, 2], [1, 0], [0, 1], [1, 2]])
    m.head[1].data[...] = 3.0
    with nd.Tape() as tape:
        loss = nd.mse_loss(m.forward(num, cat), np.ones(6))
    tape.backward(loss)
    g = m.tables[0].grad
    assert np.array_equal(g[2:], np.zeros_like(g[2:]))
    assert np.abs(g[:2]).max() > 0


def test_embednet_batch_equivariance(rng):
    m = build_model("embednet", EmbedNetConfig(hidden=16), 7, [142, 6])
    num, cat = _batch(rng, 10)
    a = m.forward(num, cat).data
    order = np.array([3, 1, 2, 0, 4, 5, 6, 7, 8, 9])
    b = m.forward(num[order], cat[order]).data
    assert np.array_equal(a[order], b)


# -- transformer --------------------------------------------------------------

def _tx(d=8, heads=2, layers=2, cards=(5, 3), p_num=7, seed=1):
    return build_model("transformer", TabTransformerConfig(d_model=d, heads=heads, layers=layers,
                                                           seed=seed), p_num, list(cards))


def test_transformer_heads_must_divide_width():
    with pytest.raises(ConfigError):
        _tx(d=10, heads=4)


def test_transformer_attention_rows_stochastic(rng):
    m = _tx()
    num, cat = _batch(rng, 12, (5, 3))
    m.capture_attention = True
    m.forward(one_hot_arrays(num, cat, [5, 3]))
    assert len(m.last_attention) == 2
    for probs in m.last_attention:
        assert probs.shape == (12, 2, 9, 9)
        assert np.abs(probs.sum(axis=-1) - 1).max() < 1e-6


def test_transformer_single_token_attention_is_identity(rng):
    m = _tx(cards=(), p_num=1)
    m.capture_attention = True
    m.forward(rng.normal(size=(5, 1)))
    for probs in m.last_attention:
        assert np.array_equal(probs, np.ones((5, 2, 1, 1)))


def test_transformer_width_mismatch(rng):
    with pytest.raises(IncompatibleSchemaError):
        _tx().forward(rng.normal(size=(3, 14)))


def test_transformer_gradient_check(rng):
    m = _tx()
    num, cat = _batch(rng, 16, (5, 3))
    X = one_hot_arrays(num, cat, [5, 3])
    y = rng.uniform(3, 7, 16)
    m.head[1].data[...] = y.mean()          # small loss keeps difference roundoff small
    worst, count = model_grad_check(m, lambda: nd.mse_loss(m.forward(X), y), 120)
    assert count >= 100 and worst < 1e-4


def test_transformer_batch_equivariance(rng):
    m = _tx()
    num, cat = _batch(rng, 6, (5, 3))
    X = one_hot_arrays(num, cat, [5, 3])
    order = np.array([5, 1, 2, 3, 4, 0])
    assert np.allclose(m.forward(X).data[order], m.forward(X[order]).data, rtol=0, atol=1e-14)


# -- training -----------------------------------------------------------------

def test_embednet_learns_noiseless_linear_task():
    # default batch 256 on 200 rows is one Adam step per epoch; smaller batches
    # give the 200-epoch budget enough updates to converge
    tr, va = linear_task(200, 0), linear_task(100, 1)
    m = build_model("embednet", EmbedNetConfig(epochs=200, lr=3e-3, batch_size=8, seed=0), 7, [3, 2])
    hist = train(m, tr, va)
    assert len(hist.val_loss) == 200
    assert r2(va.target, predict_psi(m, va)) > 0.99


def test_transformer_learns_noiseless_linear_task():
    tr, va = linear_task(200, 0), linear_task(100, 1)
    cfg = TabTransformerConfig(d_model=16, heads=2, epochs=400, lr=3e-3, batch_size=32, seed=0)
    m = build_model("transformer", cfg, 7, [3, 2])
    train(m, tr, va)
    assert r2(va.target, predict_psi(m, va)) > 0.95


@pytest.mark.parametrize("kind,cfg", [("embednet", EmbedNetConfig(hidden=8, epochs=0)),
                                      ("transformer", TabTransformerConfig(d_model=8, epochs=0))])
def test_zero_epochs_returns_initialised_model(kind, cfg):
    m = build_model(kind, cfg, 7, [3, 2])
    before = m.state()
    hist = train(m, linear_task(30, 0))
    assert hist.train_loss == [] and hist.val_loss == []
    after = m.state()
    assert all(np.array_equal(before[k], after[k]) for k in before if not k.startswith("head"))


@pytest.mark.parametrize("kind,cfg", [
    ("embednet", EmbedNetConfig(hidden=8, epochs=3, batch_size=16, seed=5)),
    ("transformer", TabTransformerConfig(d_model=8, heads=2, epochs=2, batch_size=16, seed=5)),
])
def test_training_is_deterministic(kind, cfg):
    data = linear_task(60, 2)
    states = []
    for _ in range(2):
        m = build_model(kind, cfg, 7, [3, 2])
        train(m, data, linear_task(20, 3))
        states.append(m.state())
    assert states[0].keys() == states[1].keys()
    assert all(np.array_equal(states[0][k], states[1][k]) for k in states[0])


def test_best_validation_snapshot_is_restored():
    tr, va = linear_task(80, 0), linear_task(40, 1)
    m = build_model("embednet", EmbedNetConfig(hidden=8, epochs=15, batch_size=16, seed=1), 7, [3, 2])
    hist = train(m, tr, va)
    final = np.mean((predict_psi(m, va) / 1000 - va.target / 1000) ** 2)
    assert final == pytest.approx(min(hist.val_loss), rel=1e-12)
    assert hist.best_epoch == int(np.argmin(hist.val_loss))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch():
    m = build_model("embednet", EmbedNetConfig(hidden=8, epochs=5, lr=1e300, seed=0), 7, [3, 2])
    with pytest.raises(TrainingDivergedError) as exc:
        train(m, linear_task(40, 0))
    assert exc.value.epoch == 0
