"""Embedding-based network and tabular transformer encoder built on ndcore."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import ndcore as nd
from .dataset import one_hot_arrays
from .errors import (ConfigError, IncompatibleSchemaError, NonFiniteError,
                     TrainingDivergedError)

# training targets are strength in ksi; predictions are reported in psi
TARGET_SCALE = 1000.0


def embedding_dim(K):
    """2 * ceil(log2 K); a single-category feature still gets width 2."""
    if K < 1:
        raise ConfigError("embedding_dim needs a non-empty vocabulary")
    if K == 1:
        return 2
    return 2 * math.ceil(math.log2(K))


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 300
    seed: int = 0
    validation_fraction: float = 0.1


@dataclass
class EmbedNetConfig(TrainConfig):
    hidden: int = 128
    n_blocks: int = 5
    enforce_five_blocks: bool = True

    def validate(self):
        if self.enforce_five_blocks and self.n_blocks != 5:
            raise ConfigError("n_blocks must be 5 unless enforce_five_blocks is off")
        if self.hidden < 1 or self.n_blocks < 1:
            raise ConfigError("hidden and n_blocks must be positive")


@dataclass
class TabTransformerConfig(TrainConfig):
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    ff_width: int = 0          # 0 means 4 * d_model

    def validate(self):
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.layers < 1:
            raise ConfigError("need at least one encoder layer")

    @property
    def ff(self):
        return self.ff_width or 4 * self.d_model


def config_dict(cfg):
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


class _Module:
    """Named-parameter bookkeeping shared by both architectures."""

    def __init__(self):
        self.params = {}

    def _param(self, name, data):
        p = nd.Parameter(data, name=name)
        self.params[name] = p
        return p

    def parameters(self):
        return list(self.params.values())

    def state(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state):
        for k, p in self.params.items():
            if state[k].shape != p.data.shape:
                raise IncompatibleSchemaError(f"parameter {k}: shape {state[k].shape} != {p.shape}")
            p.data[...] = state[k]


def _linear_params(mod, name, fan_in, fan_out, rng):
    bound = 1.0 / math.sqrt(fan_in)
    w = mod._param(name + ".weight", nd.kaiming_uniform((fan_out, fan_in), rng))
    b = mod._param(name + ".bias", nd.uniform((fan_out,), -bound, bound, rng))
    return w, b


def _norm_params(mod, name, d):
    return (mod._param(name + ".gamma", np.ones(d)), mod._param(name + ".beta", np.zeros(d)))


class EmbedNetModel(_Module):
    """Embeddings ‖ numerics → LayerNorm → n × (Linear, LayerNorm, GELU) → Linear → ReLU."""

    kind = "embednet"

    def __init__(self, cfg, p_num, cardinalities, rng):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.p_num = p_num
        self.cardinalities = list(cardinalities)
        self.emb_dims = [embedding_dim(k) for k in self.cardinalities]
        self.tables = [self._param(f"emb{j}", nd.uniform((k, d), -1.0, 1.0, rng))
                       for j, (k, d) in enumerate(zip(self.cardinalities, self.emb_dims))]
        width = self.input_width
        self.ln_in = _norm_params(self, "ln_in", width)
        self.blocks = []
        for i in range(cfg.n_blocks):
            w, b = _linear_params(self, f"fc{i}", width, cfg.hidden, rng)
            self.blocks.append((w, b) + _norm_params(self, f"ln{i}", cfg.hidden))
            width = cfg.hidden
        self.head = _linear_params(self, "head", width, 1, rng)

    @property
    def input_width(self):
        return self.p_num + sum(self.emb_dims)

    def forward(self, numeric, categorical):
        """Scaled (ksi) predictions [m] as a Tensor."""
        parts = [nd.Tensor(numeric)]
        for j, table in enumerate(self.tables):
            parts.append(nd.embedding_lookup(table, categorical[:, j]))
        h = nd.concat(parts, axis=-1)
        h = nd.layer_norm(h, *self.ln_in)
        for w, b, g, beta in self.blocks:
            h = nd.gelu(nd.layer_norm(nd.linear(h, w, b), g, beta))
        out = nd.relu(nd.linear(h, *self.head))
        return nd.reshape(out, (out.shape[0],))

    def inputs(self, ds):
        return (ds.numeric, ds.categorical)


class TabTransformerModel(_Module):
    """One token per original feature, self-attention encoder, mean pool, linear head."""

    kind = "transformer"

    def __init__(self, cfg, p_num, cardinalities, rng):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.p_num = p_num
        self.cardinalities = list(cardinalities)
        d = cfg.d_model
        self.n_tokens = p_num + len(self.cardinalities)
        self.num_w = self._param("num.weight", nd.uniform((p_num, d), -1.0, 1.0, rng))
        self.num_b = self._param("num.bias", np.zeros((p_num, d)))
        self.cat_proj = []
        for j, k in enumerate(self.cardinalities):
            w = self._param(f"cat{j}.weight", nd.uniform((k, d), -1.0, 1.0, rng))
            b = self._param(f"cat{j}.bias", np.zeros(d))
            self.cat_proj.append((w, b))
        self.feature_id = self._param("feature_id", nd.uniform((self.n_tokens, d), -0.1, 0.1, rng))
        self.layers = []
        for i in range(cfg.layers):
            layer = {}
            for name in ("q", "k", "v", "o"):
                layer[name] = _linear_params(self, f"l{i}.{name}", d, d, rng)
            layer["ln1"] = _norm_params(self, f"l{i}.ln1", d)
            layer["ff1"] = _linear_params(self, f"l{i}.ff1", d, cfg.ff, rng)
            layer["ff2"] = _linear_params(self, f"l{i}.ff2", cfg.ff, d, rng)
            layer["ln2"] = _norm_params(self, f"l{i}.ln2", d)
            self.layers.append(layer)
        self.head = _linear_params(self, "head", d, 1, rng)
        self.capture_attention = False
        self.last_attention = []

    @property
    def one_hot_width(self):
        return self.p_num + sum(self.cardinalities)

    def inputs(self, ds):
        return (one_hot_arrays(ds.numeric, ds.categorical, self.cardinalities),)

    def tokens(self, X):
        m = X.shape[0]
        num = nd.Tensor(X[:, :self.p_num].reshape(m, self.p_num, 1))
        parts = [nd.add(nd.mul(num, self.num_w), self.num_b)]
        start = self.p_num
        for k, (w, b) in zip(self.cardinalities, self.cat_proj):
            tok = nd.add(nd.matmul(nd.Tensor(X[:, start:start + k]), w), b)
            parts.append(nd.reshape(tok, (m, 1, self.cfg.d_model)))
            start += k
        return nd.add(nd.concat(parts, axis=1), self.feature_id)

    def attention(self, h, layer):
        m, t, d = h.shape
        heads = self.cfg.heads
        dk = d // heads

        def split(x):
            return nd.transpose(nd.reshape(x, (m, t, heads, dk)), (0, 2, 1, 3))

        q = split(nd.linear(h, *layer["q"]))
        k = split(nd.linear(h, *layer["k"]))
        v = split(nd.linear(h, *layer["v"]))
        scores = nd.mul(nd.matmul(q, nd.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
        probs = nd.softmax_rows(scores)
        if self.capture_attention:
            self.last_attention.append(probs.data.copy())
        ctx = nd.reshape(nd.transpose(nd.matmul(probs, v), (0, 2, 1, 3)), (m, t, d))
        return nd.linear(ctx, *layer["o"])

    def forward(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.one_hot_width:
            raise IncompatibleSchemaError(
                f"expected one-hot width {self.one_hot_width}, got {X.shape[-1]}")
        self.last_attention = []
        h = self.tokens(X)
        for layer in self.layers:
            h = nd.layer_norm(nd.add(h, self.attention(h, layer)), *layer["ln1"])
            ff = nd.linear(nd.gelu(nd.linear(h, *layer["ff1"])), *layer["ff2"])
            h = nd.layer_norm(nd.add(h, ff), *layer["ln2"])
        out = nd.linear(nd.mean(h, axis=1), *self.head)
        return nd.reshape(out, (X.shape[0],))


def build_model(kind, cfg, p_num, cardinalities, seed=None):
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed if seed is None else seed))
    cls = {"embednet": EmbedNetModel, "transformer": TabTransformerModel}[kind]
    return cls(cfg, p_num, cardinalities, rng)


def predict_scaled(model, inputs, batch_size=4096):
    """Inference in training units (ksi), batched, no tape."""
    n = len(inputs[0])
    out = np.empty(n)
    for s in range(0, n, batch_size):
        out[s:s + batch_size] = model.forward(*(a[s:s + batch_size] for a in inputs)).data
    return out


def predict_psi(model, ds):
    return predict_scaled(model, model.inputs(ds)) * TARGET_SCALE


@dataclass
class History:
    train_loss: list
    val_loss: list
    best_epoch: int = -1


def train(model, train_ds, validation=None):
    """Mini-batch Adam on MSE against ksi targets; keeps the best-validation epoch.

    Shuffling draws from its own stream so that the initial weights and the
    batch order are independent functions of the seed.
    """
    cfg = model.cfg
    x_train = model.inputs(train_ds)
    y_train = train_ds.target / TARGET_SCALE
    if validation is not None and validation.n > 0:
        x_val, y_val = model.inputs(validation), validation.target / TARGET_SCALE
    else:
        x_val, y_val = x_train, y_train
    head_bias = model.head[1]
    head_bias.data[...] = y_train.mean()

    history = History([], [])
    if cfg.epochs <= 0:
        return history
    shuffle = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    params = model.parameters()
    opt = nd.Adam(params, lr=cfg.lr)
    n = len(y_train)
    best_val, best_state = math.inf, model.state()
    for epoch in range(cfg.epochs):
        perm = shuffle.permutation(n)
        total = 0.0
        try:
            for s in range(0, n, cfg.batch_size):
                idx = perm[s:s + cfg.batch_size]
                opt.zero_grad()
                with nd.Tape() as tape:
                    loss = nd.mse_loss(model.forward(*(a[idx] for a in x_train)), y_train[idx])
                tape.backward(loss)
                opt.step()
                total += float(loss.data) * len(idx)
            val = float(np.mean((predict_scaled(model, x_val) - y_val) ** 2))
        except NonFiniteError:
            raise TrainingDivergedError(epoch, math.nan) from None
        if not math.isfinite(total) or not math.isfinite(val):
            raise TrainingDivergedError(epoch, total / n)
        history.train_loss.append(total / n)
        history.val_loss.append(val)
        if val < best_val:
            best_val, best_state = val, model.state()
            history.best_epoch = epoch
    model.load_state(best_state)
    return history


def train_embednet(cfg, train_ds, validation=None):
    model = build_model("embednet", cfg, train_ds.schema.p_num, train_ds.schema.cardinalities)
    return model, train(model, train_ds, validation)


def train_transformer(cfg, train_ds, validation=None):
    model = build_model("transformer", cfg, train_ds.schema.p_num, train_ds.schema.cardinalities)
    return model, train(model, train_ds, validation)
