"""Binary model container.

Layout (all integers little-endian)::

    magic  b"CCSM"  | version u16 | kind (u8 length + ascii)
    schema hash (16 ascii) | creation seed u64
    section schema   u64 length + UTF-8 JSON
    section meta     u64 length + UTF-8 JSON (config, flags)
    section arrays   u32 count, then per array:
                     u16 name length, name, u8 ndim, u32 dims..., f64 data
    section trees    u32 count, then per tree:
                     u32 node count, node records <q d q q d q d>
    crc32 of everything above (u32)
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import fields, is_dataclass

import numpy as np

from . import neural
from .classical import ForestModel, LinearModel, Tree
from .dataset import FeatureSchema, StandardizationStats
from .errors import FormatError
from .models import REGRESSORS, ModelConfigs

MAGIC = b"CCSM"
VERSION = 1
_NODE = struct.Struct("<qdqqdqd")


def _config_to_dict(cfg):
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def _json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _write_arrays(buf, arrays):
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def _write_trees(buf, trees):
    buf.write(struct.pack("<I", len(trees)))
    for t in trees:
        buf.write(struct.pack("<I", t.n_nodes))
        for i in range(t.n_nodes):
            buf.write(_NODE.pack(int(t.feature[i]), float(t.threshold[i]), int(t.left[i]),
                                 int(t.right[i]), float(t.value[i]), int(t.n_samples[i]),
                                 float(t.gain[i])))


def _payload(model):
    """Model-specific (meta, arrays, trees)."""
    kind = model.kind
    meta = {"config": _config_to_dict(model.config)}
    arrays, trees = {}, []
    if kind == "linear":
        arrays = {"coef": model.model.coef, "intercept": np.array([model.model.intercept]),
                  "column_std": model.column_std}
    elif kind == "tree":
        trees = [model.model]
    elif kind == "forest":
        trees = list(model.model.trees)
        meta.update(m_try=model.model.m_try, bootstrap=model.model.bootstrap,
                    tree_seeds=list(model.model.seeds))
    else:
        arrays = {"stats.mean": model.stats.mean, "stats.std": model.stats.std}
        arrays.update({"param." + k: v for k, v in model.network.state().items()})
    return meta, arrays, trees


def dumps(model):
    """Serialise a fitted regressor to bytes."""
    if model.schema is None:
        raise ValueError("cannot serialise an unfitted model")
    buf = io.BytesIO()
    kind = model.kind.encode()
    buf.write(MAGIC + struct.pack("<H", VERSION))
    buf.write(struct.pack("<B", len(kind)) + kind)
    buf.write(model.schema_hash.encode())
    buf.write(struct.pack("<Q", model.seed or 0))
    meta, arrays, trees = _payload(model)
    for section in (_json(model.schema.to_dict()), _json(meta)):
        buf.write(struct.pack("<Q", len(section)) + section)
    _write_arrays(buf, arrays)
    _write_trees(buf, trees)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError("truncated model container")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def _read_arrays(r):
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    return arrays


def _read_trees(r, is_cat):
    (count,) = r.unpack("<I")
    trees = []
    for _ in range(count):
        (n,) = r.unpack("<I")
        recs = np.frombuffer(r.take(_NODE.size * n), dtype=np.dtype(
            [("f", "<i8"), ("t", "<f8"), ("l", "<i8"), ("r", "<i8"), ("v", "<f8"),
             ("n", "<i8"), ("g", "<f8")]))
        trees.append(Tree(recs["f"].astype(np.int64), recs["t"].astype(np.float64),
                          recs["l"].astype(np.int64), recs["r"].astype(np.int64),
                          recs["v"].astype(np.float64), recs["n"].astype(np.int64),
                          recs["g"].astype(np.float64), is_cat))
    return trees


def _config_from_dict(kind, d):
    cfg_cls = type(getattr(ModelConfigs(), kind))
    return cfg_cls(**d)


def loads(data):
    """Rebuild a regressor from container bytes; raises FormatError on corruption."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad magic bytes: not a model container")
    if len(data) < 8 or struct.unpack("<I", data[-4:])[0] != zlib.crc32(data[:-4]):
        raise FormatError("checksum mismatch: container is corrupted")
    r = _Reader(data[:-4])
    r.take(4)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    (klen,) = r.unpack("<B")
    kind = r.take(klen).decode()
    if kind not in REGRESSORS:
        raise FormatError(f"unknown model kind {kind!r}")
    schema_hash = r.take(16).decode()
    (seed,) = r.unpack("<Q")
    try:
        (slen,) = r.unpack("<Q")
        schema = FeatureSchema.from_dict(json.loads(r.take(slen)))
        (mlen,) = r.unpack("<Q")
        meta = json.loads(r.take(mlen))
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed container section: {exc}") from None
    if schema.hash() != schema_hash:
        raise FormatError("schema hash in header does not match embedded schema")
    arrays = _read_arrays(r)
    is_cat = np.array([False] * schema.p_num + [True] * schema.p_cat)
    trees = _read_trees(r, is_cat)
    if r.pos != len(r.data):
        raise FormatError("trailing bytes in model container")

    model = REGRESSORS[kind](_config_from_dict(kind, meta["config"]))
    model.schema, model.seed = schema, seed
    if kind == "linear":
        model.model = LinearModel(arrays["coef"], float(arrays["intercept"][0]))
        model.column_std = arrays["column_std"]
    elif kind == "tree":
        model.model = trees[0]
    elif kind == "forest":
        model.model = ForestModel(tuple(trees), tuple(meta["tree_seeds"]), meta["m_try"],
                                  meta["bootstrap"])
    else:
        model.build_empty(StandardizationStats(arrays["stats.mean"], arrays["stats.std"]))
        model.network.load_state({k[len("param."):]: v for k, v in arrays.items()
                                  if k.startswith("param.")})
    return model


def save(model, path):
    data = dumps(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
