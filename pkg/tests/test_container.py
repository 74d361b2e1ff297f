import struct
import zlib

import numpy as np
import pytest

from ccspred import container
from ccspred.dataset import GeneratorConfig, generate_synthetic
from ccspred.errors import FormatError
from ccspred.models import MODEL_KINDS, ForestConfig, ModelConfigs, make_regressor
from ccspred.neural import EmbedNetConfig, TabTransformerConfig

CONFIGS = ModelConfigs(forest=ForestConfig(n_trees=4),
                       transformer=TabTransformerConfig(d_model=8, heads=2, layers=1, epochs=1),
                       embednet=EmbedNetConfig(hidden=8, epochs=1))


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(GeneratorConfig(n=300, seed=21, n_material_codes=10))[28]


@pytest.fixture(scope="module", params=MODEL_KINDS)
def fitted(request, data):
    return make_regressor(request.param, CONFIGS).fit(data, seed=17)


def test_round_trip_bytes_are_stable(fitted):
    blob = container.dumps(fitted)
    assert container.dumps(container.loads(blob)) == blob


def test_round_trip_predictions_bit_identical(fitted, data):
    rows = data.take(np.random.default_rng(0).choice(data.n, 100, replace=False))
    back = container.loads(container.dumps(fitted))
    assert back.kind == fitted.kind and back.seed == 17
    assert back.schema_hash == fitted.schema_hash
    assert np.array_equal(back.predict(rows), fitted.predict(rows))


def test_header_layout(fitted):
    blob = container.dumps(fitted)
    assert blob[:4] == b"CCSM"
    assert struct.unpack("<H", blob[4:6])[0] == container.VERSION
    k = blob[6]
    assert blob[7:7 + k].decode() == fitted.kind
    assert blob[7 + k:23 + k].decode() == fitted.schema_hash
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])


def test_flipped_magic_byte(fitted):
    blob = bytearray(container.dumps(fitted))
    blob[0] ^= 0xFF
    with pytest.raises(FormatError, match="magic"):
        container.loads(bytes(blob))


def test_corrupted_payload_detected(fitted):
    blob = bytearray(container.dumps(fitted))
    blob[len(blob) // 2] ^= 0x01
    with pytest.raises(FormatError):
        container.loads(bytes(blob))


def test_truncated(fitted):
    with pytest.raises(FormatError):
        container.loads(container.dumps(fitted)[:40])


def test_file_round_trip(tmp_path, data):
    m = make_regressor("tree").fit(data, seed=1)
    path = tmp_path / "m.ccsm"
    n = container.save(m, path)
    assert path.stat().st_size == n
    assert np.array_equal(container.load(path).predict(data), m.predict(data))


def test_unfitted_model_rejected():
    with pytest.raises(ValueError):
        container.dumps(make_regressor("linear"))
