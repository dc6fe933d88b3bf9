import json
import struct

import numpy as np
import pytest

from rtlab.harness import ModelCfg, init_model, model_forward
from rtlab.weights import MAGIC, WeightFormatError, load_weights, save_weights, sidecar_path


def _arrays_equal(a, b):
    na, nb = a.named_arrays(), b.named_arrays()
    return na.keys() == nb.keys() and all(np.array_equal(na[k], nb[k]) for k in na)


@pytest.mark.parametrize("cfg", [ModelCfg(layers=2, dim=8, heads=2, vocab=6),
                                 ModelCfg(arch="tf", layers=1, dim=8, heads=1, vocab=6, tied=True),
                                 ModelCfg(layers=1, dim=8, vocab=6, qk_norm=False, kv_norm=False)])
def test_round_trip(tmp_path, rng, cfg):
    p = init_model(cfg, rng)
    path = save_weights(tmp_path / "m.rtw", cfg, p, extra={"note": "x"})
    cfg2, p2 = load_weights(path)
    assert cfg2 == cfg
    assert _arrays_equal(p, p2)
    tokens = rng.integers(0, 6, size=(1, 5))
    assert np.array_equal(model_forward(cfg, p, tokens).logits, model_forward(cfg2, p2, tokens).logits)
    side = json.loads(sidecar_path(path).read_text())
    assert side["schema_version"] == 1 and side["note"] == "x"


def test_header_layout(tmp_path, rng):
    cfg = ModelCfg(layers=3, dim=8, heads=2, vocab=6)
    params = init_model(cfg, rng)
    path = save_weights(tmp_path / "m.rtw", cfg, params)
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    assert struct.unpack_from("<4I", raw, 4) == (8, 2, 32, 3)
    (count,) = struct.unpack_from("<Q", raw, 20)
    assert count == 6 * 8
    embed = np.frombuffer(raw, "<f8", count=48, offset=28).reshape(6, 8)
    assert np.array_equal(embed, params.embed)


def test_bad_magic(tmp_path, rng):
    cfg = ModelCfg(layers=1, dim=8, vocab=6)
    path = save_weights(tmp_path / "m.rtw", cfg, init_model(cfg, rng))
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(WeightFormatError, match="magic"):
        load_weights(path)


def test_truncated_and_trailing(tmp_path, rng):
    cfg = ModelCfg(layers=1, dim=8, vocab=6)
    path = save_weights(tmp_path / "m.rtw", cfg, init_model(cfg, rng))
    raw = path.read_bytes()
    path.write_bytes(raw[:-9])
    with pytest.raises(WeightFormatError, match="truncated"):
        load_weights(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(WeightFormatError, match="trailing"):
        load_weights(path)


def test_config_mismatch(tmp_path, rng):
    cfg = ModelCfg(layers=1, dim=8, vocab=6)
    path = save_weights(tmp_path / "m.rtw", cfg, init_model(cfg, rng))
    with pytest.raises(WeightFormatError, match="header"):
        load_weights(path, ModelCfg(layers=2, dim=8, vocab=6))
    with pytest.raises(WeightFormatError, match="values"):
        load_weights(path, ModelCfg(layers=1, dim=8, vocab=7))
