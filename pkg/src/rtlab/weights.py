"""RTW1 checkpoint format.

Layout (all little-endian)::

    b"RTW1"
    u32 D, u32 H, u32 hidden, u32 L
    then for each tensor in TENSOR_ORDER: u64 count, count x f64 (row-major)

Tensor order: ``embed``, ``unembed``, ``final_gain``, then for each layer
``q_proj, k_proj, v_proj, out_proj, mlp.w_in, mlp.b_in, mlp.w_out, mlp.b_out,
attn_gain, mlp_gain, q_gain, k_gain``. An absent tensor (tied unembedding,
disabled gains) is written with count 0. The model config lives in a JSON
sidecar next to the weights (``<path>.json``).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .harness import ModelCfg, ModelParams, init_model
from .layers import PARAM_NAMES, get_param

MAGIC = b"RTW1"
SCHEMA_VERSION = 1
_HEADER = struct.Struct("<4I")
_COUNT = struct.Struct("<Q")


class WeightFormatError(ValueError):
    pass


def _hidden(cfg: ModelCfg) -> int:
    return cfg.hidden if cfg.hidden is not None else 4 * cfg.dim


def tensor_slots(params: ModelParams):
    """``(name, array or None)`` in file order."""
    yield "embed", params.embed
    yield "unembed", params.unembed
    yield "final_gain", params.final_gain
    for i, lp in enumerate(params.layers):
        for name in PARAM_NAMES:
            yield f"layers.{i}.{name}", get_param(lp, name)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_weights(path, cfg: ModelCfg, params: ModelParams, extra: dict | None = None) -> Path:
    path = Path(path)
    buf = bytearray(MAGIC)
    buf += _HEADER.pack(cfg.dim, cfg.heads, _hidden(cfg), cfg.layers)
    for _, a in tensor_slots(params):
        data = np.zeros(0) if a is None else np.ascontiguousarray(a, dtype="<f8").ravel()
        buf += _COUNT.pack(data.size)
        buf += data.tobytes()
    path.write_bytes(bytes(buf))
    side = {"schema_version": SCHEMA_VERSION, "format": "RTW1", "model": cfg.to_dict(),
            "tensor_order": [name for name, _ in tensor_slots(params)]}
    if extra:
        side.update(extra)
    sidecar_path(path).write_text(json.dumps(side, indent=2))
    return path


def load_weights(path, cfg: ModelCfg | None = None) -> tuple[ModelCfg, ModelParams]:
    """Read an RTW1 file; the config comes from the sidecar unless given."""
    path = Path(path)
    if cfg is None:
        side = json.loads(sidecar_path(path).read_text())
        cfg = ModelCfg(**side["model"])
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise WeightFormatError(f"{path}: bad magic {raw[:4]!r}")
    d, h, hidden, n_layers = _HEADER.unpack_from(raw, 4)
    if (d, h, hidden, n_layers) != (cfg.dim, cfg.heads, _hidden(cfg), cfg.layers):
        raise WeightFormatError(f"{path}: header (D={d}, H={h}, hidden={hidden}, L={n_layers}) "
                                f"does not match the config")
    params = init_model(cfg, np.random.default_rng(0))
    off = 4 + _HEADER.size
    for name, a in tensor_slots(params):
        if off + _COUNT.size > len(raw):
            raise WeightFormatError(f"{path}: truncated before {name}")
        (count,) = _COUNT.unpack_from(raw, off)
        off += _COUNT.size
        expected = 0 if a is None else a.size
        if count != expected:
            raise WeightFormatError(f"{path}: {name} has {count} values, expected {expected}")
        if count:
            end = off + 8 * count
            if end > len(raw):
                raise WeightFormatError(f"{path}: truncated inside {name}")
            a[...] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(a.shape)
            off = end
    if off != len(raw):
        raise WeightFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return cfg, params
