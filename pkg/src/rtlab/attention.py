"""Softmax attention, its online (tile-wise) form, and additive position biases."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core_math import ShapeError
from .kernels import update_tile


class EmptyAttentionError(RuntimeError):
    """Finalizing an accumulator that never absorbed a key/value pair."""


@dataclass(frozen=True)
class BiasSpec:
    """Additive logit bias depending on the query and key positions.

    ``alibi``: ``max(-slope * (i - j), -max_bias)``. With ``slope=None`` the
    per-head geometric slopes ``2**(-8(h+1)/H)`` (0-based ``h``) are used (see :meth:`for_head`).
    ``prev_token``: ``+strength`` when ``j == i - 1``, else 0.
    """

    kind: str = "none"
    slope: float | None = None
    strength: float = 0.0
    max_bias: float = 8.0

    def __post_init__(self):
        if self.kind not in ("none", "alibi", "prev_token"):
            raise ValueError(f"unknown bias kind {self.kind!r}")
        if self.slope is not None and self.slope < 0:
            raise ValueError("alibi slope must be non-negative")

    def for_head(self, h: int, num_heads: int) -> "BiasSpec":
        """Concrete spec for head ``h`` (0-based) out of ``num_heads``."""
        if self.kind == "alibi" and self.slope is None:
            return replace(self, slope=alibi_slopes(num_heads)[h])
        return self

    def matrix(self, pos_q, pos_kv) -> np.ndarray | None:
        """Bias for every (query, key) position pair, or None when all zero."""
        if self.kind == "none":
            return None
        pq = np.asarray(pos_q, dtype=np.float64).reshape(-1, 1)
        pk = np.asarray(pos_kv, dtype=np.float64).reshape(1, -1)
        if self.kind == "alibi":
            slope = alibi_slopes(1)[0] if self.slope is None else self.slope
            return np.maximum(-slope * (pq - pk), -self.max_bias)
        return np.where(pk == pq - 1, self.strength, 0.0)


def alibi_slopes(num_heads: int) -> list[float]:
    return [2.0 ** (-8.0 * (h + 1) / num_heads) for h in range(num_heads)]


def _bias_row(bias, pos_q, pos_kv, n):
    if bias is None:
        return None
    if pos_kv is None:
        raise ValueError("a bias needs key positions")
    row = bias.matrix([pos_q], pos_kv)
    if row is not None and row.shape[1] != n:
        raise ShapeError("one position per key/value pair is required")
    return row


def attn_reference(keys, values, q, bias: BiasSpec | None = None, pos_q: int = 0,
                   pos_kv=None, scale: float = 1.0) -> np.ndarray:
    """Single-pass softmax attention of one query over a list of pairs.

    keys: (n, d); values: (n, dv); q: (d,). Logits are ``scale * <k, q>``
    plus the optional position bias; a max-shift keeps ``exp`` in range.
    """
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("attention over an empty key/value list")
    if values.shape[0] != keys.shape[0] or keys.shape[1] != q.shape[-1]:
        raise ShapeError(f"keys {keys.shape}, values {values.shape}, query {q.shape}")
    s = scale * (keys @ q)
    row = _bias_row(bias, pos_q, pos_kv, keys.shape[0])
    if row is not None:
        s = s + row[0]
    w = np.exp(s - s.max())
    return (w @ values) / w.sum()


@dataclass
class SoftmaxAccumulator:
    """Running online-softmax statistics for one query: max logit ``m``,
    normalizer ``l`` and unnormalized output ``o``."""

    m: float
    l: float
    o: np.ndarray = field(repr=False)

    @classmethod
    def fresh(cls, dim: int) -> "SoftmaxAccumulator":
        return cls(-np.inf, 0.0, np.zeros(dim))


def acc_update_tile(acc: SoftmaxAccumulator, q, keys, values, bias: BiasSpec | None = None,
                    pos_q: int = 0, pos_kv=None, scale: float = 1.0) -> SoftmaxAccumulator:
    """Return the accumulator after absorbing the pairs ``(keys, values)``."""
    keys = np.ascontiguousarray(keys, dtype=np.float64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("cannot absorb an empty tile")
    if values.shape[0] != keys.shape[0] or values.shape[1] != acc.o.shape[0]:
        raise ShapeError(f"tile values {values.shape} vs accumulator dim {acc.o.shape[0]}")
    qs = np.ascontiguousarray(np.asarray(q, dtype=np.float64).reshape(1, -1) * scale)
    if qs.shape[1] != keys.shape[1]:
        raise ShapeError(f"query dim {qs.shape[1]} vs key dim {keys.shape[1]}")
    row = _bias_row(bias, pos_q, pos_kv, keys.shape[0])
    m = np.array([acc.m])
    l = np.array([acc.l])
    o = acc.o.reshape(1, -1).copy()
    update_tile(qs, keys, values, None if row is None else np.ascontiguousarray(row), m, l, o)
    return SoftmaxAccumulator(float(m[0]), float(l[0]), o[0])


def acc_finalize(acc: SoftmaxAccumulator) -> np.ndarray:
    if not acc.l > 0:
        raise EmptyAttentionError("accumulator has not absorbed any key/value pair")
    return acc.o / acc.l
