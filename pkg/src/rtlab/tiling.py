"""Exact tiled evaluation of an RT layer.

Queries depend only on the layer input, so they are all known before any
persistent pair is revealed. When position ``t`` finishes, the last ``P``
revealed pairs (``P`` the largest power of two dividing ``t``) are pushed
into the accumulators of the next ``P`` queries at once. Positions in the
schedule are 1-based.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import update_tile
from .layers import (
    KVCache, LayerIO, LayerParams, _batched, _check_input, _unbatch_cache, head_bias, norm_in,
    persistent_kv, project_k, project_q, project_v, residual_out,
)

TEMP_SELF = "temp_self"
PERSISTENT_TILE = "persistent_tile"


@dataclass(frozen=True)
class TileEvent:
    kind: str
    u: int  # first query
    v: int  # last query (inclusive)
    s: int  # first key/value
    e: int  # last key/value (inclusive)

    def __post_init__(self):
        if self.kind not in (TEMP_SELF, PERSISTENT_TILE):
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.u > self.v or self.s > self.e:
            raise ValueError(f"empty range in {self}")


@dataclass
class Schedule:
    n: int
    events: list[TileEvent] = field(default_factory=list)

    def to_csv(self) -> str:
        rows = ["kind,u,v,s,e"]
        rows += [f"{ev.kind},{ev.u},{ev.v},{ev.s},{ev.e}" for ev in self.events]
        return "\n".join(rows) + "\n"


def tile_size(t: int) -> int:
    """Largest power of two dividing ``t``."""
    if t < 1:
        raise ValueError(f"tile_size needs t >= 1, got {t}")
    return t & -t


def build_schedule(n: int, max_query_tile: int | None = None) -> Schedule:
    """Event list for a length-``n`` sequence.

    ``max_query_tile`` (a power of two) caps the number of queries per
    persistent event; a larger tile is split into several events that share
    the same key/value range, so coverage stays exact.
    """
    if n < 1:
        raise ValueError("sequence length must be at least 1")
    if max_query_tile is not None and (max_query_tile < 1 or max_query_tile & (max_query_tile - 1)):
        raise ValueError("max_query_tile must be a power of two")
    events = []
    for t in range(1, n + 1):
        events.append(TileEvent(TEMP_SELF, t, t, t, t))
        if t == n:
            break
        p = tile_size(t)
        u, v = t + 1, min(t + p, n)
        step = p if max_query_tile is None else min(p, max_query_tile)
        for lo in range(u, v + 1, step):
            events.append(TileEvent(PERSISTENT_TILE, lo, min(lo + step - 1, v), t - p + 1, t))
    return Schedule(n, events)


@dataclass
class ScheduleReport:
    ok: bool
    violation: str | None = None
    event_index: int | None = None
    pair: tuple[int, int] | None = None

    def __bool__(self):
        return self.ok


def validate_schedule(s: Schedule) -> ScheduleReport:
    """Check that ``s`` evaluates causal RT attention exactly.

    Every (query i, key j < i) pair must be covered by exactly one persistent
    event, every position by exactly one temporary event, a persistent pair
    may only be read after its position was finalized, and a query may only
    receive contributions before it is finalized.
    """
    n = s.n
    cover = np.zeros((n + 1, n + 1), dtype=np.int64)
    finalized = np.zeros(n + 2, dtype=bool)
    temp_seen = np.zeros(n + 1, dtype=np.int64)
    for idx, ev in enumerate(s.events):
        if ev.v > n or ev.e > n or ev.u < 1 or ev.s < 1:
            return ScheduleReport(False, "range out of bounds", idx, (ev.u, ev.s))
        if ev.kind == TEMP_SELF:
            if not (ev.u == ev.v == ev.s == ev.e):
                return ScheduleReport(False, "temporary event must be a single position", idx, (ev.u, ev.s))
            t = ev.u
            temp_seen[t] += 1
            if temp_seen[t] > 1:
                return ScheduleReport(False, "temporary pair used twice", idx, (t, t))
            finalized[t] = True
            continue
        if ev.e >= ev.u:
            return ScheduleReport(False, "causality: kv range overlaps or follows query range",
                                  idx, (ev.u, ev.e))
        unrevealed = np.flatnonzero(~finalized[ev.s:ev.e + 1])
        if unrevealed.size:
            return ScheduleReport(False, "persistent pair read before it was revealed", idx,
                                  (ev.u, ev.s + int(unrevealed[0])))
        done = np.flatnonzero(finalized[ev.u:ev.v + 1])
        if done.size:
            return ScheduleReport(False, "contribution arrives after the query was finalized", idx,
                                  (ev.u + int(done[0]), ev.s))
        block = cover[ev.u:ev.v + 1, ev.s:ev.e + 1]
        block += 1
        twice = np.argwhere(block > 1)
        if twice.size:
            i, j = twice[0]
            return ScheduleReport(False, "pair covered twice", idx, (ev.u + int(i), ev.s + int(j)))
    missing_temp = np.flatnonzero(temp_seen[1:] == 0)
    if missing_temp.size:
        t = int(missing_temp[0]) + 1
        return ScheduleReport(False, "temporary pair never used", None, (t, t))
    expected = np.tril(np.ones((n, n), dtype=np.int64), -1)
    bad = np.argwhere(cover[1:, 1:] != expected)
    if bad.size:
        i, j = bad[0]
        return ScheduleReport(False, "pair not covered", None, (int(i) + 1, int(j) + 1))
    return ScheduleReport(True)


def rt_forward_tiled(p: LayerParams, x: np.ndarray, max_query_tile: int | None = None) -> LayerIO:
    """Evaluate the RT layer by executing :func:`build_schedule` with one
    online-softmax accumulator per (sequence, head, position)."""
    xb, single = _batched(x)
    _check_input(p, xb)
    b, n, d = xb.shape
    h, hd = p.num_heads, p.head_dim
    xn = norm_in(p, xb)

    def by_head(t):  # (B, N, D) -> contiguous (B, H, N, hd)
        return np.ascontiguousarray(t.reshape(b, n, h, hd).transpose(0, 2, 1, 3))

    q = by_head(project_q(p, xn) * p.logit_scale)
    k_tmp, v_tmp = by_head(project_k(p, xn)), by_head(project_v(p, xn))
    bias = head_bias(p, n)
    m = np.full((b, h, n), -np.inf)
    l = np.zeros((b, h, n))
    o = np.zeros((b, h, n, hd))
    # head-major mirror of the cache so tile slices are contiguous
    k_rev = np.zeros((b, h, n, hd))
    v_rev = np.zeros((b, h, n, hd))
    cache = KVCache(n, d, (b,))
    z = np.empty_like(xb)
    a = np.empty_like(xb)

    def tile_bias(hh, u, v, s, e):
        return None if bias is None else np.ascontiguousarray(bias[hh, u:v, s:e])

    for ev in build_schedule(n, max_query_tile).events:
        if ev.kind == TEMP_SELF:
            t = ev.u - 1
            for bb in range(b):
                for hh in range(h):
                    update_tile(q[bb, hh, t:t + 1], k_tmp[bb, hh, t:t + 1], v_tmp[bb, hh, t:t + 1],
                                tile_bias(hh, t, t + 1, t, t + 1),
                                m[bb, hh, t:t + 1], l[bb, hh, t:t + 1], o[bb, hh, t:t + 1])
            c = (o[:, :, t] / l[:, :, t, None]).reshape(b, d)
            a[:, t] = c @ p.out_proj.T
            z[:, t] = residual_out(p, xb[:, t], a[:, t])
            kz, vz = persistent_kv(p, z[:, t])
            cache.write(t, kz, vz)
            k_rev[:, :, t] = kz.reshape(b, h, hd)
            v_rev[:, :, t] = vz.reshape(b, h, hd)
        else:
            u, v, s, e = ev.u - 1, ev.v, ev.s - 1, ev.e
            for bb in range(b):
                for hh in range(h):
                    update_tile(q[bb, hh, u:v], k_rev[bb, hh, s:e], v_rev[bb, hh, s:e],
                                tile_bias(hh, u, v, s, e), m[bb, hh, u:v], l[bb, hh, u:v], o[bb, hh, u:v])
    if single:
        return LayerIO(xb[0], z[0], a[0], _unbatch_cache(cache))
    return LayerIO(xb, z, a, cache)
