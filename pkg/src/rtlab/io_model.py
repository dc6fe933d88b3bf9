"""Counted memory traffic and FLOPs for naive vs. tiled RT attention.

Traffic is counted in scalar elements moved between slow and fast memory;
multiply by ``bytes_per_element`` for bytes. Per (query, key/value)
interaction the model charges ``2d`` FLOPs for the logit, ``2d`` for the
value accumulate and ``softmax_flops`` for exp/rescale bookkeeping.

Accumulator traffic (``o_elements_moved``): the naive schedule keeps a
query's running state in fast memory for the whole step and only writes
``a_t`` (``d`` elements). The tiled schedule spills the state ``(o, m, l)``
between events: an event reads ``d + 2`` elements per query whose state was
spilled earlier, a persistent event writes ``d + 2`` per query back, and
the finalizing temporary event writes ``d``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .tiling import PERSISTENT_TILE, build_schedule


@dataclass
class TrafficReport:
    schedule_kind: str
    n: int
    d: int
    kv_pairs_loaded: int
    kv_elements_loaded: int
    q_elements_loaded: int
    o_elements_moved: int
    flops: int
    bytes_per_element: int = 1

    @property
    def elements_moved(self) -> int:
        return self.kv_elements_loaded + self.q_elements_loaded + self.o_elements_moved

    @property
    def arithmetic_intensity(self) -> float:
        return self.flops / self.elements_moved

    @property
    def arithmetic_intensity_no_q(self) -> float:
        """Intensity when query re-loads are treated as free."""
        return self.flops / (self.kv_elements_loaded + self.o_elements_moved)

    @property
    def bytes_moved(self) -> int:
        return self.elements_moved * self.bytes_per_element

    def as_row(self) -> dict:
        row = asdict(self)
        row.update(elements_moved=self.elements_moved, bytes_moved=self.bytes_moved,
                   arithmetic_intensity=self.arithmetic_intensity,
                   arithmetic_intensity_no_q=self.arithmetic_intensity_no_q)
        return row


def _flops(interactions: int, d: int, softmax_flops: int) -> int:
    return interactions * (4 * d + softmax_flops)


def count_naive(n: int, d: int, softmax_flops: int = 4, bytes_per_element: int = 1) -> TrafficReport:
    """One query at a time: step ``t`` streams ``t - 1`` persistent pairs and
    its temporary pair."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    pairs = n * (n + 1) // 2
    return TrafficReport("naive", n, d, pairs, 2 * d * pairs, n * d, n * d,
                         _flops(pairs, d, softmax_flops), bytes_per_element)


def count_tiled(n: int, d: int, softmax_flops: int = 4, bytes_per_element: int = 1,
                max_query_tile: int | None = None) -> TrafficReport:
    """Walk the tiled schedule and charge each event for what it streams."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    pairs = q_loads = o_moved = interactions = 0
    spilled = bytearray(n + 1)
    for ev in build_schedule(n, max_query_tile).events:
        nq, nkv = ev.v - ev.u + 1, ev.e - ev.s + 1
        pairs += nkv
        q_loads += nq
        interactions += nq * nkv
        reads = sum(spilled[ev.u:ev.v + 1])
        o_moved += reads * (d + 2)
        if ev.kind == PERSISTENT_TILE:
            o_moved += nq * (d + 2)
            spilled[ev.u:ev.v + 1] = b"\x01" * nq
        else:
            o_moved += d
    return TrafficReport("tiled", n, d, pairs, 2 * d * pairs, d * q_loads, o_moved,
                         _flops(interactions, d, softmax_flops), bytes_per_element)


@dataclass
class AsymptoticsReport:
    rows: list[dict]
    naive_band: tuple[float, float]
    tiled_band: tuple[float, float]
    tiled_ai_increasing: bool
    naive_ai_spread: float
    naive_doubling: list[float]
    tiled_doubling: list[float]

    @property
    def tiled_band_ratio(self) -> float:
        return self.tiled_band[1] / self.tiled_band[0]

    @property
    def passed(self) -> bool:
        return (self.tiled_band_ratio <= 3.0 and self.tiled_ai_increasing
                and self.naive_ai_spread < 0.05)


def asymptotics_check(ns, d: int = 64, **kw) -> AsymptoticsReport:
    """Traffic and intensity of both schedules over ascending lengths ``ns``.

    Bands are the (min, max) of ``naive_kv / n**2`` and
    ``tiled_kv / (n log2 n)`` over ``ns``; ``naive_ai_spread`` is
    ``(max - min) / min`` of the naive intensity.
    """
    ns = list(ns)
    if any(n < 2 for n in ns) or ns != sorted(ns):
        raise ValueError("ns must be ascending and each at least 2")
    rows, naive_r, tiled_r, tiled_ai, naive_ai = [], [], [], [], []
    for n in ns:
        nv, tl = count_naive(n, d, **kw), count_tiled(n, d, **kw)
        naive_r.append(nv.kv_elements_loaded / n ** 2)
        tiled_r.append(tl.kv_elements_loaded / (n * math.log2(n)))
        naive_ai.append(nv.arithmetic_intensity)
        tiled_ai.append(tl.arithmetic_intensity)
        rows += [nv.as_row(), tl.as_row()]
    doubling = [(i, j) for i in range(len(ns)) for j in range(len(ns)) if ns[j] == 2 * ns[i]]
    naive_kv = [r["kv_elements_loaded"] for r in rows[0::2]]
    tiled_kv = [r["kv_elements_loaded"] for r in rows[1::2]]
    return AsymptoticsReport(
        rows=rows,
        naive_band=(min(naive_r), max(naive_r)),
        tiled_band=(min(tiled_r), max(tiled_r)),
        tiled_ai_increasing=all(b > a for a, b in zip(tiled_ai, tiled_ai[1:])),
        naive_ai_spread=(max(naive_ai) - min(naive_ai)) / min(naive_ai),
        naive_doubling=[naive_kv[j] / naive_kv[i] for i, j in doubling],
        tiled_doubling=[tiled_kv[j] / tiled_kv[i] for i, j in doubling],
    )
