"""Executable versions of the representational and stability results.

* :func:`build_simulator` embeds a norm-free width-``d'`` Transformer stack in
  a width-``3d'`` RT stack (carry / live / scratch blocks).
* :func:`theorem1_jacobian` is the closed form of ``dz_k/dx_1`` for the
  uniform-attention linear RT layer, in terms of unsigned Stirling numbers
  of the first kind; :func:`simplified_forward_jacobian` is its oracle.
* :func:`rnn_emulation_check` drives attention onto the previous position
  with a large bias and compares the layer with the explicit recurrence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .attention import BiasSpec
from .core_math import MlpParams, mlp_apply, rms_norm
from .layers import LayerParams, apply_mlp, rt_forward_naive, transformer_forward


# -- Transformer simulation ---------------------------------------------------

@dataclass(frozen=True)
class SimBlocks:
    """Block layout of the simulating width ``3 * d_prime`` embedding.

    Slots 0 and 1 alternate between the carry and live roles from layer to
    layer (the carry/live swap is folded into the next layer's parameters);
    slot 2 is always scratch.
    """

    d_prime: int

    @property
    def width(self) -> int:
        return 3 * self.d_prime

    def slot(self, i: int) -> slice:
        return slice(i * self.d_prime, (i + 1) * self.d_prime)

    def carry_slot(self, layer: int) -> int:
        return layer % 2

    def live_slot(self, layer: int) -> int:
        return 1 - layer % 2

    @property
    def scratch(self) -> slice:
        return self.slot(2)

    def embed(self, x_small: np.ndarray, junk: np.ndarray | None = None) -> np.ndarray:
        """Place inputs in the carry slot of layer 0; the live slot may hold
        arbitrary junk, scratch is zero."""
        out = np.zeros(x_small.shape[:-1] + (self.width,))
        out[..., self.slot(0)] = x_small
        if junk is not None:
            out[..., self.slot(1)] = junk
        return out


@dataclass
class SmallLayer:
    """One norm-free Transformer layer of width ``d'``."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    mlp: MlpParams | Callable

    def as_layer_params(self) -> LayerParams:
        d = self.q.shape[0]
        return LayerParams(self.q, self.k, self.v, np.eye(d), self.mlp, num_heads=1,
                           alpha_res=1.0, norm_free=True, fixed_order=True)


def _oracle_mlp(blocks: SimBlocks, layer: int, mlp_small):
    c_sl = blocks.slot(blocks.carry_slot(layer))
    l_sl = blocks.slot(blocks.live_slot(layer))
    s_sl = blocks.scratch

    def mlp(w: np.ndarray) -> np.ndarray:
        carry, live, scratch = w[..., c_sl], w[..., l_sl], w[..., s_sl]
        h = carry + scratch
        out = np.zeros_like(w)
        out[..., l_sl] = h + apply_mlp(mlp_small, h) - live
        out[..., s_sl] = -scratch
        return out

    return mlp


def build_simulator(small_layers: Sequence[SmallLayer]) -> tuple[list[LayerParams], SimBlocks]:
    """RT layers of width ``3d'`` that reproduce the given Transformer stack.

    Q and K read the carry slot and write slot 0, V reads the carry slot and
    writes scratch, and the MLP is a functional oracle that moves
    ``x + a + MLP'(x + a)`` into the live slot and cancels scratch.
    """
    if not small_layers:
        raise ValueError("need at least one layer")
    dp = small_layers[0].q.shape[0]
    blocks = SimBlocks(dp)
    out = []
    for idx, sl in enumerate(small_layers):
        for m in (sl.q, sl.k, sl.v):
            if m.shape != (dp, dp):
                raise ValueError(f"layer {idx}: expected ({dp}, {dp}) projections, got {m.shape}")
        c = blocks.slot(blocks.carry_slot(idx))
        q, k, v = (np.zeros((blocks.width, blocks.width)) for _ in range(3))
        q[blocks.slot(0), c] = sl.q
        k[blocks.slot(0), c] = sl.k
        v[blocks.scratch, c] = sl.v
        out.append(LayerParams(q, k, v, np.eye(blocks.width), _oracle_mlp(blocks, idx, sl.mlp),
                               num_heads=1, alpha_res=1.0, norm_free=True, fixed_order=True))
    return out, blocks


def random_small_stack(rng: np.random.Generator, d_prime: int, num_layers: int,
                       scale: float = 1.0) -> list[SmallLayer]:
    std = scale * d_prime ** -0.5
    return [SmallLayer(rng.normal(0, std, (d_prime, d_prime)), rng.normal(0, std, (d_prime, d_prime)),
                       rng.normal(0, std, (d_prime, d_prime)), MlpParams.init(rng, d_prime))
            for _ in range(num_layers)]


@dataclass
class SimulationResult:
    live_error: float
    scratch_error: float
    carry_error: float
    logit_error: float
    logits_identical: bool
    stacked_logit_error: float = 0.0


def run_simulation(small_layers: Sequence[SmallLayer], x_small: np.ndarray,
                   junk: np.ndarray | None = None) -> SimulationResult:
    """Run both stacks on ``x_small`` (N, d') and measure every invariant.

    ``logit_error`` / ``logits_identical`` compare each RT layer's logits with
    the small layer applied to the carry block that RT layer actually
    received. ``stacked_logit_error`` compares against the independently
    stacked Transformer, whose inputs drift from the carry block by rounding
    in the live-slot hand-off.
    """
    rt_layers, blocks = build_simulator(small_layers)
    x = blocks.embed(x_small, junk)
    y = x_small
    live_err = scratch_err = carry_err = logit_err = stacked_err = 0.0
    identical = True
    for idx, (sl, lp) in enumerate(zip(small_layers, rt_layers)):
        small = sl.as_layer_params()
        carry = blocks.slot(blocks.carry_slot(idx))
        y, stacked_logits = transformer_forward(small, y, return_logits=True)
        _, local_logits = transformer_forward(small, x[:, carry], return_logits=True)
        io = rt_forward_naive(lp, x, record_logits=True)
        z = io.z
        live_err = max(live_err, float(np.abs(z[:, blocks.slot(blocks.live_slot(idx))] - y).max()))
        scratch_err = max(scratch_err, float(np.abs(z[:, blocks.scratch]).max()))
        carry_err = max(carry_err, float(np.abs(z[:, carry] - x[:, carry]).max()))
        for t, rt_row in enumerate(io.logits):
            local = local_logits[:, t, :t + 1]
            logit_err = max(logit_err, float(np.abs(rt_row - local).max()))
            identical = identical and bool(np.array_equal(rt_row, local))
            stacked_err = max(stacked_err, float(np.abs(rt_row - stacked_logits[:, t, :t + 1]).max()))
        x = z
    return SimulationResult(live_err, scratch_err, carry_err, logit_err, identical, stacked_err)


# -- gradient structure of the simplified layer -------------------------------

@lru_cache(maxsize=None)
def _stirling(k: int, r: int) -> int:
    if k == 0 and r == 0:
        return 1
    if k == 0 or r == 0:
        return 0
    return _stirling(k - 1, r - 1) + (k - 1) * _stirling(k - 1, r)


def stirling_first_kind(k: int, r: int) -> int:
    """Unsigned Stirling number of the first kind: permutations of ``k``
    elements with exactly ``r`` cycles."""
    if not (0 <= r <= k <= 20):
        raise ValueError(f"need 0 <= r <= k <= 20, got k={k}, r={r}")
    return _stirling(k, r)


@dataclass
class SimplifiedLayerCfg:
    """Uniform-attention linear layer
    ``z_k = x_k + (alpha/k) (V x_k + V sum_{j<k} z_j)``."""

    alpha: float
    V: np.ndarray
    n: int

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


def simplified_forward(cfg: SimplifiedLayerCfg, xs: np.ndarray) -> np.ndarray:
    """Outputs for inputs ``xs`` of shape (n, D) or (n, D, m) (columns batch)."""
    zs = np.empty_like(xs)
    acc = np.zeros_like(xs[0])
    for k in range(1, xs.shape[0] + 1):
        zs[k - 1] = xs[k - 1] + (cfg.alpha / k) * (cfg.V @ xs[k - 1] + cfg.V @ acc)
        acc = acc + zs[k - 1]
    return zs


def simplified_forward_jacobian(cfg: SimplifiedLayerCfg, k: int) -> np.ndarray:
    """Exact ``dz_k/dx_1``: the recurrence is linear, so pushing the identity
    through it as a block of tangent columns (all other inputs zero) gives
    the Jacobian without truncation error."""
    if not 1 <= k <= cfg.n:
        raise ValueError(f"k must lie in [1, {cfg.n}]")
    d = cfg.V.shape[0]
    tangents = np.zeros((k, d, d))
    tangents[0] = np.eye(d)
    return simplified_forward(cfg, tangents)[k - 1]


def theorem1_terms(cfg: SimplifiedLayerCfg, k: int) -> list[np.ndarray]:
    """The summands ``[k r] alpha^r V^r / k!`` for ``r = 1..k``."""
    terms, power = [], np.eye(cfg.V.shape[0])
    for r in range(1, k + 1):
        power = power @ (cfg.alpha * cfg.V)
        terms.append(stirling_first_kind(k, r) * power / math.factorial(k))
    return terms


def theorem1_jacobian(cfg: SimplifiedLayerCfg, k: int) -> np.ndarray:
    """Closed form ``(1/k!) sum_r [k r] alpha^r V^r``, valid for ``k >= 2``."""
    if not 2 <= k <= cfg.n:
        raise ValueError(f"k must lie in [2, {cfg.n}]")
    return sum(theorem1_terms(cfg, k))


def theorem1_norm_bound(alpha: float, k: int) -> float:
    """``sum_r [k r] alpha^r / k!``, the spectral-norm bound for orthonormal V."""
    return sum(stirling_first_kind(k, r) * alpha ** r for r in range(1, k + 1)) / math.factorial(k)


# -- token-to-token recurrence limit ------------------------------------------

def rnn_emulation_params(rng: np.random.Generator, dim: int, strength: float,
                         mlp: MlpParams | None = None, qk: tuple | None = None) -> LayerParams:
    """Single-head RT layer with V = identity, identity output projection,
    unit residual scale, QK-norm on, and a previous-position bias."""
    std = dim ** -0.5
    q, k = qk if qk is not None else (rng.normal(0, std, (dim, dim)), rng.normal(0, std, (dim, dim)))
    return LayerParams(q, k, np.eye(dim), np.eye(dim), mlp if mlp is not None else MlpParams.init(rng, dim),
                       num_heads=1, alpha_res=1.0, bias=BiasSpec("prev_token", strength=strength),
                       qk_norm=True)


def rnn_recurrence(mlp, x: np.ndarray, z1: np.ndarray) -> np.ndarray:
    """``z_i = RMS(z_{i-1}) + x_i + MLP[RMS(x_i + RMS(z_{i-1}))]`` from ``z_1``."""
    z = np.empty_like(x)
    z[0] = z1
    for i in range(1, x.shape[0]):
        h = rms_norm(z[i - 1])
        z[i] = h + x[i] + apply_mlp(mlp, rms_norm(x[i] + h))
    return z


@dataclass
class RnnEmulationResult:
    strengths: list[float]
    errors: list[float]

    @property
    def monotone(self) -> bool:
        return all(b < a for a, b in zip(self.errors, self.errors[1:]))


def rnn_emulation_check(rng: np.random.Generator, x: np.ndarray,
                        strengths: Sequence[float] = (10.0, 25.0, 50.0)) -> RnnEmulationResult:
    """Max relative deviation (over positions ``i >= 2``) between the RT layer
    and the explicit recurrence, for each bias strength. Weights are drawn
    once and shared across strengths."""
    d = x.shape[-1]
    std = d ** -0.5
    qk = (rng.normal(0, std, (d, d)), rng.normal(0, std, (d, d)))
    mlp = MlpParams.init(rng, d)
    errors = []
    for b in strengths:
        p = rnn_emulation_params(rng, d, b, mlp=mlp, qk=qk)
        z = rt_forward_naive(p, x).z
        ref = rnn_recurrence(mlp, x, z[0])
        rel = np.linalg.norm(z[1:] - ref[1:], axis=-1) / np.linalg.norm(ref[1:], axis=-1)
        errors.append(float(rel.max()))
    return RnnEmulationResult(list(strengths), errors)


# -- bundled checks -------------------------------------------------------------

def check_simulation(seed: int = 0, n_models: int = 10, d_prime: int = 4, num_layers: int = 3,
                     n: int = 8, tol: float = 1e-12) -> dict:
    rng = np.random.default_rng(seed)
    worst = SimulationResult(0.0, 0.0, 0.0, 0.0, True, 0.0)
    for _ in range(n_models):
        stack = random_small_stack(rng, d_prime, num_layers)
        x = rng.normal(size=(n, d_prime))
        r = run_simulation(stack, x, junk=rng.normal(size=(n, d_prime)))
        worst = SimulationResult(max(worst.live_error, r.live_error), max(worst.scratch_error, r.scratch_error),
                                 max(worst.carry_error, r.carry_error), max(worst.logit_error, r.logit_error),
                                 worst.logits_identical and r.logits_identical,
                                 max(worst.stacked_logit_error, r.stacked_logit_error))
    passed = (worst.live_error <= tol and worst.scratch_error <= tol and worst.carry_error == 0.0
              and worst.logits_identical)
    return {"check": "simulate", "pass": passed, "live_error": worst.live_error,
            "scratch_error": worst.scratch_error, "carry_error": worst.carry_error,
            "logit_error": worst.logit_error, "logits_identical": worst.logits_identical,
            "stacked_logit_error": worst.stacked_logit_error,
            "models": n_models, "d_prime": d_prime, "layers": num_layers, "n": n}


def check_theorem1(seed: int = 0, draws: int = 20, max_k: int = 8, max_d: int = 4,
                   tol: float = 1e-10) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        d = int(rng.integers(1, max_d + 1))
        cfg = SimplifiedLayerCfg(float(rng.uniform(0.0, 1.0)) or 0.5, rng.normal(size=(d, d)), max_k)
        for k in range(2, max_k + 1):
            worst = max(worst, float(np.abs(theorem1_jacobian(cfg, k) - simplified_forward_jacobian(cfg, k)).max()))
    sums_ok = all(sum(stirling_first_kind(k, r) for r in range(k + 1)) == math.factorial(k) for k in range(11))
    first_ok = all(stirling_first_kind(k, 1) == math.factorial(k - 1) for k in range(1, 21))
    return {"check": "theorem1", "pass": worst <= tol and sums_ok and first_ok, "max_abs_error": worst,
            "stirling_row_sums": sums_ok, "stirling_first_column": first_ok, "draws": draws}


def check_rnn(seed: int = 0, n: int = 16, d: int = 8, strengths=(10.0, 25.0, 50.0),
              tol: float = 1e-3) -> dict:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    r = rnn_emulation_check(rng, x, strengths)
    return {"check": "rnn", "pass": r.monotone and r.errors[-1] < tol, "strengths": r.strengths,
            "errors": r.errors, "monotone": r.monotone}
