"""Transformer and Recurrent Transformer (RT) layers, naive sequential form.

Arrays are either ``(N, D)`` for one sequence or ``(B, N, D)`` for a batch;
outputs follow the input layout. The KV cache is stored position-major.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .attention import BiasSpec
from .core_math import MlpParams, ShapeError, dot_last, mlp_apply, rms_norm

MlpLike = MlpParams | Callable[[np.ndarray], np.ndarray]


@dataclass
class LayerParams:
    q_proj: np.ndarray
    k_proj: np.ndarray
    v_proj: np.ndarray
    out_proj: np.ndarray
    mlp: MlpLike
    num_heads: int = 1
    alpha_res: float = 1.0
    bias: BiasSpec = field(default_factory=BiasSpec)
    qk_norm: bool = True
    # disables every RMS normalization, QK-norm included
    norm_free: bool = False
    # RMS before the persistent K/V projections; False is the no-norm ablation
    kv_norm: bool = True
    scale_logits: bool = False
    # projections as fixed-order sums, so zero-padded weights give
    # bit-identical results (used by the width-embedding simulator)
    fixed_order: bool = False
    attn_gain: np.ndarray | None = None
    mlp_gain: np.ndarray | None = None
    q_gain: np.ndarray | None = None
    k_gain: np.ndarray | None = None

    def __post_init__(self):
        d = self.dim
        for name in ("q_proj", "k_proj", "v_proj", "out_proj"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be ({d}, {d}), got {getattr(self, name).shape}")
        if self.num_heads < 1 or d % self.num_heads:
            raise ShapeError(f"num_heads={self.num_heads} does not divide D={d}")
        if not 0.0 < self.alpha_res <= 1.0:
            raise ValueError("alpha_res must lie in (0, 1]")
        if isinstance(self.mlp, MlpParams) and self.mlp.dim != d:
            raise ShapeError(f"MLP dim {self.mlp.dim} != D={d}")
        for name, size in (("attn_gain", d), ("mlp_gain", d), ("q_gain", self.head_dim),
                           ("k_gain", self.head_dim)):
            g = getattr(self, name)
            if g is not None and g.shape != (size,):
                raise ShapeError(f"{name} must have shape ({size},)")

    @property
    def dim(self) -> int:
        return self.q_proj.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @property
    def logit_scale(self) -> float:
        return self.head_dim ** -0.5 if self.scale_logits else 1.0

    def copy(self) -> "LayerParams":
        def c(a):
            return None if a is None else a.copy()
        mlp = self.mlp.copy() if isinstance(self.mlp, MlpParams) else self.mlp
        return replace(self, q_proj=c(self.q_proj), k_proj=c(self.k_proj), v_proj=c(self.v_proj),
                       out_proj=c(self.out_proj), mlp=mlp, attn_gain=c(self.attn_gain),
                       mlp_gain=c(self.mlp_gain), q_gain=c(self.q_gain), k_gain=c(self.k_gain))


def init_layer_params(rng: np.random.Generator, dim: int, num_heads: int = 1, hidden: int | None = None,
                      num_layers: int = 1, bias: BiasSpec | None = None, qk_norm: bool = True,
                      gains: bool = True, orthonormal_v: bool = False, **flags) -> LayerParams:
    """Gaussian init with std ``1/sqrt(D)``; residual scale ``1/sqrt(num_layers)``."""
    std = dim ** -0.5

    def proj():
        return rng.normal(0.0, std, (dim, dim))

    q, k, v, o = proj(), proj(), proj(), proj()
    if orthonormal_v:
        v, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    hd = dim // num_heads
    return LayerParams(
        q, k, v, o, MlpParams.init(rng, dim, hidden), num_heads=num_heads,
        alpha_res=num_layers ** -0.5, bias=bias or BiasSpec(), qk_norm=qk_norm,
        attn_gain=np.ones(dim) if gains else None, mlp_gain=np.ones(dim) if gains else None,
        q_gain=np.ones(hd) if gains and qk_norm else None,
        k_gain=np.ones(hd) if gains and qk_norm else None, **flags)


def apply_mlp(mlp: MlpLike, v: np.ndarray) -> np.ndarray:
    if isinstance(mlp, MlpParams):
        return mlp_apply(mlp, v)
    return mlp(v)


# -- per-position building blocks; all broadcast over leading axes ----------

def norm_in(p: LayerParams, x: np.ndarray) -> np.ndarray:
    return x if p.norm_free else rms_norm(x, p.attn_gain)


def _heads(p: LayerParams, t: np.ndarray) -> np.ndarray:
    return t.reshape(t.shape[:-1] + (p.num_heads, p.head_dim))


def _qk_norm(p: LayerParams, t: np.ndarray, gain) -> np.ndarray:
    if p.norm_free or not p.qk_norm:
        return t
    return rms_norm(_heads(p, t), gain).reshape(t.shape)


def _project(p: LayerParams, xn: np.ndarray, w: np.ndarray) -> np.ndarray:
    if p.fixed_order:
        return dot_last(xn[..., None, :], w)
    return xn @ w.T


def project_q(p: LayerParams, xn: np.ndarray) -> np.ndarray:
    return _qk_norm(p, _project(p, xn, p.q_proj), p.q_gain)


def project_k(p: LayerParams, xn: np.ndarray) -> np.ndarray:
    return _qk_norm(p, _project(p, xn, p.k_proj), p.k_gain)


def project_v(p: LayerParams, xn: np.ndarray) -> np.ndarray:
    return _project(p, xn, p.v_proj)


def persistent_kv(p: LayerParams, z: np.ndarray):
    """Persistent (key, value) computed from layer outputs ``z``."""
    zn = rms_norm(z, p.attn_gain) if (p.kv_norm and not p.norm_free) else z
    return project_k(p, zn), project_v(p, zn)


def residual_out(p: LayerParams, x: np.ndarray, a: np.ndarray) -> np.ndarray:
    """``x + alpha * (a + MLP[RMS(x + alpha * a)])``."""
    u = x + p.alpha_res * a
    un = u if p.norm_free else rms_norm(u, p.mlp_gain)
    return u + p.alpha_res * apply_mlp(p.mlp, un)


def head_bias(p: LayerParams, n: int) -> np.ndarray | None:
    """(H, n, n) bias over positions ``0..n-1``, or None."""
    if p.bias.kind == "none":
        return None
    pos = np.arange(n)
    return np.stack([p.bias.for_head(h, p.num_heads).matrix(pos, pos) for h in range(p.num_heads)])


def _softmax_last(s: np.ndarray) -> np.ndarray:
    w = np.exp(s - s.max(axis=-1, keepdims=True))
    return w / w.sum(axis=-1, keepdims=True)


def causal_probs(p: LayerParams, q, k_prev, k_diag, bias):
    """Attention weights (B, H, N, N) where query i sees ``k_prev[j]`` for
    ``j < i`` and ``k_diag[i]`` on the diagonal. Inputs are (B, N, D)."""
    b, n, _ = q.shape
    qh = _heads(p, q).transpose(0, 2, 1, 3) * p.logit_scale   # B H N hd
    kh = _heads(p, k_prev).transpose(0, 2, 1, 3)
    s = dot_last(qh[:, :, :, None, :], kh[:, :, None, :, :])
    diag = dot_last(qh, _heads(p, k_diag).transpose(0, 2, 1, 3))
    idx = np.arange(n)
    s[..., idx, idx] = diag
    if bias is not None:
        s = s + bias
    s = np.where(np.tril(np.ones((n, n), dtype=bool)), s, -np.inf)
    return _softmax_last(s), s


def causal_mix(p: LayerParams, probs, v_prev, v_diag):
    """Per-head weighted values, concatenated to (B, N, D) (before out_proj)."""
    b, n, d = v_prev.shape
    idx = np.arange(n)
    pd = probs[..., idx, idx]                                  # B H N
    off = probs.copy()
    off[..., idx, idx] = 0.0
    vh = _heads(p, v_prev).transpose(0, 2, 1, 3)
    c = off @ vh + pd[..., None] * _heads(p, v_diag).transpose(0, 2, 1, 3)
    return c.transpose(0, 2, 1, 3).reshape(b, n, d)


def _batched(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"expected (N, D) or (B, N, D) input, got {x.shape}")


def _check_input(p: LayerParams, x: np.ndarray):
    if x.shape[-1] != p.dim:
        raise ShapeError(f"input feature dim {x.shape[-1]} != D={p.dim}")
    if x.shape[-2] < 1:
        raise ShapeError("sequence length must be at least 1")


def transformer_forward(p: LayerParams, x: np.ndarray, return_logits: bool = False):
    """Standard causal pre-norm layer: keys and values come from the inputs."""
    xb, single = _batched(x)
    _check_input(p, xb)
    xn = norm_in(p, xb)
    q, k, v = project_q(p, xn), project_k(p, xn), project_v(p, xn)
    probs, logits = causal_probs(p, q, k, k, head_bias(p, xb.shape[1]))
    a = causal_mix(p, probs, v, v) @ p.out_proj.T
    y = residual_out(p, xb, a)
    y = y[0] if single else y
    if return_logits:
        return y, (logits[0] if single else logits)
    return y


# -- recurrent layer ---------------------------------------------------------

class KVCache:
    """Position-major store of persistent key/value vectors.

    ``keys`` and ``values`` have shape ``(N, *batch, D)``; entries at
    positions ``< filled`` are written once and never modified.
    """

    def __init__(self, n: int, dim: int, batch: tuple = ()):
        self.keys = np.zeros((n,) + tuple(batch) + (dim,))
        self.values = np.zeros_like(self.keys)
        self.filled = 0

    @property
    def capacity(self) -> int:
        return self.keys.shape[0]

    def write(self, t: int, k: np.ndarray, v: np.ndarray) -> None:
        if t != self.filled:
            raise IndexError(f"cache is append-only: next position is {self.filled}, got {t}")
        self.keys[t] = k
        self.values[t] = v
        self.filled += 1

    def prefix(self, t: int):
        if t > self.filled:
            raise IndexError(f"position {t} not yet revealed (filled={self.filled})")
        return self.keys[:t], self.values[:t]


@dataclass
class LayerIO:
    x: np.ndarray
    z: np.ndarray
    a: np.ndarray
    cache: KVCache
    logits: list | None = None


def _unbatch_cache(cache: KVCache) -> KVCache:
    out = KVCache.__new__(KVCache)
    out.keys, out.values, out.filled = cache.keys[:, 0], cache.values[:, 0], cache.filled
    return out


def rt_forward_naive(p: LayerParams, x: np.ndarray, record_logits: bool = False,
                     temp_hook: Callable | None = None) -> LayerIO:
    """Sequential RT layer: position ``t`` attends to persistent pairs
    ``0..t-1`` plus its own temporary pair, then reveals its persistent pair.

    ``temp_hook(t, k_temp, v_temp) -> (k_temp, v_temp)`` may replace the
    temporary pair at position ``t`` (used to probe isolation).
    """
    xb, single = _batched(x)
    _check_input(p, xb)
    b, n, d = xb.shape
    h, hd = p.num_heads, p.head_dim
    xn = norm_in(p, xb)
    q = project_q(p, xn)
    k_tmp, v_tmp = project_k(p, xn), project_v(p, xn)
    bias = head_bias(p, n)
    cache = KVCache(n, d, (b,))
    z = np.empty_like(xb)
    a = np.empty_like(xb)
    logits_rec = [] if record_logits else None
    scale = p.logit_scale
    for t in range(n):
        kt, vt = k_tmp[:, t], v_tmp[:, t]
        if temp_hook is not None:
            kt, vt = temp_hook(t, kt.copy(), vt.copy())
        qt = q[:, t].reshape(b, h, hd) * scale
        kp, vp = cache.prefix(t)                                   # t B D
        keys = np.concatenate([kp, kt[None]]).reshape(t + 1, b, h, hd)
        vals = np.concatenate([vp, vt[None]]).reshape(t + 1, b, h, hd)
        s = dot_last(qt[None], keys).transpose(1, 2, 0)
        if bias is not None:
            s = s + bias[None, :, t, :t + 1]
        if record_logits:
            logits_rec.append(s[0] if single else s)
        w = np.exp(s - s.max(axis=-1, keepdims=True))
        w /= w.sum(axis=-1, keepdims=True)
        c = np.einsum("bhj,jbhd->bhd", w, vals).reshape(b, d)
        a[:, t] = c @ p.out_proj.T
        z[:, t] = residual_out(p, xb[:, t], a[:, t])
        kz, vz = persistent_kv(p, z[:, t])
        cache.write(t, kz, vz)
    if single:
        return LayerIO(xb[0], z[0], a[0], _unbatch_cache(cache), logits_rec)
    return LayerIO(xb, z, a, cache, logits_rec)


def rt_recompute_intermediates(p: LayerParams, x: np.ndarray, z: np.ndarray) -> LayerIO:
    """Rebuild the cache and attention outputs from checkpointed ``(x, z)``
    without the sequential reveal: all persistent pairs come from ``z`` at
    once, then every position's attention is evaluated in parallel."""
    xb, single = _batched(x)
    zb, _ = _batched(z)
    _check_input(p, xb)
    if zb.shape != xb.shape:
        raise ShapeError(f"x {xb.shape} and z {zb.shape} differ")
    b, n, d = xb.shape
    xn = norm_in(p, xb)
    k_p, v_p = persistent_kv(p, zb)
    probs, _ = causal_probs(p, project_q(p, xn), k_p, project_k(p, xn), head_bias(p, n))
    a = causal_mix(p, probs, v_p, project_v(p, xn)) @ p.out_proj.T
    cache = KVCache(n, d, (b,))
    cache.keys[:] = k_p.transpose(1, 0, 2)
    cache.values[:] = v_p.transpose(1, 0, 2)
    cache.filled = n
    if single:
        return LayerIO(xb[0], zb[0], a[0], _unbatch_cache(cache))
    return LayerIO(xb, zb, a, cache)


PARAM_NAMES = ("q_proj", "k_proj", "v_proj", "out_proj", "mlp.w_in", "mlp.b_in", "mlp.w_out",
               "mlp.b_out", "attn_gain", "mlp_gain", "q_gain", "k_gain")


def get_param(p: LayerParams, name: str):
    if name.startswith("mlp."):
        return getattr(p.mlp, name[4:])
    return getattr(p, name)


def named_arrays(p: LayerParams) -> dict[str, np.ndarray]:
    """Learnable arrays of ``p`` by name, skipping absent gains. The arrays
    are the live objects, so in-place updates modify ``p``."""
    if not isinstance(p.mlp, MlpParams):
        raise TypeError("layer uses a functional MLP and has no learnable MLP arrays")
    out = {}
    for name in PARAM_NAMES:
        a = get_param(p, name)
        if a is not None:
            out[name] = a
    return out


def zeros_like_params(p: LayerParams) -> LayerParams:
    g = p.copy()
    for a in named_arrays(g).values():
        a[...] = 0.0
    return g
