"""Hand-written reverse mode for the Transformer and RT layers.

The RT backward keeps only the persistent key/value gradients inside the
reverse loop over positions: ``dz_{t}`` is final only once every later query
has pushed its contribution into ``(dk_t, dv_t)``. Query, temporary-pair,
input and parameter gradients are assembled afterwards in batched passes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core_math import MlpParams, ShapeError, gelu_grad, mlp_backward, rms_norm, rms_norm_backward
from .layers import (
    LayerIO, LayerParams, _batched, _heads, causal_mix, causal_probs, get_param, head_bias,
    named_arrays, project_k, project_q, project_v, rt_forward_naive, transformer_forward,
    zeros_like_params,
)


@dataclass
class LayerGrads:
    d_x: np.ndarray
    d_params: LayerParams


@dataclass
class _Tape:
    x: np.ndarray
    xn: np.ndarray
    q_pre: np.ndarray
    q: np.ndarray
    kt_pre: np.ndarray
    k_tmp: np.ndarray
    v_tmp: np.ndarray
    zn: np.ndarray | None
    kp_pre: np.ndarray | None
    k_p: np.ndarray | None
    v_p: np.ndarray | None
    probs: np.ndarray
    c: np.ndarray
    u: np.ndarray
    un: np.ndarray
    mlp_dact: np.ndarray   # GELU derivative at the MLP pre-activation


def _norm_on(p):
    return not p.norm_free


def _qk_on(p):
    return p.qk_norm and not p.norm_free


def _qk_norm_backward(p: LayerParams, pre, grad, gain):
    if not _qk_on(p):
        return grad, None
    gv, gg = rms_norm_backward(_heads(p, pre), _heads(p, grad), gain)
    return gv.reshape(pre.shape), gg


def _tape(p: LayerParams, x, z=None) -> _Tape:
    """All intermediates of one layer evaluated in parallel. With ``z`` the
    RT layer is taped, without it the Transformer layer."""
    if not isinstance(p.mlp, MlpParams):
        raise TypeError("backward needs a parametric MLP")
    xn = rms_norm(x, p.attn_gain) if _norm_on(p) else x
    q_pre = xn @ p.q_proj.T
    kt_pre = xn @ p.k_proj.T
    q, k_tmp, v_tmp = project_q(p, xn), project_k(p, xn), project_v(p, xn)
    zn = kp_pre = k_p = v_p = None
    if z is not None:
        zn = rms_norm(z, p.attn_gain) if (p.kv_norm and _norm_on(p)) else z
        kp_pre = zn @ p.k_proj.T
        k_p, v_p = project_k(p, zn), project_v(p, zn)
        probs, _ = causal_probs(p, q, k_p, k_tmp, head_bias(p, x.shape[1]))
        c = causal_mix(p, probs, v_p, v_tmp)
    else:
        probs, _ = causal_probs(p, q, k_tmp, k_tmp, head_bias(p, x.shape[1]))
        c = causal_mix(p, probs, v_tmp, v_tmp)
    u = x + p.alpha_res * (c @ p.out_proj.T)
    un = rms_norm(u, p.mlp_gain) if _norm_on(p) else u
    dact = gelu_grad(un @ p.mlp.w_in.T + p.mlp.b_in)
    return _Tape(x, xn, q_pre, q, kt_pre, k_tmp, v_tmp, zn, kp_pre, k_p, v_p, probs, c, u, un, dact)


def _residual_backward(p: LayerParams, tp: _Tape, dz, t=None):
    """Given dL/dz at (all or one) positions, return dL/du there."""
    sl = np.s_[:, :] if t is None else np.s_[:, t]
    d_un = (((p.alpha_res * dz) @ p.mlp.w_out) * tp.mlp_dact[sl]) @ p.mlp.w_in
    u = tp.u[sl]
    if _norm_on(p):
        d_un, _ = rms_norm_backward(u, d_un, p.mlp_gain)
    return dz + d_un


def _attn_backward(p: LayerParams, probs, q, k_prev, k_diag, v_prev, v_diag, dc, want_prev=True):
    """Batched softmax-attention backward in the causal_probs layout.

    Returns ``(dq, dk_prev, dk_diag, dv_prev, dv_diag)``, all (B, N, D);
    the ``prev`` entries are None when ``want_prev`` is False.
    """
    b, n, d = q.shape
    idx = np.arange(n)

    def hm(t):
        return _heads(p, t).transpose(0, 2, 1, 3)           # B H N hd

    def back(t):
        return t.transpose(0, 2, 1, 3).reshape(b, n, d)

    scale = p.logit_scale
    qh, kph, kdh, vph, vdh, dch = hm(q), hm(k_prev), hm(k_diag), hm(v_prev), hm(v_diag), hm(dc)
    dP = dch @ vph.transpose(0, 1, 3, 2)
    dP[..., idx, idx] = np.einsum("bhnd,bhnd->bhn", dch, vdh)
    ds = probs * (dP - np.sum(probs * dP, axis=-1, keepdims=True))
    ds_diag = ds[..., idx, idx]
    p_diag = probs[..., idx, idx]
    ds_off = ds.copy()
    ds_off[..., idx, idx] = 0.0
    dq = scale * (ds_off @ kph + ds_diag[..., None] * kdh)
    dk_diag = scale * ds_diag[..., None] * qh
    dv_diag = p_diag[..., None] * dch
    dk_prev = dv_prev = None
    if want_prev:
        p_off = probs.copy()
        p_off[..., idx, idx] = 0.0
        dk_prev = back(scale * ds_off.transpose(0, 1, 3, 2) @ qh)
        dv_prev = back(p_off.transpose(0, 1, 3, 2) @ dch)
    return back(dq), dk_prev, back(dk_diag), dv_prev, back(dv_diag)


def _input_side_backward(p: LayerParams, tp: _Tape, grads: LayerParams, dq, dk_tmp, dv_tmp):
    """Gradients flowing into x through the query/temporary projections."""
    dq_pre, gq = _qk_norm_backward(p, tp.q_pre, dq, p.q_gain)
    dkt_pre, gk = _qk_norm_backward(p, tp.kt_pre, dk_tmp, p.k_gain)
    d = p.dim
    grads.q_proj += dq_pre.reshape(-1, d).T @ tp.xn.reshape(-1, d)
    grads.k_proj += dkt_pre.reshape(-1, d).T @ tp.xn.reshape(-1, d)
    grads.v_proj += dv_tmp.reshape(-1, d).T @ tp.xn.reshape(-1, d)
    if gq is not None:
        grads.q_gain += gq
    if gk is not None:
        grads.k_gain += gk
    d_xn = dq_pre @ p.q_proj + dkt_pre @ p.k_proj + dv_tmp @ p.v_proj
    if _norm_on(p):
        d_xn, ga = rms_norm_backward(tp.x, d_xn, p.attn_gain)
        if ga is not None:
            grads.attn_gain += ga
    return d_xn


def _output_side_grads(p: LayerParams, tp: _Tape, grads: LayerParams, dz, du):
    """Parameter gradients of out_proj, the MLP and the MLP-side norm."""
    d = p.dim
    da = p.alpha_res * du
    grads.out_proj += da.reshape(-1, d).T @ tp.c.reshape(-1, d)
    d_un, mg = mlp_backward(p.mlp, tp.un, p.alpha_res * dz)
    for name in ("w_in", "b_in", "w_out", "b_out"):
        getattr(grads.mlp, name)[...] += getattr(mg, name)
    if _norm_on(p) and p.mlp_gain is not None:
        _, gm = rms_norm_backward(tp.u, d_un, p.mlp_gain)
        grads.mlp_gain += gm


def _check_seed(io_z, seed):
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != np.shape(io_z):
        raise ShapeError(f"seed shape {seed.shape} != output shape {np.shape(io_z)}")
    return seed


def rt_backward(p: LayerParams, io: LayerIO, seed) -> LayerGrads:
    """Vector-Jacobian product of the RT layer at ``io`` with upstream ``seed``
    (dL/dz). Intermediates are recomputed in parallel from ``(io.x, io.z)``,
    so any forward schedule that produced ``io`` can be differentiated."""
    seed = _check_seed(io.z, seed)
    xb, single = _batched(io.x)
    zb, _ = _batched(io.z)
    gb, _ = _batched(seed)
    tp = _tape(p, xb, zb)
    b, n, d = xb.shape
    h, hd = p.num_heads, p.head_dim
    scale = p.logit_scale
    grads = zeros_like_params(p)

    qh = (tp.q * scale).reshape(b, n, h, hd)
    kph = tp.k_p.reshape(b, n, h, hd)
    vph = tp.v_p.reshape(b, n, h, hd)
    dk = np.zeros((b, n, h, hd))        # persistent key/value accumulators
    dv = np.zeros((b, n, h, hd))
    dkp_pre = np.zeros((b, n, d))
    dz = np.zeros((b, n, d))
    du = np.zeros((b, n, d))
    dc = np.zeros((b, n, d))
    kv_on = p.kv_norm and _norm_on(p)
    for t in range(n - 1, -1, -1):
        # (dk_t, dv_t) are complete: every query > t has been processed
        dkp_pre[:, t], _ = _qk_norm_backward(p, tp.kp_pre[:, t], dk[:, t].reshape(b, d), p.k_gain)
        d_zn = dkp_pre[:, t] @ p.k_proj + dv[:, t].reshape(b, d) @ p.v_proj
        if kv_on:
            d_zn, _ = rms_norm_backward(zb[:, t], d_zn, p.attn_gain)
        dz[:, t] = gb[:, t] + d_zn
        if not np.all(np.isfinite(dz[:, t])):
            raise FloatingPointError(f"non-finite gradient at position {t}")
        du[:, t] = _residual_backward(p, tp, dz[:, t], t)
        dc[:, t] = (p.alpha_res * du[:, t]) @ p.out_proj
        if t == 0:
            continue
        # push position t's attention gradient into earlier persistent pairs
        pr = tp.probs[:, :, t, :t + 1]                          # B H t+1
        dch = dc[:, t].reshape(b, h, hd)
        dP = np.einsum("bhd,bjhd->bhj", dch, vph[:, :t])
        dP_tmp = np.einsum("bhd,bhd->bh", dch, tp.v_tmp[:, t].reshape(b, h, hd))
        mean = np.sum(pr[..., :t] * dP, axis=-1) + pr[..., t] * dP_tmp
        ds = pr[..., :t] * (dP - mean[..., None])
        dk[:, :t] += np.einsum("bhj,bhd->bjhd", ds, qh[:, t])
        dv[:, :t] += np.einsum("bhj,bhd->bjhd", pr[..., :t], dch)

    # batched: queries, temporary pairs, inputs, parameters
    dq, _, dk_tmp, _, dv_tmp = _attn_backward(p, tp.probs, tp.q, tp.k_p, tp.k_tmp, tp.v_p, tp.v_tmp,
                                              dc, want_prev=False)
    d_x = du + _input_side_backward(p, tp, grads, dq, dk_tmp, dv_tmp)
    _, gk = _qk_norm_backward(p, tp.kp_pre, dk.reshape(b, n, d), p.k_gain)
    if gk is not None:
        grads.k_gain += gk
    grads.k_proj += dkp_pre.reshape(-1, d).T @ tp.zn.reshape(-1, d)
    grads.v_proj += dv.reshape(-1, d).T @ tp.zn.reshape(-1, d)
    if kv_on and p.attn_gain is not None:
        d_zn = dkp_pre @ p.k_proj + dv.reshape(b, n, d) @ p.v_proj
        _, ga = rms_norm_backward(zb, d_zn, p.attn_gain)
        grads.attn_gain += ga
    _output_side_grads(p, tp, grads, dz, du)
    return LayerGrads(d_x[0] if single else d_x, grads)


def transformer_backward(p: LayerParams, x, seed) -> LayerGrads:
    """Vector-Jacobian product of :func:`transformer_forward`; fully batched."""
    xb, single = _batched(x)
    gb, _ = _batched(_check_seed(x, seed))
    tp = _tape(p, xb)
    grads = zeros_like_params(p)
    du = _residual_backward(p, tp, gb)
    dc = (p.alpha_res * du) @ p.out_proj
    dq, dk_prev, dk_diag, dv_prev, dv_diag = _attn_backward(
        p, tp.probs, tp.q, tp.k_tmp, tp.k_tmp, tp.v_tmp, tp.v_tmp, dc)
    d_x = du + _input_side_backward(p, tp, grads, dq, dk_prev + dk_diag, dv_prev + dv_diag)
    _output_side_grads(p, tp, grads, gb, du)
    return LayerGrads(d_x[0] if single else d_x, grads)


# -- finite-difference oracle ------------------------------------------------

def finite_diff_jacobian(f: Callable[[np.ndarray], np.ndarray], x0, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian, shape ``(f(x0).size, x0.size)``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x0 = np.asarray(x0, dtype=np.float64)
    flat = x0.ravel()
    cols = []
    for j in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[j] += h
        xm[j] -= h
        fp = np.asarray(f(xp.reshape(x0.shape)), dtype=np.float64).ravel()
        fm = np.asarray(f(xm.reshape(x0.shape)), dtype=np.float64).ravel()
        cols.append((fp - fm) / (2 * h))
    return np.stack(cols, axis=1)


def rel_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@dataclass
class GradcheckReport:
    passed: bool
    max_rel_error: float
    worst_name: str
    worst_index: tuple
    tol: float
    n_checked: int


def _layer_out(p: LayerParams, x, arch: str) -> np.ndarray:
    return rt_forward_naive(p, x).z if arch == "rt" else transformer_forward(p, x)


def layer_loss(p: LayerParams, x, seed, arch: str = "rt") -> float:
    """Scalar ``<seed, layer(x)>`` used as the gradcheck objective."""
    return float(np.sum(seed * _layer_out(p, x, arch)))


def numeric_grads(p: LayerParams, x, seed, h: float = 1e-5, arch: str = "rt"):
    """Central differences of :func:`layer_loss` w.r.t. x and every parameter.

    The layer output is differenced elementwise before contracting with
    ``seed``, which keeps cancellation error per output element.
    """
    s = np.ravel(seed)

    def grad_of(f, x0):
        return (s @ finite_diff_jacobian(f, x0, h)).reshape(np.shape(x0))

    out = {"x": grad_of(lambda xx: _layer_out(p, xx, arch), x)}
    for name, arr in named_arrays(p).items():
        saved = arr.copy()

        def f(val, arr=arr):
            arr[...] = val
            return _layer_out(p, x, arch)

        out[name] = grad_of(f, saved)
        arr[...] = saved
    return out


def gradcheck(p: LayerParams, x, seed, tol: float = 1e-6, h: float = 1e-5, arch: str = "rt",
              backward: Callable | None = None) -> GradcheckReport:
    """Compare every coordinate of the analytic gradient with central
    differences; pass iff the max relative error is below ``tol``."""
    x = np.asarray(x, dtype=np.float64)
    if backward is None:
        if arch == "rt":
            def backward(pp, xx, ss):
                return rt_backward(pp, rt_forward_naive(pp, xx), ss)
        else:
            backward = transformer_backward
    g = backward(p, x, seed)
    analytic = {"x": g.d_x}
    analytic.update({name: get_param(g.d_params, name) for name in named_arrays(p)})
    numeric = numeric_grads(p, x, seed, h, arch)
    worst, worst_name, worst_idx, count = -1.0, "", (), 0
    for name, num in numeric.items():
        err = rel_error(analytic[name], num)
        count += err.size
        i = np.unravel_index(int(np.argmax(err)), err.shape)
        if err[i] > worst:
            worst, worst_name, worst_idx = float(err[i]), name, tuple(int(k) for k in i)
    return GradcheckReport(worst < tol, worst, worst_name, worst_idx, tol, count)


def dot_product_test(p: LayerParams, x, seed, direction, h: float = 1e-5, arch: str = "rt"):
    """``(<J u, seed>, <u, d_x>)``: the forward perturbation along ``u`` by
    central differences, and the reverse-mode contraction."""
    x = np.asarray(x, dtype=np.float64)
    fwd = (layer_loss(p, x + h * direction, seed, arch) - layer_loss(p, x - h * direction, seed, arch)) / (2 * h)
    if arch == "rt":
        dx = rt_backward(p, rt_forward_naive(p, x), seed).d_x
    else:
        dx = transformer_backward(p, x, seed).d_x
    return fwd, float(np.sum(direction * dx))
