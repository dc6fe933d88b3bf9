"""Dense float64 kernels shared by the rest of the package.

Vectors and matrices are plain ``numpy.ndarray`` objects of dtype float64.
Every function here broadcasts over leading axes, so a batch of vectors is
just an array of shape ``(..., D)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RMS_EPS = 1e-8
_GELU_C = np.sqrt(2.0 / np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


def as_vec(data) -> np.ndarray:
    v = np.asarray(data, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] < 1:
        raise ShapeError(f"expected a non-empty 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def as_mat(data) -> np.ndarray:
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-d matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``m @ v`` for one vector or a stack of vectors along leading axes."""
    if m.ndim != 2 or v.shape[-1] != m.shape[1]:
        raise ShapeError(f"cannot multiply {m.shape} matrix by vector(s) of shape {v.shape}")
    return v @ m.T


def dot_last(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Inner product over the last axis (with broadcasting), summed strictly
    left to right. BLAS and pairwise summation group terms by vector length,
    so padding a vector with zeros could change the result; a fixed order
    makes zero-padded dot products bit-identical to unpadded ones."""
    a, b = np.broadcast_arrays(a, b)
    out = a[..., 0] * b[..., 0]
    for i in range(1, a.shape[-1]):
        out = out + a[..., i] * b[..., i]
    return out


def rms_norm(v: np.ndarray, gain: np.ndarray | None = None, eps: float = RMS_EPS) -> np.ndarray:
    """Root-mean-square normalization over the last axis.

    Computes ``v / sqrt(mean(v**2) + eps)``, which equals ``sqrt(D) * v / |v|``
    whenever ``|v|**2 / D`` dominates ``eps``. A gain, when given, multiplies
    the normalized vector elementwise.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] < 1:
        raise ShapeError("rms_norm needs at least one feature")
    out = v / np.sqrt(np.mean(v * v, axis=-1, keepdims=True) + eps)
    if gain is not None:
        if gain.shape != v.shape[-1:]:
            raise ShapeError(f"gain shape {gain.shape} does not match feature dim {v.shape[-1]}")
        out = out * gain
    return out


def rms_norm_backward(v: np.ndarray, grad_out: np.ndarray, gain: np.ndarray | None = None,
                      eps: float = RMS_EPS):
    """Vector-Jacobian product of :func:`rms_norm`.

    Returns ``(grad_v, grad_gain)``; ``grad_gain`` is summed over all leading
    axes and is ``None`` when no gain is used.
    """
    d = v.shape[-1]
    r = np.sqrt(np.mean(v * v, axis=-1, keepdims=True) + eps)
    n = v / r
    grad_gain = None
    if gain is not None:
        grad_gain = (grad_out * n).reshape(-1, d).sum(axis=0)
        grad_out = grad_out * gain
    # d(v/r) = dv/r - v (v.dv) / (D r^3)
    dot = np.sum(grad_out * v, axis=-1, keepdims=True)
    grad_v = grad_out / r - v * dot / (d * r ** 3)
    return grad_v, grad_gain


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner


@dataclass
class MlpParams:
    """Two-layer GELU MLP mapping ``R^D -> R^D`` through ``hidden`` units."""

    w_in: np.ndarray   # (hidden, D)
    b_in: np.ndarray   # (hidden,)
    w_out: np.ndarray  # (D, hidden)
    b_out: np.ndarray  # (D,)

    def __post_init__(self):
        h, d = self.w_in.shape
        if self.b_in.shape != (h,) or self.w_out.shape != (d, h) or self.b_out.shape != (d,):
            raise ShapeError(
                f"inconsistent MLP shapes: w_in {self.w_in.shape}, b_in {self.b_in.shape}, "
                f"w_out {self.w_out.shape}, b_out {self.b_out.shape}")

    @property
    def dim(self) -> int:
        return self.w_in.shape[1]

    @property
    def hidden(self) -> int:
        return self.w_in.shape[0]

    @classmethod
    def zeros(cls, dim: int, hidden: int | None = None) -> "MlpParams":
        hidden = 4 * dim if hidden is None else hidden
        return cls(np.zeros((hidden, dim)), np.zeros(hidden), np.zeros((dim, hidden)), np.zeros(dim))

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, hidden: int | None = None) -> "MlpParams":
        hidden = 4 * dim if hidden is None else hidden
        return cls(rng.normal(0.0, dim ** -0.5, (hidden, dim)), np.zeros(hidden),
                   rng.normal(0.0, hidden ** -0.5, (dim, hidden)), np.zeros(dim))

    def copy(self) -> "MlpParams":
        return MlpParams(self.w_in.copy(), self.b_in.copy(), self.w_out.copy(), self.b_out.copy())


def mlp_apply(p: MlpParams, v: np.ndarray) -> np.ndarray:
    if v.shape[-1] != p.dim:
        raise ShapeError(f"MLP expects feature dim {p.dim}, got {v.shape[-1]}")
    return gelu(v @ p.w_in.T + p.b_in) @ p.w_out.T + p.b_out


def mlp_backward(p: MlpParams, v: np.ndarray, grad_out: np.ndarray):
    """Returns ``(grad_v, MlpParams of gradients)`` with parameter grads summed
    over the leading axes of ``v``."""
    pre = v @ p.w_in.T + p.b_in
    hid = gelu(pre)
    g_hid = grad_out @ p.w_out
    g_pre = g_hid * gelu_grad(pre)
    grad_v = g_pre @ p.w_in
    d, h = p.dim, p.hidden
    go = grad_out.reshape(-1, d)
    gp = g_pre.reshape(-1, h)
    grads = MlpParams(gp.T @ v.reshape(-1, d), gp.sum(axis=0), go.T @ hid.reshape(-1, h), go.sum(axis=0))
    return grad_v, grads
