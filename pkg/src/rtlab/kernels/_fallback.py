"""Pure numpy versions of the hot kernels.

Signatures match the compiled module exactly; both mutate their running
statistics in place.
"""
import numpy as np


def update_tile(q, k, v, bias, m, l, o):
    """Absorb the key/value tile ``(k, v)`` into the online-softmax state of
    the queries ``q``.

    q: (nq, d); k: (nk, d); v: (nk, dv); bias: (nq, nk) additive logits or
    None; m, l: (nq,); o: (nq, dv). ``m``, ``l`` and ``o`` are updated in place.
    """
    s = q @ k.T
    if bias is not None:
        s = s + bias
    m_new = np.maximum(m, s.max(axis=1))
    rescale = np.exp(m - m_new)
    p = np.exp(s - m_new[:, None])
    o *= rescale[:, None]
    o += p @ v
    l *= rescale
    l += p.sum(axis=1)
    m[...] = m_new

