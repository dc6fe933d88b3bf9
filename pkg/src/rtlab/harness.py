"""Desk-scale copy-task training for stacked RT or Transformer layers."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import BiasSpec
from .autograd import rt_backward, transformer_backward
from .core_math import rms_norm, rms_norm_backward
from .layers import LayerParams, init_layer_params, named_arrays, rt_forward_naive, transformer_forward
from .tiling import rt_forward_tiled

ARCHS = ("rt", "tf")


class TrainingDiverged(RuntimeError):
    pass


# -- data ---------------------------------------------------------------------

@dataclass(frozen=True)
class CopyTaskCfg:
    """``M`` random tokens, a marker, then the same ``M`` tokens again.

    The marker is the last vocabulary id; prefix tokens are drawn uniformly
    from the other ``vocab - 1`` ids.
    """

    vocab: int = 16
    prefix_len: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.vocab < 4:
            raise ValueError("vocab must be at least 4")
        if self.prefix_len < 1:
            raise ValueError("prefix_len must be at least 1")

    @property
    def marker(self) -> int:
        return self.vocab - 1

    @property
    def seq_len(self) -> int:
        return 2 * self.prefix_len + 1


def gen_copy_batch(cfg: CopyTaskCfg, batch: int, rng: np.random.Generator | None = None):
    """Return ``(tokens, loss_mask)``, both ``(batch, 2M+1)``.

    ``loss_mask`` is true on the ``M`` copied positions. Without ``rng`` the
    batch is a pure function of ``cfg.seed``.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    m = cfg.prefix_len
    prefix = rng.integers(0, cfg.vocab - 1, size=(batch, m))
    tokens = np.concatenate([prefix, np.full((batch, 1), cfg.marker), prefix], axis=1)
    mask = np.zeros(tokens.shape, dtype=bool)
    mask[:, m + 1:] = True
    return tokens, mask


# -- model --------------------------------------------------------------------

@dataclass
class ModelCfg:
    arch: str = "rt"
    layers: int = 1
    dim: int = 64
    heads: int = 2
    vocab: int = 16
    hidden: int | None = None
    bias: str = "alibi"
    qk_norm: bool = True
    kv_norm: bool = True
    scale_logits: bool = False
    tied: bool = False
    tiled: bool = False

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.layers < 0:
            raise ValueError("layers must be non-negative")

    def bias_spec(self) -> BiasSpec:
        return BiasSpec(self.bias)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParams:
    embed: np.ndarray                    # (V, D)
    layers: list[LayerParams]
    final_gain: np.ndarray               # (D,)
    unembed: np.ndarray | None = None    # (V, D); None when tied

    @property
    def out_matrix(self) -> np.ndarray:
        return self.embed if self.unembed is None else self.unembed

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {"embed": self.embed, "final_gain": self.final_gain}
        if self.unembed is not None:
            out["unembed"] = self.unembed
        for i, lp in enumerate(self.layers):
            for k, a in named_arrays(lp).items():
                out[f"layers.{i}.{k}"] = a
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.embed.copy(), [lp.copy() for lp in self.layers], self.final_gain.copy(),
                           None if self.unembed is None else self.unembed.copy())


def init_model(cfg: ModelCfg, rng: np.random.Generator) -> ModelParams:
    d = cfg.dim
    embed = rng.normal(0.0, 1.0, (cfg.vocab, d))
    layers = [init_layer_params(rng, d, cfg.heads, cfg.hidden, num_layers=max(cfg.layers, 1),
                                bias=cfg.bias_spec(), qk_norm=cfg.qk_norm, kv_norm=cfg.kv_norm,
                                scale_logits=cfg.scale_logits)
              for _ in range(cfg.layers)]
    unembed = None if cfg.tied else rng.normal(0.0, 0.5 * d ** -0.5, (cfg.vocab, d))
    return ModelParams(embed, layers, np.ones(d), unembed)


@dataclass
class ForwardTrace:
    logits: np.ndarray
    inputs: list          # per layer input (B, N, D)
    ios: list             # per layer LayerIO (rt) or output (tf)
    final_in: np.ndarray
    final_out: np.ndarray


def model_forward(cfg: ModelCfg, params: ModelParams, tokens) -> ForwardTrace:
    """embed -> layers -> final RMS -> unembed; logits are ``(B, N, V)``."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be (B, N), got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise ValueError(f"token ids must lie in [0, {cfg.vocab})")
    x = params.embed[tokens]
    inputs, ios = [], []
    for lp in params.layers:
        inputs.append(x)
        if cfg.arch == "rt":
            io = (rt_forward_tiled if cfg.tiled else rt_forward_naive)(lp, x)
            ios.append(io)
            x = io.z
        else:
            x = transformer_forward(lp, x)
            ios.append(x)
    h = rms_norm(x, params.final_gain)
    return ForwardTrace(h @ params.out_matrix.T, inputs, ios, x, h)


def _log_softmax(logits):
    s = logits - logits.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def masked_ce(logits, tokens, mask):
    """Mean next-token cross-entropy over masked targets, and dL/dlogits.

    The logit at position ``i`` predicts token ``i + 1``; ``mask`` marks
    target positions.
    """
    tokens = np.asarray(tokens)
    tgt_mask = mask[:, 1:]
    count = int(tgt_mask.sum())
    if count == 0:
        raise ValueError("loss mask selects no targets")
    lp = _log_softmax(logits[:, :-1])
    tgt = tokens[:, 1:]
    picked = np.take_along_axis(lp, tgt[..., None], axis=-1)[..., 0]
    loss = -float((picked * tgt_mask).sum()) / count
    grad = np.zeros_like(logits)
    g = np.exp(lp)
    np.put_along_axis(g, tgt[..., None], np.take_along_axis(g, tgt[..., None], axis=-1) - 1.0, axis=-1)
    grad[:, :-1] = g * (tgt_mask[..., None] / count)
    return loss, grad


def model_backward(cfg: ModelCfg, params: ModelParams, tokens, trace: ForwardTrace, d_logits) -> dict:
    """Gradients of ``sum(d_logits * logits)`` keyed like ``params.named_arrays()``."""
    grads = {}
    w = params.out_matrix
    d_w = np.einsum("bnv,bnd->vd", d_logits, trace.final_out)
    dh = d_logits @ w
    dx, d_gain = rms_norm_backward(trace.final_in, dh, params.final_gain)
    grads["final_gain"] = d_gain
    for i in range(len(params.layers) - 1, -1, -1):
        lp = params.layers[i]
        if cfg.arch == "rt":
            lg = rt_backward(lp, trace.ios[i], dx)
        else:
            lg = transformer_backward(lp, trace.inputs[i], dx)
        for k, a in named_arrays(lg.d_params).items():
            grads[f"layers.{i}.{k}"] = a
        dx = lg.d_x
    d_embed = np.zeros_like(params.embed)
    np.add.at(d_embed, np.asarray(tokens), dx)
    if params.unembed is None:
        grads["embed"] = d_embed + d_w
    else:
        grads["embed"] = d_embed
        grads["unembed"] = d_w
    return grads


def loss_and_grads(cfg: ModelCfg, params: ModelParams, tokens, mask):
    trace = model_forward(cfg, params, tokens)
    loss, d_logits = masked_ce(trace.logits, tokens, mask)
    return loss, model_backward(cfg, params, tokens, trace, d_logits), trace


# -- optimizer ------------------------------------------------------------------

@dataclass
class AdamCfg:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8


@dataclass
class TrainState:
    params: ModelParams
    m: dict
    v: dict
    step: int
    rng: np.random.Generator

    @classmethod
    def fresh(cls, params: ModelParams, rng: np.random.Generator) -> "TrainState":
        arrays = params.named_arrays()
        return cls(params, {k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()}, 0, rng)


def adam_step(state: TrainState, grads: dict, opt: AdamCfg) -> None:
    """In-place Adam update with bias correction; no weight decay."""
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - opt.beta1 ** t, 1.0 - opt.beta2 ** t
    for k, a in state.params.named_arrays().items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        a -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


# -- metrics --------------------------------------------------------------------

def metrics_from_logits(logits, tokens, mask) -> dict:
    """Masked token accuracy, sequence accuracy and mean CE. Argmax ties go
    to the lowest token id."""
    tokens = np.asarray(tokens)
    loss, _ = masked_ce(logits, tokens, mask)
    tgt_mask = mask[:, 1:]
    hit = (np.argmax(logits[:, :-1], axis=-1) == tokens[:, 1:]) & tgt_mask
    tok_acc = float(hit.sum() / tgt_mask.sum())
    seq_acc = float(np.mean(np.all(hit | ~tgt_mask, axis=1)))
    return {"loss": loss, "tok_acc": tok_acc, "seq_acc": seq_acc}


def evaluate(cfg: ModelCfg, params: ModelParams, task: CopyTaskCfg, n_batches: int = 4,
             batch: int = 64) -> dict:
    """Metrics over ``n_batches`` held-out batches drawn from ``task.seed``."""
    rng = np.random.default_rng([task.seed, 1])
    totals = {"loss": 0.0, "tok_acc": 0.0, "seq_acc": 0.0}
    for _ in range(n_batches):
        tokens, mask = gen_copy_batch(task, batch, rng)
        m = metrics_from_logits(model_forward(cfg, params, tokens).logits, tokens, mask)
        for k in totals:
            totals[k] += m[k] / n_batches
    return totals


# -- training loop --------------------------------------------------------------

@dataclass
class TrainResult:
    trace: list[dict]
    final: dict
    state: TrainState
    metadata: dict = field(default_factory=dict)


def train(cfg: ModelCfg, task: CopyTaskCfg, steps: int, opt: AdamCfg | None = None, batch: int = 32,
          eval_every: int = 100, eval_batches: int = 4, seed: int = 0, state: TrainState | None = None,
          divergence_window: int = 50, log=None) -> TrainResult:
    """Adam on masked cross-entropy.

    The trace holds one row per evaluation (``step, loss, tok_acc,
    seq_acc``). Aborts with :class:`TrainingDiverged` when the training loss
    stays above ``10 ln V`` for ``divergence_window`` consecutive steps.
    Everything is a function of ``seed`` (init) and ``task.seed`` (data).
    """
    opt = opt or AdamCfg()
    if state is None:
        params = init_model(cfg, np.random.default_rng([seed, 0]))
        state = TrainState.fresh(params, np.random.default_rng([task.seed, seed, 2]))
    limit = 10.0 * math.log(cfg.vocab)
    bad = 0
    trace = []

    def record():
        row = {"step": state.step, **evaluate(cfg, state.params, task, eval_batches)}
        trace.append(row)
        if log is not None:
            log(row)

    if state.step == 0:
        record()
    end = state.step + steps
    while state.step < end:
        tokens, mask = gen_copy_batch(task, batch, state.rng)
        loss, grads, _ = loss_and_grads(cfg, state.params, tokens, mask)
        if not math.isfinite(loss) or loss > limit:
            bad += 1
            if bad >= divergence_window or not math.isfinite(loss):
                raise TrainingDiverged(f"loss {loss:.4g} above {limit:.3g} for {bad} steps at step {state.step}")
        else:
            bad = 0
        adam_step(state, grads, opt)
        if state.step % eval_every == 0 or state.step == end:
            record()
    meta = {"model": cfg.to_dict(), "task": asdict(task), "optimizer": asdict(opt), "batch": batch,
            "seed": seed, "lr_schedule": "constant", "logit_scale": cfg.scale_logits}
    return TrainResult(trace, trace[-1], state, meta)


def model_gradcheck(cfg: ModelCfg, params: ModelParams, tokens, probe, h: float = 1e-5,
                    stencil: int = 2) -> tuple[float, str]:
    """Max relative error of :func:`model_backward` against central
    differences, for the linear probe ``sum(probe * logits)``.

    ``stencil=2`` is the usual ``(f(x+h) - f(x-h)) / 2h`` with O(h^2)
    truncation; ``stencil=4`` is the five-point rule with O(h^4). Logits are
    differenced elementwise before contracting with ``probe``. Returns
    ``(max_rel_error, worst_parameter_name)``.
    """
    from .autograd import rel_error

    # (step, weight) for f(x + step h) - f(x - step h); pairs are differenced
    # first so that parameters the logits ignore give exactly zero
    if stencil == 2:
        taps = ((1.0, 0.5),)
    elif stencil == 4:
        taps = ((1.0, 8 / 12), (2.0, -1 / 12))
    else:
        raise ValueError("stencil must be 2 or 4")
    trace = model_forward(cfg, params, tokens)
    analytic = model_backward(cfg, params, tokens, trace, probe)
    worst, worst_name = 0.0, ""
    for name, arr in params.named_arrays().items():
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            diff = 0.0
            for step, weight in taps:
                arr[idx] = old + step * h
                lp = model_forward(cfg, params, tokens).logits
                arr[idx] = old - step * h
                diff = diff + weight * (lp - model_forward(cfg, params, tokens).logits)
            arr[idx] = old
            num[idx] = np.sum(probe * (diff / h))
        err = float(rel_error(analytic[name], num).max())
        if err > worst:
            worst, worst_name = err, name
    return worst, worst_name
