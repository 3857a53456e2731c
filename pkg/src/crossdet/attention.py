"""Multi-head self-attention blocks and the sinusoidal prototype initializer.

One AttentionParams object is a single residual attention block (projections,
output projection, post-norm layer norm). The first encoder block is shared
across the support-vision, query, and language branches.
"""

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class AttentionParams:
    """Parameters of one residual multi-head attention block."""

    def __init__(self, d_model, n_heads, rng=None, trainable=True):
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / math.sqrt(d_model)

        def init(shape):
            return Tensor(rng.uniform(-bound, bound, size=shape),
                          requires_grad=trainable)

        self.w_q = init((d_model, d_model))
        self.w_k = init((d_model, d_model))
        self.w_v = init((d_model, d_model))
        self.w_o = init((d_model, d_model))
        self.ln_gain = Tensor(np.ones(d_model), requires_grad=trainable)
        self.ln_bias = Tensor(np.zeros(d_model), requires_grad=trainable)

    def parameters(self):
        return [self.w_q, self.w_k, self.w_v, self.w_o, self.ln_gain, self.ln_bias]


def multi_head_attention(q, k, v, params, mask=None):
    """Scaled dot-product attention per head, concat, output projection,
    residual add on q, post layer norm.

    mask, when given, is an additive (a x b) numpy array applied to every
    head's attention logits (used for causal decoding).
    """
    d = params.d_model
    if q.shape[1] != d or k.shape[1] != d or v.shape[1] != d:
        raise ValueError(
            f"width mismatch: q{q.shape} k{k.shape} v{v.shape} vs d_model {d}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"key/value row counts differ: {k.shape} vs {v.shape}")
    qp = ag.matmul(q, params.w_q)
    kp = ag.matmul(k, params.w_k)
    vp = ag.matmul(v, params.w_v)
    dh = d // params.n_heads
    inv_sqrt = 1.0 / math.sqrt(dh)
    heads = []
    for h in range(params.n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = ag.slice_cols(qp, lo, hi)
        kh = ag.slice_cols(kp, lo, hi)
        vh = ag.slice_cols(vp, lo, hi)
        logits = ag.scale(ag.matmul(qh, ag.transpose(kh)), inv_sqrt)
        if mask is not None:
            logits = ag.add(logits, Tensor(mask))
        attn = ag.softmax_rows(logits)
        heads.append(ag.matmul(attn, vh))
    concat = ag.concat_cols(heads) if len(heads) > 1 else heads[0]
    out = ag.matmul(concat, params.w_o)
    return ag.layer_norm_rows(ag.add(q, out), params.ln_gain, params.ln_bias)


def shared_refine(features, params):
    """Self-attention refinement (q = k = v = features).

    All branches must pass the same params object so their features land in
    one feature space; the decoupled ablation passes separate objects.
    """
    return multi_head_attention(features, features, features, params)


def sinusoidal_init(n_rows, d):
    """Position-embedding style initializer for the task prototypes."""
    if d % 2 != 0:
        raise ValueError(f"sinusoidal_init requires even width, got {d}")
    pos = np.arange(n_rows, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    out = np.empty((n_rows, d), dtype=np.float64)
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return Tensor(out)


def causal_mask(n, big=1e9):
    """Additive mask forbidding attention to later positions."""
    return np.triu(np.full((n, n), -big), k=1)


class TaskPrototypes:
    """Trainable class-agnostic prototype rows ((n_way + 1) x d, background
    last).

    Initialized from a seeded gaussian, NOT from the sinusoidal basis: the
    position encoding added after aggregation uses sinusoidal rows, and a
    slot code that equals the position code of cell index c would be
    unrecoverable downstream."""

    def __init__(self, n_classes, d, seed=0):
        rng = np.random.default_rng([seed, 0x7a5c])
        self.values = Tensor(rng.normal(0.0, 1.0, size=(n_classes + 1, d)))
        self.values.requires_grad = True

    @property
    def n_rows(self):
        return self.values.shape[0]

    def parameters(self):
        return [self.values]
