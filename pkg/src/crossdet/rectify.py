"""Training-only bidirectional text-generation head and its rectify loss.

A composite feature p (pooled average of refined support and query
features) supplies keys/values for a cross-attention decoder that is
teacher-forced to predict each category's token sequence left-to-right and
right-to-left. The module is never evaluated on the inference path.
"""

import numpy as np

from . import autograd as ag
from .attention import AttentionParams, causal_mask, multi_head_attention, sinusoidal_init
from .autograd import Tensor

COMPOSITE_ROWS = 16


class RectifyDecoder:
    """One causal decoder layer per direction, with separate parameters.

    The backward direction reuses the forward-mask machinery on the
    reversed token sequence.
    """

    def __init__(self, vocab_size, d, n_heads, rng):
        self.vocab_size = vocab_size
        self.d = d
        bound = 1.0 / np.sqrt(d)
        self.token_embed = Tensor(rng.uniform(-bound, bound, size=(vocab_size, d)),
                                  requires_grad=True)
        self.fwd_self = AttentionParams(d, n_heads, rng)
        self.fwd_cross = AttentionParams(d, n_heads, rng)
        self.bwd_self = AttentionParams(d, n_heads, rng)
        self.bwd_cross = AttentionParams(d, n_heads, rng)
        self.out_fwd = Tensor(rng.uniform(-bound, bound, size=(d, vocab_size)),
                              requires_grad=True)
        self.out_bwd = Tensor(rng.uniform(-bound, bound, size=(d, vocab_size)),
                              requires_grad=True)

    def parameters(self):
        params = [self.token_embed, self.out_fwd, self.out_bwd]
        for block in (self.fwd_self, self.fwd_cross, self.bwd_self, self.bwd_cross):
            params.extend(block.parameters())
        return params


def pool_rows(x, target=COMPOSITE_ROWS):
    """Chunked mean pooling of matrix rows down (or up) to `target` rows."""
    n = x.shape[0]
    pool = np.zeros((target, n))
    for i in range(target):
        lo = i * n // target
        hi = max(lo + 1, (i + 1) * n // target)
        pool[i, lo:hi] = 1.0 / (hi - lo)
    return ag.matmul(Tensor(pool), x)


def fuse_support_query(support_refined, query_refined, rows=COMPOSITE_ROWS):
    """Composite feature p: mean of row-pooled support and query features."""
    if support_refined.shape[1] != query_refined.shape[1]:
        raise ValueError(f"width mismatch: {support_refined.shape} vs "
                         f"{query_refined.shape}")
    return ag.scale(ag.add(pool_rows(support_refined, rows),
                           pool_rows(query_refined, rows)), 0.5)


def _direction_logits(p, input_ids, decoder, self_params, cross_params, out_proj):
    n = len(input_ids)
    x = ag.gather_rows(decoder.token_embed, input_ids)
    x = ag.add(x, sinusoidal_init(n, decoder.d))
    x = multi_head_attention(x, x, x, self_params, mask=causal_mask(n))
    x = multi_head_attention(x, p, p, cross_params)
    return ag.matmul(x, out_proj)


def generate_bidirectional(p, target, decoder):
    """Teacher-forced logits for both directions.

    Forward row j predicts token w_{j+2} given w_1..w_{j+1} (0-based rows);
    backward row j predicts w_{j+1} given the suffix w_{j+2}..w_M. Both
    return (M-1) x V.
    """
    toks = target.tokens
    if max(toks) >= decoder.vocab_size:
        raise IndexError(f"token id {max(toks)} >= vocab size {decoder.vocab_size}")
    logits_fwd = _direction_logits(p, toks[:-1], decoder,
                                   decoder.fwd_self, decoder.fwd_cross, decoder.out_fwd)
    rev = toks[::-1]
    rev_logits = _direction_logits(p, rev[:-1], decoder,
                                   decoder.bwd_self, decoder.bwd_cross, decoder.out_bwd)
    # reversed machinery emits predictions for w_{M-1}..w_1; flip rows so
    # row j lines up with target w_{j+1}
    m = len(toks)
    logits_bwd = ag.gather_rows(rev_logits, list(range(m - 2, -1, -1)))
    return logits_fwd, logits_bwd


def rectify_loss(logits_fwd, logits_bwd, target):
    """Single-category loss: half the sum of both directions' mean
    token-level cross-entropies (teacher forcing)."""
    toks = target.tokens
    m = len(toks)
    if logits_fwd.shape[0] != m - 1 or logits_bwd.shape[0] != m - 1:
        raise ValueError(f"logits rows {logits_fwd.shape[0]}/{logits_bwd.shape[0]} "
                         f"do not match sequence length {m}")
    ce_fwd = ag.cross_entropy_logits(logits_fwd, toks[1:])
    ce_bwd = ag.cross_entropy_logits(logits_bwd, toks[:-1])
    return ag.scale(ag.add(ce_fwd, ce_bwd), 0.5)


def rectify_loss_total(p, texts, decoder):
    """Sum of per-category rectify losses for one episode."""
    total = None
    for seq in texts:
        lf, lb = generate_bidirectional(p, seq, decoder)
        term = rectify_loss(lf, lb, seq)
        total = term if total is None else ag.add(total, term)
    return total
