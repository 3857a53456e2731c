"""Multi-modal support prototype construction and query aggregation.

The core fusion path: per-class vision prototypes (RoI mean pooling over
support crops) and language prototypes (shared-refined token embeddings)
are averaged into the support matrix S, then query features are refined by

    A  = softmax(Q S^T / sqrt(d))
    Q1 = (A sigma(S)) .* Q
    Q2 = A T
    out = Q1 + Q2

with T the trainable class-agnostic task prototypes.
"""

import hashlib
import math

import numpy as np

from . import autograd as ag
from .attention import shared_refine
from .autograd import Tensor
from .data import read_feature_file

MODALITY_BOTH = "both"
MODALITY_VISION = "vision"
MODALITY_LANGUAGE = "language"


class EmbeddingProvider:
    """Pluggable token-id -> d_in embedding source.

    file/table mode serves rows of a fixed table; synthetic mode derives a
    deterministic vector from (seed, token id).
    """

    def __init__(self, d_in, table=None, seed=0):
        self.d_in = d_in
        self.mode = "synthetic" if table is None else "table"
        self.seed = seed
        if table is not None:
            table = np.asarray(table, dtype=np.float64)
            if table.ndim != 2 or table.shape[1] != d_in:
                raise ValueError(f"embedding table shape {table.shape} "
                                 f"incompatible with d_in={d_in}")
        self.table = table

    @classmethod
    def from_file(cls, path):
        grid = read_feature_file(path)          # H=vocab, W=1, d_in
        table = grid[:, 0, :]
        return cls(d_in=table.shape[1], table=table)

    def token_vector(self, token_id):
        if self.table is not None:
            return self.table[token_id]
        digest = hashlib.sha256(f"{self.seed}:{token_id}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.normal(0.0, 1.0, size=self.d_in)

    def token_matrix(self, token_ids):
        return np.stack([self.token_vector(t) for t in token_ids])


def roi_cell_indices(grid, box):
    """Grid rows and columns whose cell centers fall inside the box.

    Image coordinates map linearly onto the grid; if the box is smaller
    than one cell, the rule rounds outward to the cell containing the box
    center, so at least one cell always contributes.
    """
    h, w, _ = grid.grid.shape
    x1, y1, x2, y2 = box
    if x2 <= 0 or y2 <= 0 or x1 >= grid.width or y1 >= grid.height:
        raise ValueError(f"box {box} lies fully outside image {grid.image_id}")
    sx, sy = grid.width / w, grid.height / h
    rows, cols = [], []
    for r in range(h):
        if y1 <= (r + 0.5) * sy <= y2:
            rows.append(r)
    for c in range(w):
        if x1 <= (c + 0.5) * sx <= x2:
            cols.append(c)
    if not rows:
        rows = [min(h - 1, max(0, int((y1 + y2) / 2 / sy)))]
    if not cols:
        cols = [min(w - 1, max(0, int((x1 + x2) / 2 / sx)))]
    return rows, cols


def roi_prototype(grid, box):
    """Mean feature over the grid cells whose centers fall inside the box."""
    rows, cols = roi_cell_indices(grid, box)
    cells = grid.grid[np.ix_(rows, cols)].reshape(-1, grid.grid.shape[2])
    return cells.mean(axis=0)


def vision_prototypes(episode, project, bg_vision, attn_params):
    """Per-class support vision prototypes, refined in the shared space.

    The k support crops of each class are RoI-pooled and mean-collapsed to
    one d_in vector, projected to width d, stacked with the trainable
    background row, and refined by self-attention.
    """
    rows = []
    for cid in episode.class_ids:
        crops = [roi_prototype(s.grid, s.box) for s in episode.support[cid]]
        rows.append(np.mean(crops, axis=0))
    raw = project(Tensor(np.stack(rows)))
    stacked = ag.concat_rows([raw, bg_vision])
    return shared_refine(stacked, attn_params)


def language_prototypes(episode, provider, project, bg_lang, attn_params):
    """Per-class semantic prototypes from shared-refined token embeddings.

    Each class's token sequence is embedded, projected, refined by the
    (possibly shared) attention block, and mean-pooled into one row; the
    trainable background language row is appended unrefined.
    """
    rows = []
    for cid in episode.class_ids:
        seq = episode.texts[cid]
        emb = project(Tensor(provider.token_matrix(seq.tokens)))
        refined = shared_refine(emb, attn_params)
        avg = Tensor(np.full((1, seq.length), 1.0 / seq.length))
        rows.append(ag.matmul(avg, refined))
    return ag.concat_rows(rows + [bg_lang])


def build_support_matrix(vision, language, modality=MODALITY_BOTH):
    """Fuse vision and language prototypes into S ((C+1) x d).

    Fusion is the per-row elementwise mean (both modalities already share
    width d after the shared refinement); the ablation flags pass a single
    modality through unchanged.
    """
    if modality == MODALITY_VISION:
        return vision
    if modality == MODALITY_LANGUAGE:
        return language
    if modality != MODALITY_BOTH:
        raise ValueError(f"unknown modality '{modality}'")
    if vision.shape != language.shape:
        raise ValueError(f"prototype shapes differ: {vision.shape} vs {language.shape}")
    return ag.scale(ag.add(vision, language), 0.5)


def matching_logits(q, s):
    """Pre-softmax matching scores Q S^T / sqrt(d); also the targets of the
    cell-to-prototype alignment loss."""
    if q.shape[1] != s.shape[1]:
        raise ValueError(f"width mismatch: Q{q.shape} vs S{s.shape}")
    d = q.shape[1]
    return ag.scale(ag.matmul(q, ag.transpose(s)), 1.0 / math.sqrt(d))


def matching_coefficient(q, s):
    """Feature mapping coefficient A = softmax(Q S^T / sqrt(d))."""
    return ag.softmax_rows(matching_logits(q, s))


def aggregate(q, s, t):
    """Refined query features Q1 + Q2 with a single shared coefficient A."""
    values = t.values if hasattr(t, "values") else t
    if values.shape != s.shape:
        raise ValueError(f"task prototypes {values.shape} vs support {s.shape}")
    a = matching_coefficient(q, s)
    q1 = ag.hadamard(ag.matmul(a, ag.sigmoid(s)), q)
    q2 = ag.matmul(a, values)
    return ag.add(q1, q2)
