"""Full detection model: projection, shared refinement, multi-modal
aggregation, encoder/decoder stacks, heads, and the optional train-only
rectify decoder."""

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .aggregation import (MODALITY_BOTH, aggregate, build_support_matrix,
                          language_prototypes, matching_logits,
                          roi_cell_indices, vision_prototypes)
from .attention import AttentionParams, TaskPrototypes, sinusoidal_init
from .autograd import Tensor
from .detection import (decode, detection_loss, encode, hungarian_match,
                        matching_cost, select_detections)
from .rectify import (RectifyDecoder, fuse_support_query,
                      generate_bidirectional, pool_rows, rectify_loss)


@dataclass
class ModelConfig:
    d: int = 64
    n_heads: int = 4
    d_in: int = 16
    n_way: int = 3
    n_queries: int = 8          # learned object queries
    encoder_layers: int = 2     # layers after the aggregation module
    decoder_layers: int = 2
    modality: str = MODALITY_BOTH
    shared_attention: bool = True
    use_rectify: bool = True

    def validate(self):
        if self.d % self.n_heads:
            raise ValueError("d must be divisible by n_heads")
        if self.d % 2:
            raise ValueError("d must be even (sinusoidal task prototype init)")
        for name in ("d", "n_heads", "d_in", "n_way", "n_queries"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


_ATTN_FIELDS = ("w_q", "w_k", "w_v", "w_o", "ln_gain", "ln_bias")


class DetectionModel:

    def __init__(self, cfg, vocab_size, seed=0):
        cfg.validate()
        self.cfg = cfg
        self.vocab_size = vocab_size
        rng = np.random.default_rng(seed)
        d, heads = cfg.d, cfg.n_heads
        bound = 1.0 / math.sqrt(d)

        def uniform(shape):
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        self.w_proj = (uniform((cfg.d_in, d)) if cfg.d_in != d else None)
        self.shared_attn = AttentionParams(d, heads, rng)
        self.bg_vision = Tensor(rng.normal(0.0, bound, size=(1, d)), requires_grad=True)
        self.bg_lang = Tensor(rng.normal(0.0, bound, size=(1, d)), requires_grad=True)
        self.task_prototypes = TaskPrototypes(cfg.n_way, d)
        self.encoder_stack = [AttentionParams(d, heads, rng)
                              for _ in range(cfg.encoder_layers)]
        self.decoder_stack = [(AttentionParams(d, heads, rng),
                               AttentionParams(d, heads, rng))
                              for _ in range(cfg.decoder_layers)]
        # refined rows leave layer norm with ~sqrt(d) norm, which caps the
        # matching logits Q S^T / sqrt(d) near 1 and keeps the coefficient
        # softmax close to uniform; a trainable per-dimension gain on the
        # query side lets matching start usefully sharp and learn sharper
        self.match_gain = Tensor(np.full((1, d), 4.0), requires_grad=True)
        self.object_queries = uniform((cfg.n_queries, d))
        self.class_head = (uniform((d, cfg.n_way + 1)),
                           Tensor(np.zeros(cfg.n_way + 1), requires_grad=True))
        self.box_head = (uniform((d, d)), Tensor(np.zeros(d), requires_grad=True),
                         uniform((d, 4)), Tensor(np.zeros(4), requires_grad=True))
        # decoupled ablation gets an independently initialized language block
        # from a spawned stream so the rest of the init is unaffected
        self.lang_attn = (None if cfg.shared_attention else
                          AttentionParams(d, heads, np.random.default_rng([seed, 1])))
        self.rectify = (RectifyDecoder(vocab_size, d, heads,
                                       np.random.default_rng([seed, 2]))
                        if cfg.use_rectify else None)

    # -- parameter registry ------------------------------------------------

    def parameters(self):
        """Stable name -> Tensor map over every trainable tensor."""
        params = {}

        def add_attn(prefix, block):
            for f in _ATTN_FIELDS:
                params[f"{prefix}.{f}"] = getattr(block, f)

        if self.w_proj is not None:
            params["proj.w"] = self.w_proj
        add_attn("shared", self.shared_attn)
        params["bg_vision"] = self.bg_vision
        params["bg_lang"] = self.bg_lang
        params["task_proto"] = self.task_prototypes.values
        for i, block in enumerate(self.encoder_stack):
            add_attn(f"enc.{i}", block)
        for i, (sa, ca) in enumerate(self.decoder_stack):
            add_attn(f"dec.{i}.self", sa)
            add_attn(f"dec.{i}.cross", ca)
        params["match_gain"] = self.match_gain
        params["queries"] = self.object_queries
        params["cls.w"], params["cls.b"] = self.class_head
        (params["box.w1"], params["box.b1"],
         params["box.w2"], params["box.b2"]) = self.box_head
        if self.lang_attn is not None:
            add_attn("lang", self.lang_attn)
        if self.rectify is not None:
            r = self.rectify
            params["rect.embed"] = r.token_embed
            params["rect.out_fwd"] = r.out_fwd
            params["rect.out_bwd"] = r.out_bwd
            add_attn("rect.fwd_self", r.fwd_self)
            add_attn("rect.fwd_cross", r.fwd_cross)
            add_attn("rect.bwd_self", r.bwd_self)
            add_attn("rect.bwd_cross", r.bwd_cross)
        return params

    def zero_grads(self):
        for t in self.parameters().values():
            t.grad = None

    # -- forward paths -----------------------------------------------------

    def project(self, x):
        return x if self.w_proj is None else ag.matmul(x, self.w_proj)

    def refine_query(self, grid):
        """Project the feature grid to width d. Query cells stay per-cell
        (no inter-cell attention before aggregation): matching against
        support prototypes must work on unseen images, and a cell-local
        linear map generalizes where an attention layer over the grid
        learns image-specific codes. The transformer refinement of the
        query side happens after aggregation (encoder/decoder stacks);
        position encoding also enters later, so prototype matching stays
        content-based."""
        flat = Tensor(grid.flat())
        return self.project(flat)

    def support_matrix(self, episode, provider):
        if len(episode.class_ids) != self.cfg.n_way:
            raise ValueError(f"episode has {len(episode.class_ids)} classes, "
                             f"model expects n_way={self.cfg.n_way}")
        modality = self.cfg.modality
        vision = lang = None
        if modality != "language":
            vision = vision_prototypes(episode, self.project, self.bg_vision,
                                       self.shared_attn)
        if modality != "vision":
            lang_params = self.lang_attn or self.shared_attn
            lang = language_prototypes(episode, provider, self.project,
                                       self.bg_lang, lang_params)
        return build_support_matrix(vision if vision is not None else lang,
                                    lang if lang is not None else vision,
                                    modality)

    def detect(self, refined_query, s, t=None):
        t = t if t is not None else self.task_prototypes
        agg = aggregate(ag.hadamard(refined_query, self.match_gain), s, t)
        agg = ag.add(agg, sinusoidal_init(agg.shape[0], self.cfg.d))
        memory = encode(agg, self.encoder_stack)
        return decode(memory, self.object_queries, self.decoder_stack,
                      self.class_head, self.box_head)


def normalized_gt(gts, image):
    """Episode-index class targets and [cx,cy,w,h]/extent boxes."""
    classes, boxes = [], []
    for cid, (x1, y1, x2, y2) in gts:
        classes.append(cid)
        boxes.append([(x1 + x2) / 2 / image.width, (y1 + y2) / 2 / image.height,
                      (x2 - x1) / image.width, (y2 - y1) / image.height])
    return classes, boxes


def cell_alignment_loss(model, grid, refined_query, s, class_ids, gts):
    """Cross-entropy pushing each query cell's matching scores toward its
    true support row (cells inside a ground-truth box toward that class's
    row, every other cell toward the background row).

    Without this supervision nothing forces the matching coefficient to be
    semantic: the detection loss alone lets the post-aggregation layers
    decode classes straight from the modulated query content, a shortcut
    that works on training classes and collapses on novel ones. Background
    cells dominate the grid, so they are re-weighted to carry the same
    total mass as the foreground cells; a small fixed weight leaves the
    background row effectively untrained and every cell claims a class."""
    h, w, _ = grid.grid.shape
    targets = np.full(h * w, len(class_ids), dtype=np.intp)
    for cid, box in gts:
        rows, cols = roi_cell_indices(grid, box)
        for r in rows:
            for c in cols:
                targets[r * w + c] = class_ids.index(cid)
    bg = targets == len(class_ids)
    n_fg = int((~bg).sum())
    weights = np.where(bg, max(n_fg, 1) / max(int(bg.sum()), 1), 1.0)
    logits = matching_logits(ag.hadamard(refined_query, model.match_gain), s)
    return ag.cross_entropy_logits(logits, targets, weights)


def episode_loss(model, episode, provider, lambda_rectify=1.0,
                 beta=5.0, gamma=2.0, bg_weight=0.1, align_weight=0.5):
    """Mean detection loss over the episode's query images, plus the
    weighted cell-alignment and rectify losses.

    Returns (total, detection, rectify) scalar Tensors; rectify is None
    when inactive. The alignment term is folded into total.
    """
    s = model.support_matrix(episode, provider)
    det_terms = []
    align_terms = []
    refined_queries = []
    for grid, gts in episode.query:
        rq = model.refine_query(grid)
        refined_queries.append(rq)
        if align_weight > 0:
            align_terms.append(cell_alignment_loss(
                model, grid, rq, s, episode.class_ids, gts))
        pred = model.detect(rq, s)
        raw_classes, gt_boxes = normalized_gt(gts, grid)
        gt_classes = [episode.class_ids.index(c) for c in raw_classes]
        cost = matching_cost(pred, gt_classes, gt_boxes, beta, gamma)
        assign = hungarian_match(cost)
        det_terms.append(detection_loss(pred, gt_classes, gt_boxes, assign,
                                        n_classes=model.cfg.n_way,
                                        beta=beta, gamma=gamma,
                                        bg_weight=bg_weight))
    det = det_terms[0]
    for term in det_terms[1:]:
        det = ag.add(det, term)
    det = ag.scale(det, 1.0 / len(det_terms))
    rect = None
    total = det
    if align_terms:
        align = align_terms[0]
        for term in align_terms[1:]:
            align = ag.add(align, term)
        align = ag.scale(align, align_weight / len(align_terms))
        total = ag.add(total, align)
    if model.rectify is not None and lambda_rectify > 0:
        rect = _per_class_rectify_loss(model, episode, s, refined_queries)
        total = ag.add(det, ag.scale(rect, lambda_rectify))
    return total, det, rect


RECTIFY_ROWS = 8


def _per_class_rectify_loss(model, episode, s, refined_queries):
    """Each class's composite feature fuses its support row with the query
    cells inside that class's ground-truth boxes, then must generate the
    class text in both directions. Tying each text to class-specific
    features keeps the generation pressure class-discriminative."""
    fg_rows = {cid: [] for cid in episode.class_ids}
    for (grid, gts), rq in zip(episode.query, refined_queries):
        w = grid.grid.shape[1]
        for cid, box in gts:
            rows, cols = roi_cell_indices(grid, box)
            idx = [r * w + c for r in rows for c in cols]
            fg_rows[cid].append(ag.gather_rows(rq, idx))
    rect = None
    for i, cid in enumerate(episode.class_ids):
        sup = ag.gather_rows(s, [i])
        if fg_rows[cid]:
            cells = (fg_rows[cid][0] if len(fg_rows[cid]) == 1
                     else ag.concat_rows(fg_rows[cid]))
            p = fuse_support_query(sup, cells, rows=RECTIFY_ROWS)
        else:
            p = pool_rows(sup, RECTIFY_ROWS)
        text = episode.texts[cid]
        term = rectify_loss(*generate_bidirectional(p, text, model.rectify),
                            text)
        rect = term if rect is None else ag.add(rect, term)
    return rect


def infer(grid, s, t, model, conf_threshold, class_ids):
    """End-to-end inference on one feature grid; the rectify module is
    never evaluated here."""
    refined = model.refine_query(grid)
    pred = model.detect(refined, s, t)
    return select_detections(pred, class_ids, grid, conf_threshold)
