"""Simplified set-prediction detection head.

Post-aggregation encoder layers, a decoder over learned object queries,
minimum-cost bipartite matching, the detection loss, and thresholded
inference. Boxes are predicted as [cx, cy, w, h] normalized to (0, 1).
"""

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autograd as ag
from .attention import multi_head_attention, shared_refine
from .autograd import Tensor


@dataclass
class Prediction:
    class_logits: object        # Tensor N_q x (C+1), background last
    boxes: object               # Tensor N_q x 4, [cx,cy,w,h] in (0,1)


@dataclass
class Assignment:
    pairs: list                 # (gt_index, query_index), injective
    total_cost: float


@dataclass
class DetectionResult:
    image_id: int
    boxes: list = field(default_factory=list)      # [x1,y1,x2,y2] image coords
    class_ids: list = field(default_factory=list)
    scores: list = field(default_factory=list)

    def to_json_records(self, class_table):
        return [{"image_id": self.image_id, "class": class_table[cid],
                 "score": s, "box": [float(v) for v in b]}
                for cid, s, b in zip(self.class_ids, self.scores, self.boxes)]


def encode(aggregated, layer_params):
    """Apply the remaining encoder self-attention layers (0 layers = identity)."""
    x = aggregated
    for params in layer_params:
        x = shared_refine(x, params)
    return x


def decode(memory, queries, decoder_layers, class_head, box_head):
    """Decoder layers (query self-attention, cross-attention to memory),
    then the class and box heads."""
    x = queries
    for self_params, cross_params in decoder_layers:
        x = multi_head_attention(x, x, x, self_params)
        x = multi_head_attention(x, memory, memory, cross_params)
    w_cls, b_cls = class_head
    logits = ag.add(ag.matmul(x, w_cls), b_cls)
    w1, b1, w2, b2 = box_head
    hidden = ag.relu(ag.add(ag.matmul(x, w1), b1))
    boxes = ag.sigmoid(ag.add(ag.matmul(hidden, w2), b2))
    return Prediction(class_logits=logits, boxes=boxes)


# ---------------------------------------------------------------------------
# matching


def hungarian_match(cost):
    """Minimum-total-cost injective assignment of ground truths to queries.

    Ties between optimal solutions break to the lexicographically smallest
    (gt_index, query_index) sequence, fixed greedily and re-verified with a
    fresh solve each time.
    """
    cost = np.asarray(cost, dtype=np.float64)
    g, n_q = cost.shape
    if g > n_q:
        raise ValueError(f"more ground truths ({g}) than queries ({n_q})")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    if g == 0:
        return Assignment(pairs=[], total_cost=0.0)

    def optimum(c):
        rows, cols = linear_sum_assignment(c)
        return float(c[rows, cols].sum())

    best = optimum(cost)
    big = abs(cost).sum() + 1.0
    work = cost.copy()
    pairs = []
    fixed_cost = 0.0
    taken = set()
    for gi in range(g):
        for qi in range(n_q):
            if qi in taken:
                continue
            trial = work.copy()
            trial[gi, :] = big
            trial[gi, qi] = cost[gi, qi]
            trial[:, qi] = big
            trial[gi, qi] = cost[gi, qi]
            if abs(optimum(trial) - best) < 1e-9 * max(1.0, abs(best)):
                pairs.append((gi, qi))
                taken.add(qi)
                work = trial
                fixed_cost += cost[gi, qi]
                break
        else:
            raise RuntimeError("no consistent assignment found")  # unreachable
    return Assignment(pairs=pairs, total_cost=best)


def brute_force_match(cost):
    """Exhaustive minimum over all injections; the oracle for small G."""
    cost = np.asarray(cost, dtype=np.float64)
    g, n_q = cost.shape
    best_cost, best_pairs = None, None
    for perm in itertools.permutations(range(n_q), g):
        c = sum(cost[i, perm[i]] for i in range(g))
        key = (c, perm)
        if best_cost is None or key < (best_cost, best_pairs):
            best_cost, best_pairs = c, perm
    return Assignment(pairs=[(i, q) for i, q in enumerate(best_pairs or ())],
                      total_cost=float(best_cost or 0.0))


# ---------------------------------------------------------------------------
# box geometry


def cxcywh_to_xyxy(boxes):
    """Differentiable corner conversion on an n x 4 Tensor."""
    cx = ag.slice_cols(boxes, 0, 1)
    cy = ag.slice_cols(boxes, 1, 2)
    w = ag.slice_cols(boxes, 2, 3)
    h = ag.slice_cols(boxes, 3, 4)
    half_w, half_h = ag.scale(w, 0.5), ag.scale(h, 0.5)
    return (ag.sub(cx, half_w), ag.sub(cy, half_h),
            ag.add(cx, half_w), ag.add(cy, half_h))


def giou(pred_boxes, gt_boxes, eps=1e-9):
    """Generalized IoU between paired [cx,cy,w,h] boxes; returns n x 1."""
    px1, py1, px2, py2 = cxcywh_to_xyxy(pred_boxes)
    gx1, gy1, gx2, gy2 = cxcywh_to_xyxy(gt_boxes)
    zeros = Tensor(np.zeros(px1.shape))
    iw = ag.maximum(ag.sub(ag.minimum(px2, gx2), ag.maximum(px1, gx1)), zeros)
    ih = ag.maximum(ag.sub(ag.minimum(py2, gy2), ag.maximum(py1, gy1)), zeros)
    inter = ag.hadamard(iw, ih)
    area_p = ag.hadamard(ag.sub(px2, px1), ag.sub(py2, py1))
    area_g = ag.hadamard(ag.sub(gx2, gx1), ag.sub(gy2, gy1))
    union = ag.sub(ag.add(area_p, area_g), inter)
    iou = ag.divide(inter, ag.add_const(union, eps))
    ew = ag.sub(ag.maximum(px2, gx2), ag.minimum(px1, gx1))
    eh = ag.sub(ag.maximum(py2, gy2), ag.minimum(py1, gy1))
    enclose = ag.hadamard(ew, eh)
    penalty = ag.divide(ag.sub(enclose, union), ag.add_const(enclose, eps))
    return ag.sub(iou, penalty)


def iou_xyxy(a, b):
    """Plain IoU between two [x1,y1,x2,y2] boxes (numpy, evaluation side)."""
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix2 - ix1), max(0.0, iy2 - iy1)
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# loss and matching cost


def matching_cost(pred, gt_classes, gt_boxes, beta=5.0, gamma=2.0):
    """G x N_q cost mirroring the loss terms: -p(class) + beta L1 + gamma (1-gIoU)."""
    logits = pred.class_logits.data
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    boxes = pred.boxes.data
    g = len(gt_classes)
    n_q = boxes.shape[0]
    cost = np.zeros((g, n_q))
    for i in range(g):
        gb = np.asarray(gt_boxes[i])
        for q in range(n_q):
            l1 = np.abs(boxes[q] - gb).sum()
            gi = _giou_np(boxes[q], gb)
            cost[i, q] = -probs[q, gt_classes[i]] + beta * l1 + gamma * (1.0 - gi)
    return cost


def _giou_np(p, g):
    px = [p[0] - p[2] / 2, p[1] - p[3] / 2, p[0] + p[2] / 2, p[1] + p[3] / 2]
    gx = [g[0] - g[2] / 2, g[1] - g[3] / 2, g[0] + g[2] / 2, g[1] + g[3] / 2]
    i = iou_xyxy(px, gx)
    ex1, ey1 = min(px[0], gx[0]), min(px[1], gx[1])
    ex2, ey2 = max(px[2], gx[2]), max(px[3], gx[3])
    enclose = (ex2 - ex1) * (ey2 - ey1)
    area_p = (px[2] - px[0]) * (px[3] - px[1])
    area_g = (gx[2] - gx[0]) * (gx[3] - gx[1])
    inter = i * (area_p + area_g) / (1 + i) if i > 0 else 0.0
    union = area_p + area_g - inter
    return i - (enclose - union) / enclose if enclose > 0 else i


def detection_loss(pred, gt_classes, gt_boxes, assignment, n_classes,
                   beta=5.0, gamma=2.0, bg_weight=0.1):
    """Class cross-entropy over all queries plus box terms over matched pairs.

    Unmatched queries are pushed toward the background class (index
    n_classes) with a down-weighted term (set-prediction heads collapse to
    all-background otherwise). Box terms are averaged over the matched
    ground truths.
    """
    n_q = pred.class_logits.shape[0]
    for gi, qi in assignment.pairs:
        if not (0 <= gi < len(gt_classes) and 0 <= qi < n_q):
            raise ValueError(f"invalid assignment pair ({gi},{qi})")
    if len({q for _, q in assignment.pairs}) != len(assignment.pairs):
        raise ValueError("assignment is not injective")
    targets = np.full(n_q, n_classes, dtype=np.intp)
    weights = np.full(n_q, bg_weight)
    for gi, qi in assignment.pairs:
        targets[qi] = gt_classes[gi]
        weights[qi] = 1.0
    loss = ag.cross_entropy_logits(pred.class_logits, targets, weights)
    if assignment.pairs:
        q_idx = [qi for _, qi in assignment.pairs]
        g_idx = [gi for gi, _ in assignment.pairs]
        matched = ag.gather_rows(pred.boxes, q_idx)
        gt = Tensor(np.asarray([gt_boxes[g] for g in g_idx], dtype=np.float64))
        g_count = len(assignment.pairs)
        l1 = ag.scale(ag.sum_all(ag.absolute(ag.sub(matched, gt))), 1.0 / g_count)
        giou_term = ag.scale(ag.sum_all(ag.sub(Tensor(np.ones((g_count, 1))),
                                               giou(matched, gt))), 1.0 / g_count)
        loss = ag.add(loss, ag.add(ag.scale(l1, beta), ag.scale(giou_term, gamma)))
    return loss


def select_detections(pred, class_ids, image, conf_threshold):
    """Softmax class scores, drop background and sub-threshold predictions,
    convert boxes to image-coordinate corners."""
    logits = pred.class_logits.data
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    result = DetectionResult(image_id=image.image_id)
    for q in range(logits.shape[0]):
        fg = probs[q, :-1]
        best = int(np.argmax(fg))
        score = float(fg[best])
        if score < conf_threshold:
            continue
        cx, cy, w, h = pred.boxes.data[q]
        box = [(cx - w / 2) * image.width, (cy - h / 2) * image.height,
               (cx + w / 2) * image.width, (cy + h / 2) * image.height]
        result.boxes.append(box)
        result.class_ids.append(class_ids[best])
        result.scores.append(score)
    return result
