"""Detection evaluation: per-class average precision and mAP.

AP is the all-point interpolated area under the precision-recall
staircase. Predictions are ranked by descending score (ties by ascending
box area, then input order) and greedily matched to the unmatched ground
truth of highest IoU at or above the threshold.
"""

from dataclasses import dataclass

import numpy as np

from .detection import iou_xyxy


@dataclass
class PredictionRecord:
    image_id: int
    class_id: int
    score: float
    box: list                   # [x1,y1,x2,y2] image coords


def _box_area(box):
    return max(0.0, box[2] - box[0]) * max(0.0, box[3] - box[1])


def average_precision(predictions, gts, class_id, iou_threshold):
    """AP for one class at one IoU threshold.

    gts: dict image_id -> list of (class_id, box). Returns None when the
    class has neither ground truths nor predictions.
    """
    gt_boxes = {}
    n_gt = 0
    for image_id, anns in gts.items():
        boxes = [box for cid, box in anns if cid == class_id]
        if boxes:
            gt_boxes[image_id] = {"boxes": boxes, "used": [False] * len(boxes)}
            n_gt += len(boxes)
    preds = [p for p in predictions if p.class_id == class_id]
    if n_gt == 0 and not preds:
        return None
    if n_gt == 0:
        return 0.0
    order = sorted(range(len(preds)),
                   key=lambda i: (-preds[i].score, _box_area(preds[i].box), i))
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, i in enumerate(order):
        p = preds[i]
        if p.image_id not in gts:
            raise KeyError(f"prediction references unknown image {p.image_id}")
        entry = gt_boxes.get(p.image_id)
        best_iou, best_j = 0.0, -1
        if entry is not None:
            for j, gb in enumerate(entry["boxes"]):
                if entry["used"][j]:
                    continue
                iou = iou_xyxy(p.box, gb)
                if iou > best_iou:
                    best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_threshold:
            entry["used"][best_j] = True
            tp[rank] = 1
        else:
            fp[rank] = 1
    ctp, cfp = np.cumsum(tp), np.cumsum(fp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    # all-point interpolation: right-max precision envelope over the staircase
    r = np.concatenate([[0.0], recall, [recall[-1] if len(recall) else 0.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    ap = 0.0
    for i in range(1, len(r)):
        ap += (r[i] - r[i - 1]) * p[i]
    return float(ap)


def evaluate_map(predictions, gts, iou_thresholds=(0.5,), class_ids=None):
    """mAP report: per-class AP per threshold, means over classes then
    thresholds. Classes with no ground truths and no predictions are
    skipped from the mean."""
    if class_ids is None:
        class_ids = sorted({cid for anns in gts.values() for cid, _ in anns}
                           | {p.class_id for p in predictions})
    report = {"per_class": {}, "per_threshold": {}, "map": 0.0}
    thr_means = []
    for thr in iou_thresholds:
        aps = {}
        for cid in class_ids:
            ap = average_precision(predictions, gts, cid, thr)
            if ap is not None:
                aps[cid] = ap
        mean = float(np.mean(list(aps.values()))) if aps else 0.0
        report["per_class"][thr] = aps
        report["per_threshold"][thr] = mean
        thr_means.append(mean)
    report["map"] = float(np.mean(thr_means)) if thr_means else 0.0
    return report
