"""Report emission: CSV summary tables and matplotlib figures rendered to
files alongside the delimited output."""

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def write_detections_jsonl(path, predictions, class_table):
    with open(path, "w", encoding="utf-8") as f:
        for p in predictions:
            f.write(json.dumps({"image_id": p.image_id,
                                "class": class_table.get(p.class_id, str(p.class_id)),
                                "score": p.score,
                                "box": [float(v) for v in p.box]}) + "\n")


def write_map_report(out_dir, report, class_table, prefix="eval"):
    """Per-class AP table as CSV plus a bar-chart figure."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{prefix}_map.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["iou_threshold", "class", "ap"])
        for thr, aps in report["per_class"].items():
            for cid, ap in sorted(aps.items()):
                writer.writerow([thr, class_table.get(cid, str(cid)), f"{ap:.6f}"])
            writer.writerow([thr, "__mean__", f"{report['per_threshold'][thr]:.6f}"])
        writer.writerow(["all", "__map__", f"{report['map']:.6f}"])

    fig_path = os.path.join(out_dir, f"{prefix}_map.png")
    fig, ax = plt.subplots(figsize=(6, 4))
    for thr, aps in report["per_class"].items():
        names = [class_table.get(cid, str(cid)) for cid in sorted(aps)]
        vals = [aps[cid] for cid in sorted(aps)]
        ax.bar([f"{n}@{thr}" for n in names], vals)
    ax.set_ylabel("AP")
    ax.set_ylim(0, 1.05)
    ax.set_title(f"per-class AP (mAP={report['map']:.3f})")
    ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return csv_path, fig_path


def write_loss_curves(out_dir, metrics_path, prefix="train"):
    """Loss-curve figure from a JSON-lines metrics stream."""
    steps, det, rect, total = [], [], [], []
    with open(metrics_path, "r", encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            if "loss_total" not in rec:
                continue
            steps.append(rec["step"])
            total.append(rec["loss_total"])
            det.append(rec["loss_det"])
            rect.append(rec.get("loss_rect"))
    os.makedirs(out_dir, exist_ok=True)
    fig_path = os.path.join(out_dir, f"{prefix}_loss.png")
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, total, label="total")
    ax.plot(steps, det, label="detection")
    if any(r is not None for r in rect):
        ax.plot([s for s, r in zip(steps, rect) if r is not None],
                [r for r in rect if r is not None], label="rectify")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return fig_path


def write_ablation_table(out_dir, kind, rows):
    """Ablation rows as CSV plus a grouped bar figure."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"ablation_{kind}.csv")
    n_seeds = max(len(r["maps"]) for r in rows)
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["variant"] + [f"seed_{i}" for i in range(n_seeds)]
                        + ["mean_map"])
        for r in rows:
            writer.writerow([r["variant"]] + [f"{m:.6f}" for m in r["maps"]]
                            + [f"{r['mean_map']:.6f}"])
    fig_path = os.path.join(out_dir, f"ablation_{kind}.png")
    fig, ax = plt.subplots(figsize=(6, 4))
    names = [r["variant"] for r in rows]
    means = [r["mean_map"] for r in rows]
    ax.bar(names, means)
    for r, x in zip(rows, range(len(rows))):
        ax.scatter([x] * len(r["maps"]), r["maps"], color="black", s=12, zorder=3)
    ax.set_ylabel("novel mAP@0.5")
    ax.set_title(f"ablation: {kind}")
    ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return csv_path, fig_path
