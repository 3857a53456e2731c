"""Command-line interface.

Subcommands: gen-synth, meta-train, fine-tune, eval, ablate, infer.
Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

import argparse
import logging
import os
import sys

import numpy as np

from .autograd import NumericError
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config, save_config
from .data import (DataError, TextRegistry, benchmark_synth_config,
                   generate_synthetic_domains, build_vocab, kshot_subset,
                   save_coco_annotations, synthetic_language_table,
                   synthetic_registries, write_feature_file)
from .train import (TrainState, evaluate_model, fine_tune, load_bundle,
                    meta_train, run_ablation)
from . import report

logger = logging.getLogger("crossdet")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _add_common(parser):
    parser.add_argument("--config", help="run config YAML")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--k-shot", type=int, help="override episode k_shot")
    parser.add_argument("--lambda-rectify", type=float,
                        help="override rectify loss weight")
    parser.add_argument("--text-registry",
                        help="override both registry paths with one file")
    parser.add_argument("--out", help="override output directory")


def _load_cfg(args):
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.k_shot is not None:
        cfg.episode.k_shot = args.k_shot
    if args.lambda_rectify is not None:
        cfg.lambda_rectify = args.lambda_rectify
    if args.text_registry:
        cfg.paths.base_registry = args.text_registry
        cfg.paths.novel_registry = args.text_registry
    if args.out:
        cfg.paths.out_dir = args.out
    return cfg.validate()


def cmd_gen_synth(args):
    cfg = benchmark_synth_config(shift=args.shift)
    out = args.out or "synth"
    os.makedirs(out, exist_ok=True)
    base, novel = generate_synthetic_domains(cfg, args.seed or 0)
    save_coco_annotations(base, os.path.join(out, "base.json"),
                          os.path.join(out, "base_features"))
    save_coco_annotations(novel, os.path.join(out, "novel.json"),
                          os.path.join(out, "novel_features"))
    registries = {}
    for variant in ("name-only", "manual-rich", "extended-rich"):
        reg_b = synthetic_registries(base, cfg, variant)
        reg_n = synthetic_registries(novel, cfg, variant)
        merged = TextRegistry({**reg_b.entries, **reg_n.entries})
        path = os.path.join(out, f"registry_{variant}.tsv")
        merged.save(path)
        registries[variant] = (path, reg_b, reg_n, merged)
    vocab = build_vocab(registries["extended-rich"][3])
    vocab.save(os.path.join(out, "vocab.json"))
    table = synthetic_language_table(vocab, [base, novel], cfg, args.seed or 0)
    write_feature_file(os.path.join(out, "language_table.feat"),
                       table[:, None, :].astype(np.float32))
    run_cfg = RunConfig()
    run_cfg.paths.base_annotations = os.path.join(out, "base.json")
    run_cfg.paths.novel_annotations = os.path.join(out, "novel.json")
    run_cfg.paths.base_registry = registries["manual-rich"][0]
    run_cfg.paths.novel_registry = registries["manual-rich"][0]
    run_cfg.paths.vocab = os.path.join(out, "vocab.json")
    run_cfg.paths.language_table = os.path.join(out, "language_table.feat")
    run_cfg.paths.out_dir = out
    save_config(run_cfg, os.path.join(out, "config.yaml"))
    print(f"wrote synthetic benchmark (shift={cfg.shift}) to {out}/")
    return 0


def cmd_meta_train(args):
    cfg = _load_cfg(args)
    bundle = load_bundle(cfg)
    out = cfg.paths.out_dir
    os.makedirs(out, exist_ok=True)
    metrics_path = os.path.join(out, "metrics.jsonl")
    state = meta_train(cfg, bundle, metrics_path)
    ckpt_path = os.path.join(out, "meta_train.ckpt")
    state.save(ckpt_path)
    report.write_loss_curves(out, metrics_path, prefix="meta_train")
    print(f"trained {state.step} steps; checkpoint at {ckpt_path}")
    return 0


def cmd_fine_tune(args):
    cfg = _load_cfg(args)
    bundle = load_bundle(cfg)
    state = TrainState.load(args.checkpoint)
    if args.seed is not None:
        state.config.seed = args.seed
    if args.lambda_rectify is not None:
        state.config.lambda_rectify = args.lambda_rectify
    out = cfg.paths.out_dir
    os.makedirs(out, exist_ok=True)
    metrics_path = os.path.join(out, "metrics_finetune.jsonl")
    fine_tune(state, bundle, metrics_path)
    ckpt_path = os.path.join(out, "fine_tune.ckpt")
    state.save(ckpt_path)
    report.write_loss_curves(out, metrics_path, prefix="fine_tune")
    print(f"fine-tuned to step {state.step}; checkpoint at {ckpt_path}")
    return 0


def cmd_eval(args):
    cfg = _load_cfg(args)
    bundle = load_bundle(cfg)
    state = TrainState.load(args.checkpoint)
    out = cfg.paths.out_dir
    os.makedirs(out, exist_ok=True)
    shots = kshot_subset(bundle.novel, cfg.episode.k_shot, state.config.seed)
    rep, preds, _ = evaluate_model(state.eval_model(), bundle.novel,
                                   bundle.novel_registry, bundle.vocab,
                                   bundle.provider, cfg, seed=cfg.seed,
                                   support_from=shots)
    csv_path, fig_path = report.write_map_report(out, rep, bundle.novel.class_table)
    report.write_detections_jsonl(os.path.join(out, "detections.jsonl"),
                                  preds, bundle.novel.class_table)
    print(f"novel mAP: {rep['map']:.4f} (table {csv_path}, figure {fig_path})")
    return 0


def cmd_infer(args):
    cfg = _load_cfg(args)
    bundle = load_bundle(cfg)
    state = TrainState.load(args.checkpoint)
    out = cfg.paths.out_dir
    os.makedirs(out, exist_ok=True)
    shots = kshot_subset(bundle.novel, cfg.episode.k_shot, state.config.seed)
    _, preds, _ = evaluate_model(state.eval_model(), bundle.novel,
                                 bundle.novel_registry, bundle.vocab,
                                 bundle.provider, cfg, seed=cfg.seed,
                                 support_from=shots)
    path = os.path.join(out, "detections.jsonl")
    report.write_detections_jsonl(path, preds, bundle.novel.class_table)
    print(f"wrote {len(preds)} detections to {path}")
    return 0


def cmd_ablate(args):
    cfg = _load_cfg(args)
    synth = benchmark_synth_config(shift=args.shift)
    seeds = tuple(range(args.n_seeds))
    rows = run_ablation(args.kind, cfg, synth, seeds)
    out = cfg.paths.out_dir
    csv_path, fig_path = report.write_ablation_table(out, args.kind, rows)
    for r in rows:
        print(f"{r['variant']:>24}: mean mAP {r['mean_map']:.4f}  "
              f"({', '.join(f'{m:.3f}' for m in r['maps'])})")
    print(f"table {csv_path}, figure {fig_path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="crossdet",
        description="cross-domain multi-modal few-shot detection harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="emit synthetic base/novel datasets")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shift", type=float, default=2.0)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("meta-train", help="episodic training on base classes")
    _add_common(p)
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("fine-tune", help="k-shot fine-tuning on novel classes")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_fine_tune)

    p = sub.add_parser("eval", help="novel-split mAP evaluation")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run inference, emit detection JSONL")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="run an ablation table")
    _add_common(p)
    p.add_argument("--kind", required=True,
                   choices=["modules", "text-variants", "shared-vs-decoupled",
                            "modality-only"])
    p.add_argument("--shift", type=float, default=2.0)
    p.add_argument("--n-seeds", type=int, default=5)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
