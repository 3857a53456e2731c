"""Meta-training loop, fine-tuning, evaluation, and checkpointed state."""

import json
import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from .aggregation import EmbeddingProvider
from .config import RunConfig, config_from_dict, config_to_dict
from .data import (DataError, Dataset, TextRegistry, Vocab,
                   benchmark_synth_config, build_vocab,
                   generate_synthetic_domains, kshot_subset, sample_episode,
                   synthetic_language_table, synthetic_registries)
from .evaluation import PredictionRecord, evaluate_map
from .model import DetectionModel, episode_loss, infer

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, params, lr, clip_norm):
        self.params = params
        self.lr = lr
        self.clip_norm = clip_norm

    def step(self):
        scale = _clip_scale(self.params, self.clip_norm)
        for t in self.params.values():
            if t.grad is not None:
                t.data -= self.lr * scale * t.grad

    def state(self):
        return {}

    def load_state(self, tensors):
        pass


class Adam:
    def __init__(self, params, lr, clip_norm, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.clip_norm = clip_norm
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self):
        scale = _clip_scale(self.params, self.clip_norm)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, t in self.params.items():
            if t.grad is None:
                continue
            g = scale * t.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            t.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self):
        out = {"t": np.array([float(self.t)])}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state(self, tensors):
        self.t = int(tensors["t"][0])
        for k in self.params:
            self.m[k] = tensors[f"m.{k}"].copy()
            self.v[k] = tensors[f"v.{k}"].copy()


def _clip_scale(params, max_norm):
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = np.sqrt(total)
    return 1.0 if norm <= max_norm else max_norm / norm


def make_optimizer(cfg, params):
    if cfg.optimizer.algo == "adam":
        return Adam(params, cfg.optimizer.lr, cfg.optimizer.clip_norm,
                    cfg.optimizer.beta1, cfg.optimizer.beta2, cfg.optimizer.eps)
    return SGD(params, cfg.optimizer.lr, cfg.optimizer.clip_norm)


# ---------------------------------------------------------------------------
# data bundle


@dataclass
class DataBundle:
    base: Dataset
    novel: Dataset
    base_registry: TextRegistry
    novel_registry: TextRegistry
    vocab: Vocab
    provider: EmbeddingProvider


def make_synthetic_bundle(synth_cfg, seed, text_variant="manual-rich"):
    """Generate a fully in-memory synthetic cross-domain benchmark."""
    base, novel = generate_synthetic_domains(synth_cfg, seed)
    reg_b = synthetic_registries(base, synth_cfg, text_variant)
    reg_n = synthetic_registries(novel, synth_cfg, text_variant)
    merged = TextRegistry({**reg_b.entries, **reg_n.entries})
    # vocab covers both splits so novel text never falls to OOV
    rich_b = synthetic_registries(base, synth_cfg, "extended-rich")
    rich_n = synthetic_registries(novel, synth_cfg, "extended-rich")
    vocab = build_vocab(TextRegistry({**rich_b.entries, **rich_n.entries,
                                      **merged.entries}))
    table = synthetic_language_table(vocab, [base, novel], synth_cfg, seed)
    provider = EmbeddingProvider(synth_cfg.d_in, table=table)
    return DataBundle(base=base, novel=novel, base_registry=reg_b,
                      novel_registry=reg_n, vocab=vocab, provider=provider)


def validate_bundle(bundle, cfg):
    """Surface dataset/registry inconsistencies before step 0."""
    for ds, reg in ((bundle.base, bundle.base_registry),
                    (bundle.novel, bundle.novel_registry)):
        names = [ds.class_table[c] for c in ds.class_ids()]
        if not reg.covers(names):
            missing = [n for n in names if n not in reg.entries]
            raise DataError(f"{ds.split_tag} registry missing entries for {missing}")
    overlap = set(bundle.base.class_table) & set(bundle.novel.class_table)
    if overlap:
        raise DataError(f"base/novel class ids overlap: {sorted(overlap)}")
    if len(bundle.base.class_ids()) < cfg.episode.n_way:
        raise DataError("base split has fewer classes than n_way")


def load_bundle(cfg):
    """Load a DataBundle from the paths in a RunConfig."""
    from .data import load_coco_annotations

    p = cfg.paths
    for name in ("base_annotations", "novel_annotations", "base_registry",
                 "novel_registry", "vocab", "language_table"):
        if not getattr(p, name):
            raise DataError(f"paths.{name} is required")
    base = load_coco_annotations(p.base_annotations)
    novel = load_coco_annotations(p.novel_annotations)
    vocab = Vocab.load(p.vocab)
    provider = EmbeddingProvider.from_file(p.language_table)
    return DataBundle(base=base, novel=novel,
                      base_registry=TextRegistry.load(p.base_registry),
                      novel_registry=TextRegistry.load(p.novel_registry),
                      vocab=vocab, provider=provider)


# ---------------------------------------------------------------------------
# metrics


class MetricsWriter:
    """Append-only JSON-lines metrics stream."""

    def __init__(self, path=None):
        self.path = path
        self.records = []
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            self._fh = open(path, "a", encoding="utf-8")
        else:
            self._fh = None

    def write(self, **fields):
        self.records.append(fields)
        if self._fh:
            self._fh.write(json.dumps(fields) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


# ---------------------------------------------------------------------------
# training state


@dataclass
class TrainState:
    model: DetectionModel
    optimizer: object
    rng: np.random.Generator
    step: int
    config: RunConfig
    ema: dict = None

    def update_ema(self):
        decay = self.config.ema_decay
        if decay <= 0.0 or self.ema is None:
            return
        for name, t in self.model.parameters().items():
            self.ema[name] = decay * self.ema[name] + (1.0 - decay) * t.data

    def eval_model(self):
        """Model carrying the averaged weights when averaging is on; the
        averaged copy smooths step-to-step jitter at the end of training."""
        if self.config.ema_decay <= 0.0 or self.ema is None:
            return self.model
        import copy

        model = copy.deepcopy(self.model)
        for name, t in model.parameters().items():
            t.data = self.ema[name].copy()
        return model

    def save(self, path):
        tensors = {f"param.{k}": v.data for k, v in self.model.parameters().items()}
        for k, v in self.optimizer.state().items():
            tensors[f"opt.{k}"] = v
        if self.ema is not None:
            for k, v in self.ema.items():
                tensors[f"ema.{k}"] = v
        blob = {"run_config": config_to_dict(self.config),
                "vocab_size": self.model.vocab_size}
        save_rng = self.rng.bit_generator.state
        save_rng = json.loads(json.dumps(save_rng))      # plain types only
        ckpt.save_checkpoint(path, tensors, self.step, blob, save_rng)

    @classmethod
    def load(cls, path):
        tensors, step, blob, rng_state = ckpt.load_checkpoint(path)
        cfg = config_from_dict(blob["run_config"])
        model = DetectionModel(cfg.model, vocab_size=blob["vocab_size"],
                               seed=cfg.seed)
        params = model.parameters()
        for name, t in params.items():
            t.data = tensors[f"param.{name}"].copy()
        opt = make_optimizer(cfg, params)
        opt_state = {k[len("opt."):]: v for k, v in tensors.items()
                     if k.startswith("opt.")}
        if opt_state:
            opt.load_state(opt_state)
        ema = {k[len("ema."):]: v.copy() for k, v in tensors.items()
               if k.startswith("ema.")}
        rng = np.random.default_rng(0)
        rng.bit_generator.state = rng_state
        return cls(model=model, optimizer=opt, rng=rng, step=step, config=cfg,
                   ema=ema or None)


def init_state(cfg, vocab_size):
    model = DetectionModel(cfg.model, vocab_size=vocab_size, seed=cfg.seed)
    opt = make_optimizer(cfg, model.parameters())
    rng = np.random.default_rng([cfg.seed, 0x5eed])
    ema = ({k: v.data.copy() for k, v in model.parameters().items()}
           if cfg.ema_decay > 0.0 else None)
    return TrainState(model=model, optimizer=opt, rng=rng, step=0, config=cfg,
                      ema=ema)


def _scheduled_lr(cfg, step_in_phase, phase_steps):
    """Learning rate within one training phase. The cosine decay restarts
    at each phase so fine-tuning gets a full warm-to-floor sweep instead
    of inheriting the tail of the meta-training schedule."""
    base = cfg.optimizer.lr
    if cfg.optimizer.schedule != "cosine" or phase_steps <= 0:
        return base
    frac = min(step_in_phase / phase_steps, 1.0)
    floor = cfg.optimizer.final_frac
    return base * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def _train_steps(state, bundle, datasets, n_steps, metrics, phase):
    """Shared inner loop. `datasets` is a list of (dataset, registry) the
    loop cycles through (fine-tuning with interleave_base passes two)."""
    cfg = state.config
    for i in range(n_steps):
        state.optimizer.lr = _scheduled_lr(cfg, i, n_steps)
        dataset, registry = datasets[state.step % len(datasets)]
        ep_seed = int(state.rng.integers(0, 2**31 - 1))
        episode = sample_episode(dataset, registry, bundle.vocab,
                                 cfg.episode.n_way, cfg.episode.k_shot,
                                 cfg.episode.n_query, ep_seed)
        t0 = time.perf_counter()
        total, det, rect = episode_loss(state.model, episode, bundle.provider,
                                        lambda_rectify=cfg.lambda_rectify,
                                        beta=cfg.beta, gamma=cfg.gamma,
                                        bg_weight=cfg.bg_weight,
                                        align_weight=cfg.align_weight)
        state.model.zero_grads()
        total.backward()
        state.optimizer.step()
        state.update_ema()
        state.step += 1
        metrics.write(phase=phase, step=state.step, split=dataset.split_tag,
                      loss_total=total.item(), loss_det=det.item(),
                      loss_rect=None if rect is None else rect.item(),
                      wall_time=time.perf_counter() - t0)
    return state


def meta_train(cfg, bundle, metrics_path=None):
    """Episodic training on base-class episodes."""
    cfg.validate()
    validate_bundle(bundle, cfg)
    state = init_state(cfg, vocab_size=len(bundle.vocab))
    metrics = MetricsWriter(metrics_path)
    try:
        _train_steps(state, bundle, [(bundle.base, bundle.base_registry)],
                     cfg.meta_steps, metrics, phase="meta-train")
    finally:
        metrics.close()
    state.metrics = metrics.records
    return state


def fine_tune(state, bundle, metrics_path=None, steps=None):
    """Continue optimization on k-shot novel episodes; the rectify loss
    stays active and task prototypes are retained.

    Novel sampling is restricted to the deterministic k-shot subset
    (`kshot_subset`): the few-shot contract is that only k annotated
    instances per novel class exist, so the held-out novel images used
    for evaluation must never enter training.
    """
    cfg = state.config
    overlap = set(bundle.base.class_table) & set(bundle.novel.class_table)
    if overlap:
        raise DataError(f"novel classes overlap base: {sorted(overlap)}")
    novel_ft = kshot_subset(bundle.novel, cfg.episode.k_shot, cfg.seed)
    datasets = [(novel_ft, bundle.novel_registry)]
    if cfg.interleave_base:
        datasets.append((bundle.base, bundle.base_registry))
    metrics = MetricsWriter(metrics_path)
    try:
        _train_steps(state, bundle, datasets,
                     steps if steps is not None else cfg.fine_tune_steps,
                     metrics, phase="fine-tune")
    finally:
        metrics.close()
    return state


# ---------------------------------------------------------------------------
# evaluation


def build_eval_episode(dataset, registry, vocab, n_way, k_shot, seed,
                       max_queries=64, support_from=None):
    """Support episode for evaluation; queries are every image not used as
    a support source (best effort), capped at max_queries.

    When `support_from` is given (the k-shot subset a few-shot run is
    allowed to see), support comes from it and every image of it is
    excluded from the query pool, so evaluation is strictly held-out.
    """
    probe = sample_episode(support_from if support_from is not None else dataset,
                           registry, vocab, n_way, k_shot, n_query=1, seed=seed)
    support_images = {s.image_id for insts in probe.support.values() for s in insts}
    if support_from is not None:
        support_images.update(g.image_id for g in support_from.images)
    pool = [g for g in dataset.images
            if any(cid in probe.class_ids for cid, _ in dataset.annotations[g.image_id])]
    disjoint = [g for g in pool if g.image_id not in support_images]
    queries = disjoint if disjoint else pool
    queries = queries[:max_queries]
    query = [(g, [(cid, box) for cid, box in dataset.annotations[g.image_id]
                  if cid in probe.class_ids]) for g in queries]
    probe.query = query
    return probe


def _evaluate_episode(model, dataset, registry, vocab, provider, cfg, seed,
                      support_from=None):
    episode = build_eval_episode(dataset, registry, vocab, model.cfg.n_way,
                                 cfg.episode.k_shot, seed,
                                 support_from=support_from)
    s = model.support_matrix(episode, provider)
    predictions = []
    gts = {}
    for grid, gt in episode.query:
        result = infer(grid, s, model.task_prototypes, model,
                       cfg.conf_threshold, episode.class_ids)
        gts[grid.image_id] = gt
        for cid, score, box in zip(result.class_ids, result.scores, result.boxes):
            predictions.append(PredictionRecord(image_id=grid.image_id,
                                                class_id=cid, score=score, box=box))
    report = evaluate_map(predictions, gts, tuple(cfg.iou_thresholds),
                          class_ids=episode.class_ids)
    return report, predictions, gts


def _mean_ignoring_none(values):
    kept = [v for v in values if v is not None]
    return float(np.mean(kept)) if kept else None


def evaluate_model(model, dataset, registry, vocab, provider, cfg, seed=0,
                   support_from=None):
    """Novel-split detection quality of a trained model.

    Without `support_from`, the support set is a random draw, so
    single-episode mAP is noisy; cfg.eval_episodes support draws are
    evaluated and their reports averaged. With `support_from` (the fixed
    k-shot subset of a few-shot run), support is deterministic and
    queries are strictly held-out. Predictions and ground truth of the
    first episode are returned for downstream reporting.
    """
    n_eval = 1 if support_from is not None else cfg.eval_episodes
    ep_seeds = np.random.default_rng([seed, 0xe7a1]).integers(
        0, 2**31 - 1, size=n_eval)
    reports = []
    first_preds = first_gts = None
    for ep_seed in ep_seeds:
        rep, preds, gts = _evaluate_episode(model, dataset, registry, vocab,
                                            provider, cfg, int(ep_seed),
                                            support_from=support_from)
        reports.append(rep)
        if first_preds is None:
            first_preds, first_gts = preds, gts
    merged = {"map": _mean_ignoring_none([r["map"] for r in reports]),
              "per_threshold": {}, "per_class": {}}
    for thr in cfg.iou_thresholds:
        merged["per_threshold"][thr] = _mean_ignoring_none(
            [r["per_threshold"][thr] for r in reports])
        class_ids = sorted({cid for r in reports for cid in r["per_class"][thr]})
        merged["per_class"][thr] = {
            cid: _mean_ignoring_none([r["per_class"][thr].get(cid)
                                      for r in reports])
            for cid in class_ids}
    return merged, first_preds, first_gts


def benchmark_run(cfg, bundle, metrics_path=None, eval_seed=0):
    """meta-train -> k-shot fine-tune -> held-out novel mAP, one line of
    an ablation table. Evaluation support is the same fixed k-shot subset
    fine-tuning saw."""
    state = meta_train(cfg, bundle, metrics_path)
    fine_tune(state, bundle, metrics_path)
    shots = kshot_subset(bundle.novel, cfg.episode.k_shot, cfg.seed)
    report, _, _ = evaluate_model(state.eval_model(), bundle.novel,
                                  bundle.novel_registry, bundle.vocab,
                                  bundle.provider, cfg, seed=eval_seed,
                                  support_from=shots)
    return state, report


# ---------------------------------------------------------------------------
# ablations


ABLATION_KINDS = ("modules", "text-variants", "shared-vs-decoupled",
                  "modality-only")


def _variant_cfg(cfg, modality=None, use_rectify=None, shared=None):
    import copy

    out = copy.deepcopy(cfg)
    if modality is not None:
        out.model.modality = modality
    if use_rectify is not None:
        out.model.use_rectify = use_rectify
    if shared is not None:
        out.model.shared_attention = shared
    return out


def run_ablation(kind, cfg, synth_cfg=None, seeds=(0, 1, 2, 3, 4)):
    """Run the matched configurations with shared per-seed bundles and
    return table rows (variant name -> per-seed mAP list + mean)."""
    if kind not in ABLATION_KINDS:
        raise ValueError(f"unknown ablation kind '{kind}' "
                         f"(choose from {ABLATION_KINDS})")
    synth_cfg = synth_cfg or benchmark_synth_config()
    if kind == "modules":
        variants = [
            ("baseline", _variant_cfg(cfg, modality="vision", use_rectify=False), None),
            ("+aggregation", _variant_cfg(cfg, modality="both", use_rectify=False), None),
            ("+aggregation+rectify", _variant_cfg(cfg, modality="both",
                                                  use_rectify=True), None),
        ]
    elif kind == "text-variants":
        variants = [
            ("none", _variant_cfg(cfg, modality="vision", use_rectify=False), None),
            ("name", _variant_cfg(cfg, modality="both"), "name-only"),
            ("rich", _variant_cfg(cfg, modality="both"), "manual-rich"),
            ("extended", _variant_cfg(cfg, modality="both"), "extended-rich"),
        ]
    elif kind == "shared-vs-decoupled":
        variants = [
            ("shared", _variant_cfg(cfg, shared=True), None),
            ("decoupled", _variant_cfg(cfg, shared=False), None),
        ]
    else:
        variants = [
            ("image-only", _variant_cfg(cfg, modality="vision",
                                        use_rectify=False), None),
            ("language-only", _variant_cfg(cfg, modality="language",
                                           use_rectify=False), None),
        ]
    rows = []
    for name, var_cfg, text_variant in variants:
        maps = []
        for seed in seeds:
            bundle = make_synthetic_bundle(synth_cfg, seed,
                                           text_variant or "manual-rich")
            var_cfg.seed = seed
            _, report = benchmark_run(var_cfg, bundle, eval_seed=seed)
            maps.append(report["map"])
        rows.append({"variant": name, "maps": maps,
                     "mean_map": float(np.mean(maps))})
        logger.info("ablation %s / %s: %s", kind, name, maps)
    return rows
