"""Datasets, synthetic cross-domain generation, text registry/tokenizer,
and the n-way k-shot episodic sampler."""

import json
import logging
import re
import struct
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

PAD_ID, BOS_ID, EOS_ID, OOV_ID = 0, 1, 2, 3
BOS_TOKEN, EOS_TOKEN = "<s>", "</s>"

PROVENANCE_TAGS = ("name-only", "manual-rich", "extended-rich", "external-LLM")


class DataError(ValueError):
    """Malformed dataset, annotation, or registry input."""


# ---------------------------------------------------------------------------
# feature-file binary format: header = three u32 LE (H, W, d_in), then
# H*W*d_in little-endian float32 values


def write_feature_file(path, grid):
    grid = np.asarray(grid, dtype=np.float32)
    if grid.ndim != 3:
        raise DataError(f"feature grid must be rank 3, got shape {grid.shape}")
    h, w, d = grid.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<III", h, w, d))
        f.write(grid.astype("<f4").tobytes())


def read_feature_file(path):
    with open(path, "rb") as f:
        header = f.read(12)
        if len(header) != 12:
            raise DataError(f"{path}: truncated feature-file header")
        h, w, d = struct.unpack("<III", header)
        payload = f.read()
    expected = h * w * d * 4
    if len(payload) != expected:
        raise DataError(f"{path}: expected {expected} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, d).astype(np.float64)


# ---------------------------------------------------------------------------
# core records


@dataclass
class FeatureGrid:
    """Precomputed (or synthetic) image features on an H x W grid."""

    grid: np.ndarray           # H x W x d_in
    image_id: int
    height: int                # image pixel extent the boxes live in
    width: int
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 3 or self.grid.shape[0] < 1 or self.grid.shape[1] < 1:
            raise DataError(f"bad feature grid shape {self.grid.shape}")
        if not np.all(np.isfinite(self.grid)):
            raise DataError(f"image {self.image_id}: non-finite feature values")

    def flat(self):
        """HW x d_in view for the attention pipeline."""
        h, w, d = self.grid.shape
        return self.grid.reshape(h * w, d)


@dataclass
class Dataset:
    images: list                       # FeatureGrid records
    annotations: dict                  # image_id -> list of (class_id, [x1,y1,x2,y2])
    class_table: dict                  # class_id -> name
    split_tag: str                     # "base" or "novel"
    skipped_records: int = 0

    def __post_init__(self):
        ids = {g.image_id for g in self.images}
        if len(ids) != len(self.images):
            raise DataError("duplicate image ids")
        for image_id, anns in self.annotations.items():
            if image_id not in ids:
                raise DataError(f"annotations reference unknown image {image_id}")
            grid = self.grid_for(image_id)
            for class_id, box in anns:
                if class_id not in self.class_table:
                    raise DataError(f"annotation references unknown category {class_id}")
                x1, y1, x2, y2 = box
                if not (x2 > x1 and y2 > y1):
                    raise DataError(f"degenerate box {box} on image {image_id}")
                if x1 < 0 or y1 < 0 or x2 > grid.width or y2 > grid.height:
                    raise DataError(f"box {box} outside image {image_id} extent")

    def grid_for(self, image_id):
        for g in self.images:
            if g.image_id == image_id:
                return g
        raise KeyError(image_id)

    def class_ids(self):
        return sorted(self.class_table)

    def instances_of(self, class_id):
        """All (image_id, box) instances of a class, in stable order."""
        out = []
        for g in self.images:
            for cid, box in self.annotations.get(g.image_id, []):
                if cid == class_id:
                    out.append((g.image_id, box))
        return out


def load_coco_annotations(path, feature_dir=None):
    """Load the documented annotation JSON subset into a Dataset.

    bbox [x,y,w,h] is converted to [x1,y1,x2,y2] internally. Degenerate
    boxes are skipped with a warning counter; dangling category references
    are hard errors.
    """
    import os

    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot parse annotation file ({exc})") from exc
    for key in ("images", "annotations", "categories"):
        if key not in raw:
            raise DataError(f"{path}: missing top-level '{key}'")
    class_table = {}
    for cat in raw["categories"]:
        class_table[int(cat["id"])] = str(cat["name"])
    base = feature_dir if feature_dir is not None else os.path.dirname(path)
    images = []
    for rec in raw["images"]:
        grid = read_feature_file(os.path.join(base, rec["feature_file"]))
        images.append(FeatureGrid(grid=grid, image_id=int(rec["id"]),
                                  height=int(rec["height"]), width=int(rec["width"]),
                                  source={"feature_file": rec["feature_file"]}))
    annotations = {g.image_id: [] for g in images}
    skipped = 0
    for ann in raw["annotations"]:
        cid = int(ann["category_id"])
        if cid not in class_table:
            raise DataError(
                f"{path}: annotation {ann.get('id')} references missing category {cid}")
        image_id = int(ann["image_id"])
        if image_id not in annotations:
            raise DataError(
                f"{path}: annotation {ann.get('id')} references missing image {image_id}")
        x, y, w, h = ann["bbox"]
        if w <= 0 or h <= 0:
            logger.warning("skipping degenerate box %s in annotation %s",
                           ann["bbox"], ann.get("id"))
            skipped += 1
            continue
        annotations[image_id].append((cid, [float(x), float(y),
                                            float(x) + float(w), float(y) + float(h)]))
    return Dataset(images=images, annotations=annotations, class_table=class_table,
                   split_tag=str(raw.get("split_tag", "base")),
                   skipped_records=skipped)


def save_coco_annotations(dataset, ann_path, feature_dir):
    """Write a Dataset back to the annotation JSON + feature-file layout."""
    import os

    os.makedirs(feature_dir, exist_ok=True)
    ann_dir = os.path.dirname(os.path.abspath(ann_path))
    images, annotations = [], []
    ann_id = 0
    for g in dataset.images:
        fpath = os.path.join(feature_dir, f"img_{g.image_id:05d}.feat")
        write_feature_file(fpath, g.grid.astype(np.float32))
        # stored relative to the annotation file so the pair relocates as a unit
        images.append({"id": g.image_id, "height": g.height, "width": g.width,
                       "feature_file": os.path.relpath(os.path.abspath(fpath), ann_dir)})
        for cid, (x1, y1, x2, y2) in dataset.annotations.get(g.image_id, []):
            annotations.append({"id": ann_id, "image_id": g.image_id,
                                "category_id": cid,
                                "bbox": [x1, y1, x2 - x1, y2 - y1]})
            ann_id += 1
    payload = {
        "split_tag": dataset.split_tag,
        "images": images,
        "annotations": annotations,
        "categories": [{"id": cid, "name": name}
                       for cid, name in sorted(dataset.class_table.items())],
    }
    with open(ann_path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1)


# ---------------------------------------------------------------------------
# rich-text registry and tokenizer


class TextRegistry:
    """Per-category rich text descriptions with a provenance tag each.

    File format: one record per line, `<class_name>\\t<tag>\\t<description>`.
    """

    def __init__(self, entries=None):
        # class_name -> (provenance_tag, description)
        self.entries = dict(entries or {})
        for name, (tag, desc) in self.entries.items():
            if not desc:
                raise DataError(f"empty description for class '{name}'")
            if tag not in PROVENANCE_TAGS:
                raise DataError(f"unknown provenance tag '{tag}' for class '{name}'")

    def add(self, class_name, tag, description):
        if not description:
            raise DataError(f"empty description for class '{class_name}'")
        if tag not in PROVENANCE_TAGS:
            raise DataError(f"unknown provenance tag '{tag}'")
        self.entries[class_name] = (tag, description)

    def description(self, class_name):
        if class_name not in self.entries:
            raise DataError(f"no text registry entry for class '{class_name}'")
        return self.entries[class_name][1]

    def covers(self, class_names):
        return all(name in self.entries for name in class_names)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for name, (tag, desc) in self.entries.items():
                f.write(f"{name}\t{tag}\t{desc}\n")

    @classmethod
    def load(cls, path):
        entries = {}
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
                entries[parts[0]] = (parts[1], parts[2])
        return cls(entries)


@dataclass
class TokenSeq:
    """Token-id sequence bracketed by <s> ... </s>."""

    tokens: list

    def __post_init__(self):
        if len(self.tokens) < 2:
            raise DataError("token sequence must have length >= 2")
        if self.tokens[0] != BOS_ID or self.tokens[-1] != EOS_ID:
            raise DataError("token sequence must start with <s> and end with </s>")

    @property
    def length(self):
        return len(self.tokens)


_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def split_words(text):
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    """Token table with fixed special ids (pad, <s>, </s>, oov) in front."""

    def __init__(self, tokens=()):
        self.id_to_token = ["<pad>", BOS_TOKEN, EOS_TOKEN, "<oov>"] + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.id_to_token)

    def lookup(self, token):
        return self.token_to_id.get(token, OOV_ID)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.id_to_token, f)

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            toks = json.load(f)
        return cls(toks[4:])


def build_vocab(registry):
    """Vocabulary over all registry tokens in first-appearance order."""
    if not registry.entries:
        raise DataError("cannot build a vocabulary from an empty registry")
    seen = []
    seen_set = set()
    for name, (_tag, desc) in registry.entries.items():
        for tok in split_words(desc):
            if tok not in seen_set:
                seen_set.add(tok)
                seen.append(tok)
    return Vocab(seen)


def tokenize(text, vocab):
    if not text:
        raise DataError("cannot tokenize an empty string")
    ids = [BOS_ID] + [vocab.lookup(t) for t in split_words(text)] + [EOS_ID]
    return TokenSeq(ids)


# ---------------------------------------------------------------------------
# episodes


@dataclass
class SupportInstance:
    image_id: int
    grid: FeatureGrid
    box: list                  # [x1,y1,x2,y2] image coords
    class_id: int


@dataclass
class Episode:
    class_ids: list            # episode class order; background is implicit last
    support: dict              # class_id -> list of SupportInstance (length k)
    query: list                # list of (FeatureGrid, [(class_id, box), ...])
    texts: dict                # class_id -> TokenSeq
    seed: int

    def __post_init__(self):
        if len(set(self.class_ids)) != len(self.class_ids):
            raise DataError("episode classes must be distinct")
        counts = {len(v) for v in self.support.values()}
        if len(counts) != 1:
            raise DataError("unequal support instance counts across classes")
        for _grid, gts in self.query:
            for cid, _box in gts:
                if cid not in self.class_ids:
                    raise DataError(f"query ground truth references class {cid} "
                                    "outside the episode")


def sample_episode(dataset, registry, vocab, n_way, k_shot, n_query, seed):
    """Deterministic n-way k-shot episode sampler (instance-level counting)."""
    rng = np.random.default_rng(seed)
    eligible = []
    for cid in dataset.class_ids():
        inst = dataset.instances_of(cid)
        if len(inst) >= k_shot:
            eligible.append(cid)
        elif inst:
            logger.debug("class %d has only %d instances (< k=%d)", cid, len(inst), k_shot)
    if len(eligible) < n_way:
        counts = {cid: len(dataset.instances_of(cid)) for cid in dataset.class_ids()}
        raise DataError(
            f"need {n_way} classes with >= {k_shot} instances, have {len(eligible)} "
            f"(per-class counts: {counts})")
    # slot order stays in the drawn (random) order: if slots were sorted,
    # slot index would correlate with class identity and the model could
    # learn slot->class shortcuts instead of reading the support set
    class_ids = rng.choice(eligible, size=n_way, replace=False).tolist()
    names = [dataset.class_table[cid] for cid in class_ids]
    if not registry.covers(names):
        missing = [n for n in names if n not in registry.entries]
        raise DataError(f"text registry missing entries for {missing}")

    support = {}
    support_images = set()
    for cid in class_ids:
        inst = dataset.instances_of(cid)
        picks = rng.choice(len(inst), size=k_shot, replace=False)
        support[cid] = [
            SupportInstance(image_id=inst[i][0], grid=dataset.grid_for(inst[i][0]),
                            box=inst[i][1], class_id=cid)
            for i in sorted(picks.tolist())
        ]
        support_images.update(s.image_id for s in support[cid])

    # query pool: images containing at least one episode-class object,
    # disjoint from support source images when possible
    pool = []
    for g in dataset.images:
        gts = [(cid, box) for cid, box in dataset.annotations.get(g.image_id, [])
               if cid in class_ids]
        if gts:
            pool.append((g, gts))
    disjoint = [p for p in pool if p[0].image_id not in support_images]
    if len(disjoint) >= n_query:
        pool = disjoint
    else:
        # routine in k-shot fine-tuning, where support and query draw from
        # the same k images per class
        logger.debug("query/support disjointness infeasible "
                     "(%d disjoint images, need %d); falling back to full pool",
                     len(disjoint), n_query)
    if len(pool) < n_query:
        raise DataError(f"only {len(pool)} query candidates, need {n_query}")
    picks = rng.choice(len(pool), size=n_query, replace=False)
    query = [pool[i] for i in sorted(picks.tolist())]

    texts = {cid: tokenize(registry.description(dataset.class_table[cid]), vocab)
             for cid in class_ids}
    return Episode(class_ids=class_ids, support=support, query=query,
                   texts=texts, seed=seed)


def kshot_subset(dataset, k_shot, seed):
    """The k annotated shots per class that a few-shot run is allowed to see.

    Deterministic in (dataset, k_shot, seed). Fine-tuning and evaluation
    support must both come from this subset so no held-out image leaks
    into training.
    """
    rng = np.random.default_rng([seed, 0x5407])
    keep_images = set()
    for cid in dataset.class_ids():
        inst = dataset.instances_of(cid)
        if len(inst) < k_shot:
            raise DataError(f"class {cid} has {len(inst)} instances, "
                            f"need k_shot={k_shot}")
        picks = rng.choice(len(inst), size=k_shot, replace=False)
        keep_images.update(inst[i][0] for i in sorted(picks.tolist()))
    images = [g for g in dataset.images if g.image_id in keep_images]
    annotations = {g.image_id: dataset.annotations[g.image_id] for g in images}
    return Dataset(images=images, annotations=annotations,
                   class_table=dict(dataset.class_table),
                   split_tag=dataset.split_tag)


# ---------------------------------------------------------------------------
# synthetic cross-domain benchmark


@dataclass
class SynthConfig:
    """Knobs for the synthetic cross-domain generator.

    Novel class i is the shifted twin of base class i: its feature archetype
    is the base archetype displaced by `shift` along a random direction, so
    the base->novel domain gap is directly controllable.
    """

    n_base_classes: int = 4
    n_novel_classes: int = 3
    d_in: int = 16
    grid_h: int = 8
    grid_w: int = 8
    cell_px: int = 8
    images_per_class: int = 14
    objects_per_image: tuple = (1, 2)
    shift: float = 2.0
    archetype_scale: float = 2.0
    shared_scale: float = 0.0
    feature_noise: float = 0.9
    intra_scale: float = 0.0
    background_noise: float = 0.35
    text_noise: float = 0.15
    name_signal: float = 0.25
    sig_gain: float = 1.0
    text_align: float = 1.0
    signature_tokens: int = 3

    def validate(self):
        if self.n_base_classes <= 0 or self.n_novel_classes <= 0:
            raise DataError("class counts must be positive")
        if self.n_novel_classes > self.n_base_classes:
            raise DataError("novel classes are shifted twins; need "
                            "n_novel_classes <= n_base_classes")
        if self.shift < 0:
            raise DataError("shift must be >= 0")


def benchmark_synth_config(shift=2.0):
    """Tuned generator settings for the standard benchmark.

    The two modalities are complementary by construction: per-object
    appearance offsets (intra_scale) make k-shot vision prototypes noisy,
    which clean text embeddings repair, while the text embeds only the
    domain-generic class core, so it cannot replace visual support under
    the domain shift it never saw.
    """
    return SynthConfig(shift=shift, archetype_scale=0.7, shared_scale=2.0,
                       feature_noise=0.6, intra_scale=1.2, text_noise=0.2,
                       name_signal=0.1, sig_gain=3.0, text_align=1.0,
                       objects_per_image=(1, 1))


def _make_images(rng, class_ids, archetypes, cfg, start_image_id):
    images, annotations = [], {}
    img_h = cfg.grid_h * cfg.cell_px
    img_w = cfg.grid_w * cfg.cell_px
    image_id = start_image_id
    lo, hi = cfg.objects_per_image
    for cid in class_ids:
        arch = archetypes[cid]
        for _ in range(cfg.images_per_class):
            grid = rng.normal(0.0, cfg.background_noise,
                              size=(cfg.grid_h, cfg.grid_w, cfg.d_in))
            n_obj = int(rng.integers(lo, hi + 1))
            gts = []
            for _ in range(n_obj):
                # per-object appearance offset: shared by every cell of the
                # object, so RoI pooling cannot average it away and k-shot
                # support prototypes inherit genuine instance-level noise
                offset = (rng.normal(0.0, cfg.intra_scale, size=cfg.d_in)
                          if cfg.intra_scale > 0 else 0.0)
                bw = rng.uniform(0.3, 0.6) * img_w
                bh = rng.uniform(0.3, 0.6) * img_h
                x1 = rng.uniform(0, img_w - bw)
                y1 = rng.uniform(0, img_h - bh)
                box = [x1, y1, x1 + bw, y1 + bh]
                # cells whose centers fall inside the box carry the archetype
                for r in range(cfg.grid_h):
                    cy = (r + 0.5) * cfg.cell_px
                    for c in range(cfg.grid_w):
                        cx = (c + 0.5) * cfg.cell_px
                        if box[0] <= cx <= box[2] and box[1] <= cy <= box[3]:
                            grid[r, c] = arch + offset + rng.normal(
                                0.0, cfg.feature_noise, size=cfg.d_in)
                gts.append((cid, box))
            fg = FeatureGrid(grid=grid, image_id=image_id, height=img_h, width=img_w,
                             source={"synthetic": True})
            images.append(fg)
            annotations[image_id] = gts
            image_id += 1
    return images, annotations, image_id


def generate_synthetic_domains(cfg, seed):
    """Synthetic (base, novel) dataset pair with a controlled domain gap."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(cfg.n_base_classes, cfg.d_in))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    # optional common "objectness" direction shared by every class; it
    # limits how separable classes are on vision features alone
    shared_dir = rng.normal(size=cfg.d_in)
    shared_dir /= np.linalg.norm(shared_dir)
    common = cfg.shared_scale * shared_dir
    base_arch = {i: common + cfg.archetype_scale * dirs[i]
                 for i in range(cfg.n_base_classes)}
    novel_arch = {}
    for i in range(cfg.n_novel_classes):
        shift_dir = rng.normal(size=cfg.d_in)
        shift_dir /= np.linalg.norm(shift_dir)
        novel_arch[cfg.n_base_classes + i] = base_arch[i] + cfg.shift * shift_dir

    base_ids = list(range(cfg.n_base_classes))
    novel_ids = sorted(novel_arch)
    img_b, ann_b, next_id = _make_images(rng, base_ids, base_arch, cfg, 0)
    img_n, ann_n, _ = _make_images(rng, novel_ids, novel_arch, cfg, next_id)

    base = Dataset(images=img_b, annotations=ann_b,
                   class_table={i: f"base_{i}" for i in base_ids}, split_tag="base")
    novel = Dataset(images=img_n, annotations=ann_n,
                    class_table={i: f"novel_{i - cfg.n_base_classes}" for i in novel_ids},
                    split_tag="novel")
    base.archetypes = base_arch
    novel.archetypes = novel_arch
    # the domain-generic part of each class identity: what a text
    # description can know about the category, independent of the domain
    # the images were captured in (novel twins share their base core)
    base.class_cores = {i: cfg.archetype_scale * dirs[i] for i in base_ids}
    novel.class_cores = {cid: cfg.archetype_scale * dirs[cid - cfg.n_base_classes]
                         for cid in novel_ids}
    return base, novel


def synthetic_registries(dataset, cfg, variant="manual-rich", rng=None):
    """Registry for a synthetic split, at one of the text variants.

    name-only: just the class name. manual-rich: name plus the class's
    signature tokens. extended-rich: rich plus a distractor signature token
    of a sibling class.
    """
    reg = TextRegistry()
    ids = dataset.class_ids()
    for cid in ids:
        name = dataset.class_table[cid]
        sigs = [f"sig{cid}x{j}" for j in range(cfg.signature_tokens)]
        if variant == "name-only":
            reg.add(name, "name-only", name)
        elif variant == "manual-rich":
            reg.add(name, "manual-rich",
                    f"{name} shows {' '.join(sigs)} patches, with crisp edges")
        elif variant == "extended-rich":
            other = ids[(ids.index(cid) + 1) % len(ids)]
            reg.add(name, "extended-rich",
                    f"{name} shows {' '.join(sigs)} patches, with crisp edges; "
                    f"usually seen near sig{other}x0 regions")
        else:
            raise DataError(f"unknown text variant '{variant}'")
    return reg


def synthetic_language_table(vocab, datasets, cfg, seed):
    """Token-id -> d_in embedding table for the synthetic benchmark.

    Signature tokens embed the domain-generic class core: the part of the
    class identity a written description can carry. They deliberately omit
    the per-domain displacement that only the support images witness, so
    text is informative but not a substitute for visual support.
    Class-name tokens carry a weak copy; everything else is seeded noise.
    """
    rng = np.random.default_rng(seed)
    table = rng.normal(0.0, 1.0, size=(len(vocab), cfg.d_in))
    arch_by_token = {}
    for ds in datasets:
        cores = getattr(ds, "class_cores", {})
        for cid, core in cores.items():
            name = ds.class_table[cid]
            # text_align < 1 mixes in a fixed per-class off-axis direction,
            # standing in for embedding mismatch between language and
            # vision feature spaces
            off_rng = np.random.default_rng([seed, 0x7e, cid])
            off = off_rng.normal(size=cfg.d_in)
            off *= np.linalg.norm(core) / max(np.linalg.norm(off), 1e-12)
            mixed = cfg.text_align * core + (1.0 - cfg.text_align) * off
            for j in range(cfg.signature_tokens):
                arch_by_token[f"sig{cid}x{j}"] = (mixed, cfg.sig_gain)
            for word in split_words(name):
                arch_by_token[word] = (mixed, cfg.name_signal)
    for tok, (component, gain) in arch_by_token.items():
        tid = vocab.lookup(tok)
        if tid != OOV_ID:
            table[tid] = gain * component + rng.normal(0.0, cfg.text_noise,
                                                       size=cfg.d_in)
    return table


def centroid_transfer_gap(base, novel, seed=0):
    """Base->novel accuracy drop of a nearest-centroid object classifier.

    Novel instances are scored against base centroids with novel class i
    mapped to base class i. Serves as the independent measure of how hard
    the synthetic domain shift is.
    """

    def class_means(ds):
        feats = {}
        for g in ds.images:
            for cid, box in ds.annotations[g.image_id]:
                vec = _box_cells_mean(g, box)
                feats.setdefault(cid, []).append(vec)
        return feats

    base_feats = class_means(base)
    base_ids = sorted(base_feats)
    centroids = np.stack([np.mean(base_feats[cid], axis=0) for cid in base_ids])

    def accuracy(feats, id_map):
        hits = total = 0
        for cid, vecs in feats.items():
            want = id_map(cid)
            if want not in base_ids:
                continue
            want_idx = base_ids.index(want)
            for v in vecs:
                pred = int(np.argmin(np.linalg.norm(centroids - v, axis=1)))
                hits += pred == want_idx
                total += 1
        return hits / total if total else 0.0

    acc_base = accuracy(base_feats, lambda cid: cid)
    n_base = len(base_ids)
    acc_novel = accuracy(class_means(novel), lambda cid: cid - n_base)
    return acc_base, acc_novel


def _box_cells_mean(grid, box):
    h, w, _ = grid.grid.shape
    sx, sy = grid.width / w, grid.height / h
    vecs = []
    for r in range(h):
        cy = (r + 0.5) * sy
        for c in range(w):
            cx = (c + 0.5) * sx
            if box[0] <= cx <= box[2] and box[1] <= cy <= box[3]:
                vecs.append(grid.grid[r, c])
    if not vecs:
        vecs.append(grid.grid[min(h - 1, int(box[1] / sy)), min(w - 1, int(box[0] / sx))])
    return np.mean(vecs, axis=0)
