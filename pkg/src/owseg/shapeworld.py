"""Deterministic synthetic scene generator with a known/seen/unseen taxonomy.

Categories are shape-texture pairs (e.g. ``triangle_striped``), rendered
into small RGB rasters with painter's-order occlusion.  Training scenes draw
instances from the known and seen sets only; seen instances are rendered but
flagged unannotated, and unseen classes never appear in training scenes.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .coco import mask_bbox, rle_decode, rle_encode, save_json
from .errors import FormatError, PlacementFailedError, VocabularyExhaustedError

SHAPES = ("circle", "square", "triangle", "star", "cross", "ring")
TEXTURES = ("solid", "striped", "dotted")


@dataclass
class CategoryTaxonomy:
    known: set
    seen: set
    unseen: set
    names: dict
    frequency: dict = field(default_factory=dict)

    def all_ids(self):
        return self.known | self.seen | self.unseen

    def subset_of(self, class_id):
        if class_id in self.known:
            return "known"
        if class_id in self.seen:
            return "seen"
        if class_id in self.unseen:
            return "unseen"
        return None


@dataclass
class InstanceAnn:
    mask: np.ndarray  # bool HxW
    class_id: int
    annotated: bool
    area: int


@dataclass
class ImageRecord:
    image_id: int
    pixels: np.ndarray  # float32 HxWx3 in [0,1], on a 1/255 grid
    instances: list
    split: str
    weak_labels: list = field(default_factory=list)  # unannotated class ids present in the pixels


@dataclass
class ShapeworldConfig:
    image_size: int = 64
    min_instances: int = 2
    max_instances: int = 6
    n_known: int = 6
    n_seen: int = 4
    n_unseen: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if min(self.n_known, self.n_seen, self.n_unseen) < 1:
            raise ValueError("all class counts must be >= 1")
        if self.min_instances < 1 or self.max_instances < self.min_instances:
            raise ValueError("bad instance range")


def category_vocabulary():
    """All shape-texture category names, in fixed vocabulary order."""
    return [f"{shape}_{texture}" for shape in SHAPES for texture in TEXTURES]


def build_taxonomy(config: ShapeworldConfig) -> CategoryTaxonomy:
    """Partition the vocabulary into disjoint known/seen/unseen id sets.

    Deterministic for a fixed seed; ids are 1-based positions in the fixed
    vocabulary so that a class keeps its id across different taxonomies.
    """
    vocab = category_vocabulary()
    total = config.n_known + config.n_seen + config.n_unseen
    if total > len(vocab):
        raise VocabularyExhaustedError(
            f"requested {total} classes but the vocabulary has {len(vocab)}"
        )
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(vocab))[:total]
    ids = [int(i) + 1 for i in order]
    known = set(ids[: config.n_known])
    seen = set(ids[config.n_known : config.n_known + config.n_seen])
    unseen = set(ids[config.n_known + config.n_seen :])
    names = {int(i) + 1: vocab[i] for i in order}
    return CategoryTaxonomy(known=known, seen=seen, unseen=unseen, names=names)


def _shape_mask(shape, size, cy, cx, s):
    """Rasterize one shape on pixel centers; returns a bool size x size mask."""
    yy, xx = np.mgrid[0:size, 0:size]
    dy = yy + 0.5 - cy
    dx = xx + 0.5 - cx
    if shape == "circle":
        return dx * dx + dy * dy <= s * s
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.85 * s
    if shape == "triangle":
        return _triangle(dy, dx, s)
    if shape == "star":
        # hexagram: union of an upward and a downward triangle
        return _triangle(dy, dx, s) | _triangle(-dy, dx, s)
    if shape == "cross":
        arm = 0.34 * s
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= s)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= s))
    if shape == "ring":
        r2 = dx * dx + dy * dy
        return (r2 <= s * s) & (r2 >= (0.55 * s) ** 2)
    raise ValueError(f"unknown shape {shape!r}")


def _triangle(dy, dx, s):
    # upward triangle with apex at -s and base at +0.7s
    top, base, half = -s, 0.7 * s, 0.95 * s
    below_apex = dy >= top
    above_base = dy <= base
    # sides: interpolate half-width linearly from 0 at apex to half at base
    frac = (dy - top) / (base - top)
    return below_apex & above_base & (np.abs(dx) <= frac * half)


def _texture_pixels(texture, mask, color, yy, xx):
    """Per-pixel uint8 colors inside the mask for the given fill texture."""
    color = color.astype(np.float64)
    out = np.zeros((*mask.shape, 3), dtype=np.float64)
    if texture == "solid":
        out[mask] = color
    elif texture == "striped":
        band = ((yy + xx) // 3) % 2 == 0
        out[mask & band] = color
        out[mask & ~band] = color * 0.45
    elif texture == "dotted":
        dot = ((yy % 4) < 2) & ((xx % 4) < 2)
        out[mask & ~dot] = color * 0.55
        out[mask & dot] = np.minimum(color * 1.25, 255.0)
    else:
        raise ValueError(f"unknown texture {texture!r}")
    return out


def generate_scene(rng, taxonomy: CategoryTaxonomy, config: ShapeworldConfig, split: str) -> ImageRecord:
    """Draw one scene. Later instances occlude earlier ones; instances whose
    visible region vanishes are dropped, and a scene with no survivors is
    regenerated (bounded retries)."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be train or test, got {split!r}")
    if split == "train":
        pool = sorted(taxonomy.known | taxonomy.seen)
    else:
        pool = sorted(taxonomy.all_ids())
    size = config.image_size
    yy, xx = np.mgrid[0:size, 0:size]
    vocab = category_vocabulary()

    for _ in range(20):
        n_inst = int(rng.integers(config.min_instances, config.max_instances + 1))
        bg = float(rng.integers(10, 61))
        canvas = np.clip(bg + rng.uniform(-8, 8, size=(size, size, 1)), 0, 255)
        canvas = np.repeat(canvas, 3, axis=2)
        owner = np.full((size, size), -1, dtype=np.int64)
        drawn = []
        for idx in range(n_inst):
            class_id = int(pool[rng.integers(0, len(pool))])
            shape, texture = vocab[class_id - 1].split("_")
            s = rng.uniform(0.09, 0.22) * size
            cy = rng.uniform(s, size - s)
            cx = rng.uniform(s, size - s)
            mask = _shape_mask(shape, size, cy, cx, s)
            if not mask.any():
                continue
            color = rng.integers(90, 256, size=3)
            pix = _texture_pixels(texture, mask, color, yy, xx)
            canvas[mask] = pix[mask]
            owner[mask] = idx
            drawn.append(class_id)
        instances = []
        for idx, class_id in enumerate(drawn):
            visible = owner == idx
            area = int(visible.sum())
            if area == 0:
                continue
            annotated = True
            if split == "train" and class_id in taxonomy.seen:
                annotated = False
            instances.append(InstanceAnn(mask=visible, class_id=class_id, annotated=annotated, area=area))
        if instances:
            pixels = (np.round(canvas).astype(np.uint8) / np.float32(255.0)).astype(np.float32)
            weak = sorted({i.class_id for i in instances if not i.annotated})
            return ImageRecord(image_id=-1, pixels=pixels, instances=instances, split=split, weak_labels=weak)
    raise PlacementFailedError("no instance survived after 20 attempts")


def generate_dataset(config: ShapeworldConfig, n_train: int, n_test: int):
    """Taxonomy plus train and test record lists, ids assigned sequentially."""
    taxonomy = build_taxonomy(config)
    rng = np.random.default_rng(config.seed + 1)
    train, test = [], []
    for i in range(n_train):
        rec = generate_scene(rng, taxonomy, config, "train")
        rec.image_id = i
        train.append(rec)
    for i in range(n_test):
        rec = generate_scene(rng, taxonomy, config, "test")
        rec.image_id = n_train + i
        test.append(rec)
    for rec in train + test:
        present = {inst.class_id for inst in rec.instances}
        for cid in present:
            taxonomy.frequency[cid] = taxonomy.frequency.get(cid, 0) + 1
    return taxonomy, train, test


def export_coco(records, taxonomy: CategoryTaxonomy, path, images_path=None):
    """Write a COCO-style JSON document for the given records.

    Train-split records emit only annotated instances; every train image
    additionally carries a ``weak_labels`` list with the class ids that are
    present in the pixels but unannotated.  When ``images_path`` is given the
    pixel rasters are saved there as a ``.npz`` keyed by image id.
    """
    if not records:
        raise ValueError("records must be non-empty")
    images, annotations = [], []
    ann_id = 1
    for rec in records:
        h, w = rec.pixels.shape[:2]
        entry = {"id": int(rec.image_id), "width": int(w), "height": int(h)}
        if rec.split == "train":
            entry["weak_labels"] = sorted({int(i.class_id) for i in rec.instances if not i.annotated})
        images.append(entry)
        for inst in rec.instances:
            if rec.split == "train" and not inst.annotated:
                continue
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": int(rec.image_id),
                    "category_id": int(inst.class_id),
                    "segmentation": rle_encode(inst.mask),
                    "area": int(inst.area),
                    "bbox": mask_bbox(inst.mask),
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    categories = [{"id": int(cid), "name": taxonomy.names.get(cid, str(cid))} for cid in sorted(taxonomy.all_ids())]
    save_json({"images": images, "annotations": annotations, "categories": categories}, path)
    if images_path is not None:
        arrays = {str(rec.image_id): np.round(rec.pixels * 255.0).astype(np.uint8) for rec in records}
        np.savez_compressed(images_path, **arrays)


def export_taxonomy(taxonomy: CategoryTaxonomy, path):
    save_json(
        {
            "known": sorted(int(i) for i in taxonomy.known),
            "seen": sorted(int(i) for i in taxonomy.seen),
            "unseen": sorted(int(i) for i in taxonomy.unseen),
            "names": {str(k): v for k, v in sorted(taxonomy.names.items())},
        },
        path,
    )


def taxonomy_from_json(doc) -> CategoryTaxonomy:
    names = {int(k): v for k, v in doc.get("names", {}).items()}
    return CategoryTaxonomy(
        known=set(doc["known"]),
        seen=set(doc["seen"]),
        unseen=set(doc["unseen"]),
        names=names,
    )


def import_records(doc, images_npz_paths, split) -> list:
    """Rebuild ImageRecords from a COCO-style doc plus pixel archives."""
    pixel_map = {}
    for path in images_npz_paths:
        if not os.path.exists(path):
            continue
        with np.load(path) as npz:
            for key in npz.files:
                pixel_map[int(key)] = npz[key]
    records = []
    for img in doc["images"]:
        if img["id"] not in pixel_map:
            raise FormatError(f"no pixels stored for image {img['id']}")
        pixels = (pixel_map[img["id"]] / np.float32(255.0)).astype(np.float32)
        records.append(
            ImageRecord(
                image_id=img["id"],
                pixels=pixels,
                instances=[],
                split=split,
                weak_labels=list(img.get("weak_labels", [])),
            )
        )
    by_id = {rec.image_id: rec for rec in records}
    for ann in doc["annotations"]:
        mask = rle_decode(ann["segmentation"])
        by_id[ann["image_id"]].instances.append(
            InstanceAnn(mask=mask, class_id=int(ann["category_id"]), annotated=True, area=int(ann["area"]))
        )
    return records
