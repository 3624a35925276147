"""Rebuild known/seen/unseen train-test splits from COCO-format annotations.

Train images containing any unseen-class instance move, with all their
annotations, to the test document; remaining train annotations are then
restricted to known classes.  Seen classes are everything left over in the
categories table.

Ratio-driven unseen selection accumulates the rarest classes until the
fraction of train images slated for removal is closest to the target.  On a
long-tailed source with a thousand-plus categories and ~100k train images, a
1% target typically selects a few hundred rarest classes; the fixtures here
are a few hundred images.
"""

from dataclasses import dataclass, field

from .errors import RatioUnreachableError


@dataclass
class SplitStats:
    train_classes: dict = field(default_factory=dict)  # subset -> class count
    train_instances: dict = field(default_factory=dict)
    test_classes: dict = field(default_factory=dict)
    test_instances: dict = field(default_factory=dict)

    def as_rows(self):
        rows = []
        for subset in ("known", "seen"):
            rows.append(("train", subset, self.train_classes.get(subset, 0), self.train_instances.get(subset, 0)))
        for subset in ("known", "seen", "unseen"):
            rows.append(("test", subset, self.test_classes.get(subset, 0), self.test_instances.get(subset, 0)))
        return rows


@dataclass
class SplitPlan:
    known_classes: list
    unseen_classes: list
    removed_train_images: list
    stats: SplitStats


def class_image_frequency(doc) -> dict:
    """class id -> number of images containing at least one instance of it."""
    seen_pairs = set()
    freq = {}
    for ann in doc["annotations"]:
        key = (ann["category_id"], ann["image_id"])
        if key in seen_pairs:
            continue
        seen_pairs.add(key)
        freq[ann["category_id"]] = freq.get(ann["category_id"], 0) + 1
    return freq


def select_unseen_by_ratio(train_doc, known_classes, ratio) -> list:
    """Accumulate the rarest non-known classes until the fraction of train
    images slated for removal is closest to ``ratio``.

    Classes are ordered by ascending image frequency, ties by ascending id.
    The selection stops at the first prefix whose removal fraction reaches
    the target; if the previous prefix is strictly nearer the target it is
    returned instead (never an empty prefix).
    """
    if not 0 < ratio < 1:
        raise ValueError("ratio must be in (0, 1)")
    known = set(known_classes)
    freq = class_image_frequency(train_doc)
    candidates = sorted(
        (cid for cid in freq if cid not in known),
        key=lambda cid: (freq[cid], cid),
    )
    if not candidates:
        raise RatioUnreachableError("no non-known classes present in the train annotations")

    images_of = {}
    for ann in train_doc["annotations"]:
        images_of.setdefault(ann["category_id"], set()).add(ann["image_id"])
    n_images = len(train_doc["images"])
    if n_images == 0:
        raise RatioUnreachableError("train document has no images")

    removed = set()
    fractions = []  # fraction after including candidates[:k+1]
    for cid in candidates:
        removed |= images_of[cid]
        fractions.append(len(removed) / n_images)

    if fractions[-1] < ratio:
        raise RatioUnreachableError(
            f"removing all {len(candidates)} non-known classes deletes only "
            f"{fractions[-1]:.4f} of train images, below the target {ratio}"
        )
    k = next(i for i, frac in enumerate(fractions) if frac >= ratio)
    if k > 0 and abs(fractions[k - 1] - ratio) < abs(fractions[k] - ratio):
        k -= 1
    return candidates[: k + 1]


def rebuild_splits(train_doc, test_doc, known_classes, unseen_classes):
    """Move unseen-bearing train images to test and strip non-known train
    annotations.  Returns (train', test', SplitPlan)."""
    known = set(known_classes)
    unseen = set(unseen_classes)
    if known & unseen:
        raise ValueError(f"known and unseen overlap: {sorted(known & unseen)}")

    category_ids = {c["id"] for c in train_doc["categories"]} | {c["id"] for c in test_doc["categories"]}
    seen = category_ids - known - unseen

    unseen_images = {
        ann["image_id"] for ann in train_doc["annotations"] if ann["category_id"] in unseen
    }
    removed = sorted(unseen_images)

    kept_images = [img for img in train_doc["images"] if img["id"] not in unseen_images]
    moved_images = [img for img in train_doc["images"] if img["id"] in unseen_images]

    kept_anns, moved_anns = [], []
    train_subset_instances = {"known": 0, "seen": 0}
    train_subset_classes = {"known": set(), "seen": set()}
    for ann in train_doc["annotations"]:
        if ann["image_id"] in unseen_images:
            moved_anns.append(ann)
            continue
        cid = ann["category_id"]
        if cid in known:
            kept_anns.append(ann)
            train_subset_instances["known"] += 1
            train_subset_classes["known"].add(cid)
        elif cid in seen:
            train_subset_instances["seen"] += 1
            train_subset_classes["seen"].add(cid)
        # annotations of unseen classes on kept images cannot exist by construction

    categories = sorted(
        {c["id"]: c for doc in (train_doc, test_doc) for c in doc["categories"]}.values(),
        key=lambda c: c["id"],
    )
    max_test_ann = max((ann["id"] for ann in test_doc["annotations"]), default=0)
    moved_anns = [dict(ann, id=max_test_ann + i + 1) for i, ann in enumerate(moved_anns)]

    # moved images keep any weak-label side information out of the test doc
    moved_images = [{k: v for k, v in img.items() if k != "weak_labels"} for img in moved_images]

    train_out = {"images": kept_images, "annotations": kept_anns, "categories": categories}
    test_out = {
        "images": test_doc["images"] + moved_images,
        "annotations": test_doc["annotations"] + moved_anns,
        "categories": categories,
    }

    stats = SplitStats()
    stats.train_classes = {k: len(v) for k, v in train_subset_classes.items()}
    stats.train_instances = dict(train_subset_instances)
    test_cls = {"known": set(), "seen": set(), "unseen": set()}
    test_ins = {"known": 0, "seen": 0, "unseen": 0}
    for ann in test_out["annotations"]:
        cid = ann["category_id"]
        subset = "known" if cid in known else ("unseen" if cid in unseen else "seen")
        test_cls[subset].add(cid)
        test_ins[subset] += 1
    stats.test_classes = {k: len(v) for k, v in test_cls.items()}
    stats.test_instances = test_ins

    plan = SplitPlan(
        known_classes=sorted(known),
        unseen_classes=sorted(unseen),
        removed_train_images=removed,
        stats=stats,
    )
    return train_out, test_out, plan


def validate_split(train_doc, known_classes, unseen_classes, seen_classes=None) -> list:
    """Exhaustively scan a train document for split violations.

    Returns a list of violation strings: an annotation of an unseen class,
    or an annotation of a seen class (seen objects must be unannotated).
    """
    known = set(known_classes)
    unseen = set(unseen_classes)
    if seen_classes is None:
        category_ids = {c["id"] for c in train_doc["categories"]}
        seen = category_ids - known - unseen
    else:
        seen = set(seen_classes)
    violations = []
    for ann in train_doc["annotations"]:
        cid = ann["category_id"]
        if cid in unseen:
            violations.append(
                f"annotation {ann['id']} on image {ann['image_id']}: unseen class {cid} in train"
            )
        elif cid in seen:
            violations.append(
                f"annotation {ann['id']} on image {ann['image_id']}: seen class {cid} is annotated"
            )
    return violations


def stats_tsv(stats: SplitStats) -> str:
    lines = ["split\tsubset\tn_cls\tn_ins"]
    for row in stats.as_rows():
        lines.append("\t".join(str(x) for x in row))
    return "\n".join(lines) + "\n"
