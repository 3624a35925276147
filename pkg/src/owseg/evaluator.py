"""Class-wise mean Average Recall over IoU thresholds 0.50 to 0.95.

For each class, every class-agnostic prediction competes for that class's
ground-truth instances; recall is pooled over images and averaged over the
ten thresholds.  Per-class values are then averaged inside each taxonomy
subset, which keeps rare classes from being drowned out by frequent ones.
Classes with no ground truth in the test set are excluded from the means.
"""

from dataclasses import dataclass, field

import numpy as np

IOU_THRESHOLDS = (0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95)
TOP_N = 100

# COCO size boundaries at the 1024x1024 reference scale, rescaled linearly
# to the evaluated image's pixel area
SMALL_AREA_1024 = 32.0**2
MEDIUM_AREA_1024 = 96.0**2
REFERENCE_AREA = 1024.0**2


def mask_iou(a, b) -> float:
    """Intersection over union of two binary masks (0.0 when both empty)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class EvalSample:
    """Predictions and ground truth of one image, predictions sorted by
    descending score and truncated to TOP_N."""

    image_id: int
    iou: np.ndarray  # (n_pred, n_gt)
    gt_classes: np.ndarray  # (n_gt,)
    gt_areas: np.ndarray  # (n_gt,)
    image_area: int


def make_sample(image_id, pred_masks, scores, gt_masks, gt_classes, image_area=None, top_n=TOP_N):
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")[:top_n]
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    n_p, n_g = len(order), len(gt_classes)
    iou = np.zeros((n_p, n_g))
    if n_p and n_g:
        preds = np.stack([np.asarray(pred_masks[i], dtype=bool).reshape(-1) for i in order])
        gts = np.stack([np.asarray(m, dtype=bool).reshape(-1) for m in gt_masks])
        inter = preds.astype(np.int64) @ gts.T.astype(np.int64)
        areas_p = preds.sum(axis=1)
        areas_g = gts.sum(axis=1)
        union = areas_p[:, None] + areas_g[None, :] - inter
        with np.errstate(invalid="ignore"):
            iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    gt_areas = np.array([int(np.asarray(m, dtype=bool).sum()) for m in gt_masks], dtype=np.int64)
    if image_area is None:
        image_area = int(np.asarray(gt_masks[0]).size) if n_g else 0
    return EvalSample(image_id, iou, gt_classes, gt_areas, image_area)


def greedy_matched_count(iou, gt_cols, threshold) -> int:
    """Greedy matching in descending score order: each prediction takes the
    still-available gt with the highest IoU at or above the threshold."""
    available = list(gt_cols)
    matched = 0
    for p in range(iou.shape[0]):
        if not available:
            break
        row = iou[p]
        best_j, best_v = -1, -1.0
        for j in available:
            v = row[j]
            if v >= threshold and v > best_v:
                best_v, best_j = v, j
        if best_j >= 0:
            available.remove(best_j)
            matched += 1
    return matched


def recall_over_samples(samples, col_selector, thresholds=IOU_THRESHOLDS):
    """Mean recall over thresholds for the gt columns picked per sample by
    col_selector; None when the selector matches no ground truth at all."""
    per_sample_cols = [(s, col_selector(s)) for s in samples]
    total_gt = sum(len(cols) for _, cols in per_sample_cols)
    if total_gt == 0:
        return None
    recalls = []
    for t in thresholds:
        matched = sum(greedy_matched_count(s.iou, cols, t) for s, cols in per_sample_cols if cols)
        recalls.append(matched / total_gt)
    return float(np.mean(recalls))


def per_class_ar(samples, class_id, thresholds=IOU_THRESHOLDS):
    """AR of one class: all predictions vs that class's instances."""
    return recall_over_samples(
        samples, lambda s: np.flatnonzero(s.gt_classes == class_id).tolist(), thresholds
    )


def size_bucket_ar(samples, thresholds=IOU_THRESHOLDS):
    """Class-agnostic AR over small / medium / large instances; boundaries are
    the COCO cutoffs rescaled to each image's own area. Empty buckets report
    None."""

    def bucket_cols(sample, lo, hi):
        scale = sample.image_area / REFERENCE_AREA
        lo_px, hi_px = lo * scale, hi * scale
        return np.flatnonzero((sample.gt_areas >= lo_px) & (sample.gt_areas < hi_px)).tolist()

    ar_s = recall_over_samples(samples, lambda s: bucket_cols(s, 0.0, SMALL_AREA_1024), thresholds)
    ar_m = recall_over_samples(samples, lambda s: bucket_cols(s, SMALL_AREA_1024, MEDIUM_AREA_1024), thresholds)
    ar_l = recall_over_samples(samples, lambda s: bucket_cols(s, MEDIUM_AREA_1024, np.inf), thresholds)
    return ar_s, ar_m, ar_l


@dataclass
class ARReport:
    per_class: dict = field(default_factory=dict)  # class id -> AR (classes with gt only)
    ar_all: float = None
    ar_known: float = None
    ar_seen: float = None
    ar_unseen: float = None
    ar_s: float = None
    ar_m: float = None
    ar_l: float = None
    counts: dict = field(default_factory=dict)  # subset -> (n_classes, n_instances)

    def to_json(self):
        return {
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "ar_all": self.ar_all,
            "ar_known": self.ar_known,
            "ar_seen": self.ar_seen,
            "ar_unseen": self.ar_unseen,
            "ar_s": self.ar_s,
            "ar_m": self.ar_m,
            "ar_l": self.ar_l,
            "counts": {k: list(v) for k, v in self.counts.items()},
        }


def subset_report(per_class, taxonomy, size_ars=(None, None, None), counts=None) -> ARReport:
    """Average per-class AR values inside each taxonomy subset."""

    def mean_over(ids):
        vals = [per_class[c] for c in ids if c in per_class]
        return float(np.mean(vals)) if vals else None

    report = ARReport(per_class=dict(per_class))
    report.ar_all = mean_over(sorted(per_class))
    report.ar_known = mean_over(sorted(taxonomy.known))
    report.ar_seen = mean_over(sorted(taxonomy.seen))
    report.ar_unseen = mean_over(sorted(taxonomy.unseen))
    report.ar_s, report.ar_m, report.ar_l = size_ars
    if counts:
        report.counts = counts
    return report


def evaluate(samples, taxonomy) -> ARReport:
    """Full evaluation: per-class ARs, subset means, size buckets."""
    present = sorted({int(c) for s in samples for c in s.gt_classes})
    per_class = {}
    for c in present:
        value = per_class_ar(samples, c)
        if value is not None:
            per_class[c] = value
    counts = {}
    for name, ids in (("known", taxonomy.known), ("seen", taxonomy.seen), ("unseen", taxonomy.unseen)):
        n_ins = sum(int((s.gt_classes == c).sum()) for s in samples for c in ids)
        counts[name] = (len([c for c in ids if c in per_class]), n_ins)
    return subset_report(per_class, taxonomy, size_bucket_ar(samples), counts)


def format_report_row(label, report: ARReport) -> str:
    def fmt(v):
        return f"{100.0 * v:6.1f}" if v is not None else "     -"

    cells = [fmt(report.ar_all), fmt(report.ar_known), fmt(report.ar_seen), fmt(report.ar_unseen),
             fmt(report.ar_s), fmt(report.ar_m), fmt(report.ar_l)]
    return f"{label:<24s}" + " ".join(cells)


REPORT_HEADER = f"{'run':<24s}" + " ".join(f"{h:>6s}" for h in ("AR_all", "AR_kn", "AR_se", "AR_un", "AR_s", "AR_m", "AR_l"))
