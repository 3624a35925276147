"""COCO-style annotation interchange: run-length masks and JSON readers.

Masks are serialized as uncompressed run-length encoding over row-major
pixel order: ``{"size": [H, W], "counts": [c0, c1, ...]}`` where ``c0``
counts leading zeros, ``c1`` the ones that follow, and so on.  This is
deliberately not the compressed column-major encoding used by the original
COCO toolkit; it is bit-exact and dependency-free.
"""

import json

import numpy as np

from .errors import FormatError


def rle_encode(mask) -> dict:
    """Encode a binary HxW mask. Counts start with the zero run (may be 0)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    flat = mask.reshape(-1).astype(np.uint8)
    # run boundaries
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [flat.size]])
    counts = (ends - starts).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    if not flat.size:
        counts = []
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    """Decode back to a boolean HxW mask."""
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    val = False
    for count in rle["counts"]:
        if val:
            flat[pos : pos + count] = True
        pos += count
        val = not val
    if pos != h * w:
        raise FormatError(f"RLE counts sum to {pos}, expected {h * w}")
    return flat.reshape(h, w)


def rle_area(rle: dict) -> int:
    """Foreground pixel count, straight from the counts."""
    return int(sum(rle["counts"][1::2]))


def mask_bbox(mask) -> list:
    """[x, y, w, h] bounding box of a boolean mask (zeros for empty)."""
    ys, xs = np.where(mask)
    if xs.size == 0:
        return [0, 0, 0, 0]
    return [int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)]


def load_json(path):
    """Parse a JSON file, reporting the byte offset on syntax errors."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise FormatError(str(exc), path=str(path)) from exc
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FormatError(exc.msg, path=str(path), offset=exc.pos, json_path="$") from exc


def load_coco(path) -> dict:
    """Load and structurally validate a COCO-style annotation document.

    Returns the parsed dict. Raises FormatError with a JSON path for
    missing or mistyped fields.
    """
    doc = load_json(path)
    if not isinstance(doc, dict):
        raise FormatError("top-level value must be an object", path=str(path), json_path="$")
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise FormatError(f"missing key {key!r}", path=str(path), json_path=f"$.{key}")
        if not isinstance(doc[key], list):
            raise FormatError(f"{key!r} must be an array", path=str(path), json_path=f"$.{key}")
    for i, img in enumerate(doc["images"]):
        for key in ("id", "width", "height"):
            if not isinstance(img.get(key), int):
                raise FormatError(
                    "image entry needs integer " + key,
                    path=str(path),
                    json_path=f"$.images[{i}].{key}",
                )
    image_ids = {img["id"] for img in doc["images"]}
    for i, ann in enumerate(doc["annotations"]):
        for key in ("id", "image_id", "category_id"):
            if not isinstance(ann.get(key), int):
                raise FormatError(
                    "annotation entry needs integer " + key,
                    path=str(path),
                    json_path=f"$.annotations[{i}].{key}",
                )
        if ann["image_id"] not in image_ids:
            raise FormatError(
                f"annotation references unknown image {ann['image_id']}",
                path=str(path),
                json_path=f"$.annotations[{i}].image_id",
            )
    return doc


def save_json(doc, path):
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_taxonomy_json(path) -> dict:
    """Load the sidecar taxonomy file: {"known": [...], "seen": [...], "unseen": [...]}."""
    doc = load_json(path)
    for key in ("known", "seen", "unseen"):
        if key not in doc or not isinstance(doc[key], list):
            raise FormatError(f"taxonomy needs list {key!r}", path=str(path), json_path=f"$.{key}")
    return doc
