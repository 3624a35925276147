"""Prompt-driven inference: few-shot segmentation from support masks and
text-embedding-driven class prompting."""

from dataclasses import dataclass

import numpy as np
import torch

from .coco import load_json
from .errors import EmptySupportsError, FormatError, UnknownClassError
from .trainer import Trainer, TrainConfig


@dataclass
class SupportSet:
    """A handful of (image, mask) exemplars of one class."""

    items: list  # (pixels float HxWx3 in [0,1], mask bool HxW)
    class_name: str = ""

    def __post_init__(self):
        for i, (pixels, mask) in enumerate(self.items):
            if not np.asarray(mask).any():
                raise ValueError(f"support {i} has an empty mask")


class TextEmbeddingTable:
    """class name -> fixed embedding vector, loaded from a JSON file that
    records its own dimension."""

    def __init__(self, vectors: dict, dim: int):
        self.dim = int(dim)
        self.vectors = {}
        for name, vec in vectors.items():
            arr = np.asarray(vec, dtype=np.float32)
            if arr.shape != (self.dim,):
                raise FormatError(f"vector for {name!r} has shape {arr.shape}, expected ({self.dim},)")
            self.vectors[name] = arr

    def __contains__(self, name):
        return name in self.vectors

    def get(self, name):
        if name not in self.vectors:
            raise UnknownClassError(f"no text embedding for class {name!r}")
        return self.vectors[name]

    @classmethod
    def load(cls, path):
        doc = load_json(path)
        if "dim" not in doc or "vectors" not in doc:
            raise FormatError("embedding file needs 'dim' and 'vectors'", path=str(path), json_path="$")
        return cls(doc["vectors"], doc["dim"])

    def save(self, path):
        import json

        with open(path, "w") as fh:
            json.dump({"dim": self.dim, "vectors": {k: v.tolist() for k, v in self.vectors.items()}}, fh)


def make_synthetic_table(names, dim=32, seed=0) -> TextEmbeddingTable:
    """Random but fixed per-name vectors; stands in for a real text encoder."""
    rng = np.random.default_rng(seed)
    return TextEmbeddingTable({name: rng.normal(size=dim).astype(np.float32) for name in sorted(names)}, dim)


@torch.no_grad()
def few_shot_extract(model, supports: SupportSet, momentum=0.9, order_averaged=False):
    """Distill one prompt vector from the supports.

    Each support runs through the example branch; outputs fold through the
    cache update rule (first support copied, later ones blended with the
    given momentum), so the result depends on support order. The
    order-averaged variant takes the plain mean instead, which equals the
    momentum fold averaged over all support orderings.
    """
    if not supports.items:
        raise EmptySupportsError("need at least one support")
    outputs = []
    for pixels, mask in supports.items:
        px = torch.as_tensor(np.asarray(pixels, dtype=np.float32))
        mk = torch.as_tensor(np.asarray(mask, dtype=bool)).unsqueeze(0)
        ex = model.extract_prompts(px, mk)
        outputs.append(ex.queries[0].detach())
    if order_averaged:
        return torch.stack(outputs).mean(dim=0)
    prompt = outputs[0]
    for e in outputs[1:]:
        prompt = momentum * prompt + (1.0 - momentum) * e
    return prompt


@torch.no_grad()
def prompt_infer(model, pixels, prompt_vector, class_embedding=None, k=None, score_threshold=0.5):
    """Segment one image with a supplied prompt vector; returns the candidate
    branch's masks and scores for predictions above the score threshold."""
    px = torch.as_tensor(np.asarray(pixels, dtype=np.float32)).unsqueeze(0)
    mask_logits, score_logits = model.forward_prompt_infer(px, prompt_vector, class_embedding, k=k)
    scores = torch.sigmoid(score_logits[0])
    keep = scores > score_threshold
    masks = (mask_logits[0] > 0)[keep]
    return masks.cpu().numpy(), scores[keep].cpu().numpy()


@torch.no_grad()
def text_prompt_infer(model, pixels, table: TextEmbeddingTable, class_names, score_threshold=0.0):
    """Per-class masks and scores from fixed text embeddings; one candidate
    query per requested class (the text-prompt training mode uses K=1)."""
    results = {}
    if not class_names:
        return results
    if not model.text_mode:
        raise ValueError("model was not trained in text-prompt mode")
    px = torch.as_tensor(np.asarray(pixels, dtype=np.float32)).unsqueeze(0)
    d = model.config.width
    for name in class_names:
        vec = torch.as_tensor(table.get(name))
        s = model.text_proj(vec) if model.text_proj is not None else vec
        zero_prompt = torch.zeros(d)
        mask_logits, score_logits = model.forward_prompt_infer(px, zero_prompt, s, k=1)
        scores = torch.sigmoid(score_logits[0])
        keep = scores > score_threshold
        results[name] = ((mask_logits[0] > 0)[keep].cpu().numpy(), scores[keep].cpu().numpy())
    return results


def train_with_image_level_labels(config: TrainConfig, taxonomy, train_records, test_records=None, text_table=None):
    """Training variant where seen classes carry image-level presence labels:
    their candidate queries receive objectness supervision only. With no
    weak labels in the data this reduces exactly to the standard trainer."""
    cfg = TrainConfig(**{**config.__dict__, "use_weak_labels": True})
    return Trainer(cfg, taxonomy, train_records, test_records, text_table=text_table)
