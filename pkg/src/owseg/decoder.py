"""Three-branch mask decoder over a small convolutional scene encoder.

The class-agnostic branch refines learned queries with mask-restricted cross
attention and self attention; it is the only branch that runs at inference.
The example branch distills per-instance prompt vectors from ground-truth
masks into a momentum cache.  The candidate branch seeds per-class queries
from cached prompt plus learned intra-class and class embeddings, and updates
them with reference attention against the baseline queries.  All attention,
feed-forward, and head weights are shared across the three branches.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .attention import (
    MultiHeadAttention,
    example_masked_attention,
    grouped_reference_attention,
    masked_attention,
    pool_mask_to_grid,
)
from .errors import ShapeMismatchError, UnknownClassError


@dataclass
class DecoderConfig:
    width: int = 64
    mask_dim: int = 16
    n_heads: int = 4
    n_layers: int = 3
    n_queries: int = 100
    c_max: int = 30
    k_per_class: int = 10
    momentum: float = 0.9
    max_example_queries: int = 5
    min_mask_area_fraction: float = 100 / 1024**2

    def __post_init__(self):
        if self.n_queries < 1 or self.c_max < 1 or self.k_per_class < 1:
            raise ValueError("query budget fields must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")


class PromptCache:
    """Per-class moving-average prompt vectors.

    Not a parameter: entries are plain buffers updated between steps; reads
    hand out detached copies so no gradient ever reaches the cache.
    """

    def __init__(self, class_ids, width, momentum=0.9, dtype=torch.float32):
        self.class_ids = [int(c) for c in class_ids]
        self.index = {c: i for i, c in enumerate(self.class_ids)}
        self.momentum = momentum
        self.vectors = torch.zeros(len(self.class_ids), width, dtype=dtype)
        self.counts = torch.zeros(len(self.class_ids), dtype=torch.long)

    def get(self, class_id):
        if class_id not in self.index:
            raise UnknownClassError(f"class {class_id} not in prompt cache")
        return self.vectors[self.index[class_id]].detach().clone()

    def update(self, class_id, vector):
        """Cold start copies the vector; warm entries move by momentum."""
        if class_id not in self.index:
            raise UnknownClassError(f"class {class_id} not in prompt cache")
        i = self.index[class_id]
        vector = vector.detach().to(self.vectors.dtype)
        if vector.shape != self.vectors[i].shape:
            raise ShapeMismatchError(f"prompt vector shape {tuple(vector.shape)}")
        if self.counts[i] == 0:
            self.vectors[i] = vector
        else:
            m = self.momentum
            self.vectors[i] = m * self.vectors[i] + (1.0 - m) * vector
        self.counts[i] += 1

    def snapshot(self):
        clone = PromptCache(self.class_ids, self.vectors.shape[1], self.momentum, self.vectors.dtype)
        clone.vectors = self.vectors.clone()
        clone.counts = self.counts.clone()
        return clone

    def zero_(self):
        self.vectors.zero_()
        self.counts.zero_()


def update_prompt_cache(cache: PromptCache, class_id, vector):
    cache.update(class_id, vector)
    return cache


@dataclass
class BranchState:
    mask_logits: list  # one (..., n, H, W) tensor per prediction point
    scores: list  # one (..., n) tensor per prediction point
    queries: torch.Tensor  # final-layer queries


@dataclass
class ExampleState:
    classes: list  # class id per example query
    instance_idx: list  # index of the source instance in the image's gt list
    mask_logits: list  # per layer (n_e, H, W)
    scores: list  # per layer (n_e,)
    queries: torch.Tensor  # (n_e, D) final layer, the extracted prompts


@dataclass
class DecoderState:
    baseline: BranchState
    example: list = field(default_factory=list)  # one ExampleState per image (may be empty)
    prompt: BranchState = None
    prompt_classes: list = field(default_factory=list)  # per image, C_sel selected class ids


class ChannelNorm(nn.Module):
    """LayerNorm over channels at each spatial position. Unlike GroupNorm it
    has no image-wide statistics, so the encoder stays local and far-away
    pixels cannot leak into a mask's feature cells."""

    def __init__(self, channels):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):  # (B, C, H, W)
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class SceneEncoder(nn.Module):
    """Four stride-halving conv blocks to an 8x-downsampled feature map, plus
    a lightweight upsampling path producing the per-pixel mask embeddings."""

    def __init__(self, width, mask_dim):
        super().__init__()
        self.b1 = nn.Sequential(nn.Conv2d(3, 16, 3, 2, 1), ChannelNorm(16), nn.GELU())
        self.b2 = nn.Sequential(nn.Conv2d(16, 32, 3, 2, 1), ChannelNorm(32), nn.GELU())
        self.b3 = nn.Sequential(nn.Conv2d(32, 64, 3, 2, 1), ChannelNorm(64), nn.GELU())
        self.b4 = nn.Sequential(nn.Conv2d(64, width, 3, 1, 1), ChannelNorm(width), nn.GELU())
        self.lat = nn.Conv2d(16, mask_dim, 1)
        self.top = nn.Conv2d(width, mask_dim, 1)
        self.mix = nn.Conv2d(mask_dim, mask_dim, 3, 1, 1)
        self.out = nn.Conv2d(mask_dim, mask_dim, 1)

    def forward(self, pixels):
        """pixels: (B, H, W, 3) in [0, 1] -> features (B, h, w, D), mask
        embeddings (B, H, W, mask_dim)."""
        if pixels.dim() != 4 or pixels.shape[-1] != 3:
            raise ShapeMismatchError(f"expected (B, H, W, 3), got {tuple(pixels.shape)}")
        h, w = pixels.shape[1], pixels.shape[2]
        if h % 8 or w % 8:
            raise ShapeMismatchError(f"image size {h}x{w} not divisible by 8")
        x = pixels.permute(0, 3, 1, 2)
        c1 = self.b1(x)
        c3 = self.b3(self.b2(c1))
        feat = self.b4(c3)
        m = self.lat(c1) + F.interpolate(self.top(feat), size=c1.shape[-2:], mode="bilinear", align_corners=False)
        m = self.mix(F.gelu(m))
        m = F.interpolate(m, size=(h, w), mode="bilinear", align_corners=False)
        m = self.out(m)
        return feat.permute(0, 2, 3, 1), m.permute(0, 2, 3, 1)


class DecoderLayer(nn.Module):
    def __init__(self, width, n_heads):
        super().__init__()
        self.cross = MultiHeadAttention(width, n_heads)
        self.self_attn = MultiHeadAttention(width, n_heads)
        self.ffn = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))
        self.norm_cross = nn.LayerNorm(width)
        self.norm_self = nn.LayerNorm(width)
        self.norm_ffn = nn.LayerNorm(width)


def select_example_instances(masks, class_ids, image_hw, max_n=5, min_area_fraction=100 / 1024**2):
    """Pick up to max_n instances for prompt extraction.

    Instances below the area threshold are dropped (their pooled mask would
    vanish on the feature grid). One representative per distinct class comes
    first, largest area each, classes ordered by representative area; any
    remaining slots fill by descending area. Returns instance indices.
    """
    h, w = image_hw
    min_area = min_area_fraction * h * w
    areas = [int(np.asarray(m).sum()) for m in masks]
    eligible = [i for i, a in enumerate(areas) if a >= min_area]
    by_class = {}
    for i in eligible:
        c = int(class_ids[i])
        best = by_class.get(c)
        if best is None or (areas[i], -i) > (areas[best], -best):
            by_class[c] = i
    reps = sorted(by_class.values(), key=lambda i: (-areas[i], class_ids[i], i))
    chosen = reps[:max_n]
    if len(chosen) < max_n:
        rest = sorted((i for i in eligible if i not in chosen), key=lambda i: (-areas[i], i))
        chosen = chosen + rest[: max_n - len(chosen)]
    return chosen


def select_prompt_classes(gt_classes, c_max, rng, universe):
    """Distinct gt classes first (random truncation to c_max if over budget),
    then distinct negatives drawn uniformly from the remaining universe."""
    if c_max < 1:
        raise ValueError("c_max must be >= 1")
    positives = sorted({int(c) for c in gt_classes})
    if len(positives) > c_max:
        keep = rng.choice(len(positives), size=c_max, replace=False)
        positives = sorted(positives[i] for i in keep)
    pool = sorted(set(universe) - set(positives))
    n_neg = min(c_max - len(positives), len(pool))
    negatives = []
    if n_neg > 0:
        idx = rng.choice(len(pool), size=n_neg, replace=False)
        negatives = [pool[i] for i in sorted(idx)]
    return positives + negatives


class Segmenter(nn.Module):
    """Encoder, shared decoder stack, prediction heads, and the prompt-branch
    embeddings r (intra-class) and s (class-specific)."""

    def __init__(self, config: DecoderConfig, known_class_ids, text_table=None):
        super().__init__()
        self.config = config
        self.known_class_ids = [int(c) for c in known_class_ids]
        self.class_index = {c: i for i, c in enumerate(self.known_class_ids)}
        d = config.width
        self.encoder = SceneEncoder(d, config.mask_dim)
        self.query_embed = nn.Parameter(torch.randn(config.n_queries, d) * 0.02)
        self.layers = nn.ModuleList(DecoderLayer(d, config.n_heads) for _ in range(config.n_layers))
        self.decoder_norm = nn.LayerNorm(d)
        self.score_head = nn.Linear(d, 1)
        self.mask_head = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, config.mask_dim))
        self.prompt_r = nn.Parameter(torch.randn(config.k_per_class, d) * 0.02)
        if text_table is None:
            self.text_mode = False
            self.prompt_s = nn.Parameter(torch.randn(len(self.known_class_ids), d) * 0.02)
            self.text_proj = None
        else:
            # fixed text vectors replace the learnable class embedding; a
            # linear map reconciles the widths when they differ
            self.text_mode = True
            table = torch.as_tensor(text_table, dtype=torch.float32)
            if table.shape[0] != len(self.known_class_ids):
                raise ShapeMismatchError("one text vector per prompt class required")
            self.register_buffer("text_table", table)
            self.text_proj = nn.Linear(table.shape[1], d) if table.shape[1] != d else None
            self.prompt_s = None

    # -- heads ------------------------------------------------------------

    def encode_image(self, pixels):
        return self.encoder(pixels)

    def predict_masks_scores(self, queries, mask_embed):
        """Mask logits via dot product of projected queries with the per-pixel
        embedding map, scores from a linear head. queries (..., n, D),
        mask_embed (B, H, W, mask_dim) with matching leading batch."""
        x = self.decoder_norm(queries)
        scores = self.score_head(x).squeeze(-1)
        memb = self.mask_head(x)
        if queries.dim() == 2:
            logits = torch.einsum("qd,hwd->qhw", memb, mask_embed)
        else:
            logits = torch.einsum("bqd,bhwd->bqhw", memb, mask_embed)
        return logits, scores

    def class_embedding(self, class_id):
        if class_id not in self.class_index:
            raise UnknownClassError(f"class {class_id} has no prompt embedding")
        i = self.class_index[class_id]
        if self.text_mode:
            vec = self.text_table[i]
            return self.text_proj(vec) if self.text_proj is not None else vec
        return self.prompt_s[i]

    def init_candidate_queries(self, cache: PromptCache, classes):
        """v0[c, k] = cached prompt p_c + intra-class r_k + class embedding s_c.
        The cache read is gradient-free; r and s train normally."""
        groups = []
        for c in classes:
            p_c = cache.get(c).to(self.prompt_r.dtype)
            groups.append(p_c.unsqueeze(0) + self.prompt_r + self.class_embedding(c).unsqueeze(0))
        return torch.stack(groups, dim=0)  # (C, K, D)

    # -- branch runners ----------------------------------------------------

    def _grid_logits(self, mask_logits, grid_hw):
        gh, gw = grid_hw
        h, w = mask_logits.shape[-2:]
        return F.max_pool2d(mask_logits, kernel_size=(h // gh, w // gw))

    def run_baseline(self, feat, mask_embed):
        """Class-agnostic branch over a batch; identical in train and infer."""
        b, gh, gw, d = feat.shape
        keys = feat.flatten(1, 2)
        q = self.query_embed.unsqueeze(0).expand(b, -1, -1)
        logits, scores = self.predict_masks_scores(q, mask_embed)
        points_m, points_s, laterals = [logits], [scores], []
        for layer in self.layers:
            grid = self._grid_logits(logits, (gh, gw))
            q = layer.norm_cross(q + masked_attention(q, feat, grid, layer.cross))
            laterals.append(q)
            q = layer.norm_self(q + layer.self_attn(q, q, q))
            q = layer.norm_ffn(q + layer.ffn(q))
            logits, scores = self.predict_masks_scores(q, mask_embed)
            points_m.append(logits)
            points_s.append(scores)
        return BranchState(points_m, points_s, q), laterals

    def run_example_branch(self, feat_i, mask_embed_i, gt_masks, classes, instance_idx):
        """Example queries for one image: zero-initialized, refined under
        ground-truth-mask attention, self-attention among themselves only."""
        gh, gw = feat_i.shape[0], feat_i.shape[1]
        n_e = gt_masks.shape[0]
        pooled = pool_mask_to_grid(gt_masks.bool(), (gh, gw))
        e = torch.zeros(n_e, self.config.width, dtype=feat_i.dtype, device=feat_i.device)
        points_m, points_s = [], []
        for layer in self.layers:
            e = layer.norm_cross(e + example_masked_attention(e, feat_i, pooled, layer.cross))
            e = layer.norm_self(e + layer.self_attn(e, e, e))
            e = layer.norm_ffn(e + layer.ffn(e))
            logits, scores = self.predict_masks_scores(e, mask_embed_i)
            points_m.append(logits)
            points_s.append(scores)
        return ExampleState(classes, instance_idx, points_m, points_s, e)

    def run_prompt_branch(self, feat, mask_embed, v0, laterals):
        """Candidate branch over a batch: shared masked attention on the
        queries' own masks, then reference attention against the baseline
        queries at the same stage. v0: (B, C, K, D)."""
        b, gh, gw, d = feat.shape
        c_sel, k = v0.shape[1], v0.shape[2]
        v = v0.flatten(1, 2)  # (B, C*K, D)
        logits, scores = self.predict_masks_scores(v, mask_embed)
        points_m, points_s = [logits], [scores]
        for layer, q_lat in zip(self.layers, laterals):
            grid = self._grid_logits(logits, (gh, gw))
            v = layer.norm_cross(v + masked_attention(v, feat, grid, layer.cross))
            ref = grouped_reference_attention(v.unflatten(1, (c_sel, k)), q_lat, layer.self_attn)
            v = layer.norm_self(v + ref.flatten(1, 2))
            v = layer.norm_ffn(v + layer.ffn(v))
            logits, scores = self.predict_masks_scores(v, mask_embed)
            points_m.append(logits)
            points_s.append(scores)
        return BranchState(points_m, points_s, v)

    # -- public forwards ----------------------------------------------------

    def forward_three_branch(
        self,
        pixels,
        gts,
        cache: PromptCache,
        mode,
        rng=None,
        class_universe=None,
        run_example=True,
        run_prompt=True,
    ):
        """Full forward. In train mode the auxiliary branches run unless
        explicitly disabled; in infer mode only the class-agnostic branch
        does, so prompt and example parameters cannot influence the output."""
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be train or infer, got {mode!r}")
        feat, mask_embed = self.encode_image(pixels)
        baseline, laterals = self.run_baseline(feat, mask_embed)
        state = DecoderState(baseline=baseline)
        if mode == "infer":
            return state

        if rng is None:
            rng = np.random.default_rng(0)
        universe = self.known_class_ids if class_universe is None else list(class_universe)
        b = pixels.shape[0]
        if not run_example and not run_prompt:
            return state

        examples = []
        for i in range(b):
            if not run_example:
                examples.append(None)
                continue
            gt = gts[i]
            masks, classes = gt["masks"], [int(c) for c in gt["classes"]]
            promptable = [j for j, c in enumerate(classes) if c in self.class_index]
            chosen = []
            if promptable:
                sel = select_example_instances(
                    [masks[j] for j in promptable],
                    [classes[j] for j in promptable],
                    (pixels.shape[1], pixels.shape[2]),
                    self.config.max_example_queries,
                    self.config.min_mask_area_fraction,
                )
                chosen = [promptable[j] for j in sel]
            if chosen:
                gt_stack = torch.stack([torch.as_tensor(masks[j], device=pixels.device) for j in chosen])
                examples.append(
                    self.run_example_branch(
                        feat[i], mask_embed[i], gt_stack, [classes[j] for j in chosen], chosen
                    )
                )
            else:
                examples.append(None)
        state.example = examples

        if run_prompt:
            prompt_classes = []
            v0 = []
            for i in range(b):
                classes = [int(c) for c in gts[i]["classes"] if int(c) in self.class_index]
                weak = [int(c) for c in gts[i].get("weak_labels", []) if int(c) in self.class_index]
                selected = select_prompt_classes(set(classes) | set(weak), self.config.c_max, rng, universe)
                prompt_classes.append(selected)
                v0.append(self.init_candidate_queries(cache, selected))
            widths = {v.shape[0] for v in v0}
            if len(widths) != 1:
                raise ShapeMismatchError("selected class counts differ across the batch")
            state.prompt = self.run_prompt_branch(feat, mask_embed, torch.stack(v0), laterals)
            state.prompt_classes = prompt_classes
        return state

    def forward_infer(self, pixels):
        """Inference masks and scores from the class-agnostic branch only."""
        state = self.forward_three_branch(pixels, None, None, "infer")
        return state.baseline.mask_logits[-1], state.baseline.scores[-1]

    def extract_prompts(self, pixels_i, gt_masks, classes=None):
        """Run the example branch alone on one image; returns the final-layer
        example queries, one prompt vector per ground-truth mask."""
        feat, mask_embed = self.encode_image(pixels_i.unsqueeze(0))
        n = gt_masks.shape[0]
        classes = list(classes) if classes is not None else [-1] * n
        ex = self.run_example_branch(feat[0], mask_embed[0], gt_masks, classes, list(range(n)))
        return ex

    def forward_prompt_infer(self, pixels, prompt_vector, class_embedding=None, k=None):
        """Prompt-driven inference for a single class: build candidate queries
        from the supplied prompt, run them alongside the baseline branch, and
        return the candidate branch's final masks and scores."""
        k = self.config.k_per_class if k is None else k
        feat, mask_embed = self.encode_image(pixels)
        baseline, laterals = self.run_baseline(feat, mask_embed)
        d = self.config.width
        prompt_vector = prompt_vector.detach().to(self.prompt_r.dtype)
        s = class_embedding if class_embedding is not None else torch.zeros(d, dtype=prompt_vector.dtype)
        v0 = (prompt_vector + s).reshape(1, 1, 1, d) + self.prompt_r[:k].reshape(1, 1, k, d)
        v0 = v0.expand(pixels.shape[0], 1, k, d)
        prompt = self.run_prompt_branch(feat, mask_embed, v0, laterals)
        return prompt.mask_logits[-1], prompt.scores[-1]
