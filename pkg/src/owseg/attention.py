"""Attention kernels shared by all decoder branches.

One weight set (query/key/value/output projections) serves plain multi-head
attention, mask-restricted cross attention over feature-grid keys, the
ground-truth-mask variant used to distill instance prompts, and per-class
reference attention in which each class group sees only itself plus the
read-only baseline queries.
"""

import math

import torch
from torch import nn

from .errors import ShapeMismatchError

NEG_INF = float("-inf")


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with an optional additive {0, -inf} bias."""

    def __init__(self, width, n_heads):
        super().__init__()
        if width % n_heads != 0:
            raise ValueError(f"width {width} not divisible by n_heads {n_heads}")
        self.width = width
        self.n_heads = n_heads
        self.head_dim = width // n_heads
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.out_proj = nn.Linear(width, width)

    def forward(self, q, k, v, bias=None, return_weights=False):
        if q.shape[-1] != self.width or k.shape[-1] != self.width or v.shape[-1] != self.width:
            raise ShapeMismatchError(
                f"expected width {self.width}, got q={tuple(q.shape)} k={tuple(k.shape)} v={tuple(v.shape)}"
            )
        if k.shape[:-1] != v.shape[:-1]:
            raise ShapeMismatchError(f"key/value shapes differ: {tuple(k.shape)} vs {tuple(v.shape)}")
        n_q, n_k = q.shape[-2], k.shape[-2]
        if bias is not None and bias.shape[-2:] != (n_q, n_k):
            raise ShapeMismatchError(f"bias shape {tuple(bias.shape)} does not match ({n_q}, {n_k})")

        def split(x):
            return x.unflatten(-1, (self.n_heads, self.head_dim)).transpose(-3, -2)

        qh = split(self.q_proj(q))  # (..., H, n_q, d)
        kh = split(self.k_proj(k))
        vh = split(self.v_proj(v))
        scores = qh @ kh.transpose(-2, -1) / math.sqrt(self.head_dim)
        if bias is not None:
            scores = scores + bias.unsqueeze(-3)
        weights = scores.softmax(dim=-1)
        out = (weights @ vh).transpose(-3, -2).flatten(-2)
        out = self.out_proj(out)
        if return_weights:
            return out, weights
        return out


def multi_head_attention(q, k, v, attn: MultiHeadAttention, bias=None):
    """Functional form of the shared attention weights."""
    return attn(q, k, v, bias=bias)


def mask_bias_from_logits(mask_logits):
    """{0, -inf} additive bias from mask logits, binarized at sigmoid 0.5.

    A query whose binarized mask is empty gets an all-zero row (attention
    falls back to the whole feature grid). The logits are detached: mask
    guidance never carries gradient.
    """
    visible = (mask_logits.detach() > 0).flatten(-2)  # sigmoid(x) > 0.5 iff x > 0
    empty = ~visible.any(dim=-1, keepdim=True)
    visible = visible | empty
    bias = torch.zeros(visible.shape, dtype=mask_logits.dtype, device=mask_logits.device)
    return bias.masked_fill(~visible, NEG_INF)


def mask_bias_from_binary(visible_mask, dtype=torch.float32):
    """Bias from an already-binary visibility mask, with the same fallback."""
    visible = visible_mask.flatten(-2).bool()
    empty = ~visible.any(dim=-1, keepdim=True)
    visible = visible | empty
    bias = torch.zeros(visible.shape, dtype=dtype, device=visible.device)
    return bias.masked_fill(~visible, NEG_INF)


def pool_mask_to_grid(mask, grid_hw):
    """Max-pool a (..., H, W) mask to the feature grid: any foreground pixel
    inside a cell makes the cell visible."""
    gh, gw = grid_hw
    h, w = mask.shape[-2], mask.shape[-1]
    if h % gh != 0 or w % gw != 0:
        raise ShapeMismatchError(f"mask {h}x{w} not divisible by grid {gh}x{gw}")
    flat = mask.reshape(*mask.shape[:-2], gh, h // gh, gw, w // gw)
    return flat.amax(dim=(-3, -1)) if flat.dtype != torch.bool else flat.any(-1).any(-2)


def masked_attention(queries, feature_map, mask_logits, attn: MultiHeadAttention):
    """Cross attention from queries to feature-grid keys, restricted to each
    query's predicted mask (grid-resolution logits, one channel per query)."""
    gh, gw = mask_logits.shape[-2], mask_logits.shape[-1]
    keys = feature_map.flatten(-3, -2) if feature_map.dim() >= 3 else feature_map
    if keys.shape[-2] != gh * gw:
        raise ShapeMismatchError(
            f"feature grid has {keys.shape[-2]} cells but mask logits are {gh}x{gw}"
        )
    bias = mask_bias_from_logits(mask_logits)
    return attn(queries, keys, keys, bias=bias)


def example_masked_attention(example_queries, feature_map, gt_masks, attn: MultiHeadAttention):
    """Masked attention whose visibility comes from ground-truth instance
    masks (max-pooled to the feature grid), one mask per example query."""
    if feature_map.dim() < 3:
        raise ShapeMismatchError("feature_map must be (..., h, w, D)")
    gh, gw = feature_map.shape[-3], feature_map.shape[-2]
    if gt_masks.shape[-2:] != (gh, gw):
        gt_masks = pool_mask_to_grid(gt_masks.bool(), (gh, gw))
    if example_queries.shape[-2] != gt_masks.shape[-3 if gt_masks.dim() > 2 else 0]:
        raise ShapeMismatchError(
            f"{example_queries.shape[-2]} example queries but {gt_masks.shape[0]} masks"
        )
    keys = feature_map.flatten(-3, -2)
    bias = mask_bias_from_binary(gt_masks, dtype=example_queries.dtype)
    return attn(example_queries, keys, keys, bias=bias)


def grouped_reference_attention(candidates, baseline_queries, attn: MultiHeadAttention):
    """Reference attention over class groups.

    candidates: (..., C, K, D) per-class query groups.
    baseline_queries: (..., N, D), read-only context every group may attend to.
    Each group attends to [baseline_queries; own group] and nothing else, so
    groups of different classes stay mutually invisible.
    """
    *lead, c, k, d = candidates.shape
    n = baseline_queries.shape[-2]
    if baseline_queries.shape[-1] != d:
        raise ShapeMismatchError("candidate and baseline widths differ")
    q_ctx = baseline_queries.unsqueeze(-3).expand(*lead, c, n, d)
    kv = torch.cat([q_ctx, candidates], dim=-2)  # (..., C, N+K, D)
    return attn(candidates, kv, kv)


def reference_attention(candidates_by_class, baseline_queries, attn: MultiHeadAttention):
    """Dict form: class id -> (K, D) candidates, updated independently."""
    if not candidates_by_class:
        return {}
    classes = list(candidates_by_class)
    sizes = {candidates_by_class[c].shape for c in classes}
    if len(sizes) != 1:
        raise ShapeMismatchError(f"candidate groups must share one shape, got {sizes}")
    stacked = torch.stack([candidates_by_class[c] for c in classes], dim=0)
    out = grouped_reference_attention(stacked, baseline_queries, attn)
    return {c: out[i] for i, c in enumerate(classes)}
