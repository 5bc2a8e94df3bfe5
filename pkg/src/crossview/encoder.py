"""Per-view scene encoders: vector subgraph, scene-wide interaction graph,
and the coarse-to-fine cross-view attention coupling the two branches.

The BEV and FPV branches are identically structured with independent
parameters. In cross-view mode the interaction graph runs both branches in
lockstep per layer: each view thresholds its own attention weights (coarse),
the selected instance sets are unioned, and both fine layers attend over
that union.
"""

from __future__ import annotations

import torch
from torch import nn as tnn

from .nn import (
    BlockSpec,
    MLP,
    MultiHeadAttention,
    cross_entropy,
    masked_softmax,
)

NUM_REFINEMENT_LAYERS = 6

DEFAULT_COARSE_THRESHOLD = 0.05


class SubgraphLayer(tnn.Module):
    def __init__(self, spec: BlockSpec):
        super().__init__()
        d = spec.embedding_size
        self.attn = MultiHeadAttention(spec)
        self.mlp = MLP(2 * d, d, spec.hidden_size)

    def forward(self, x, valid):
        attn_out = self.attn(x, x, x, key_mask=valid)
        x = self.mlp(torch.cat([x, attn_out], dim=-1))
        return x * valid.unsqueeze(-1)


class SubgraphEncoder(tnn.Module):
    """Refines the vectors within each instance and pools them into one
    attribute per instance: per layer x <- MLP([x; attn(x, x, x)]),
    max-pool at the end."""

    def __init__(self, feature_width: int, spec: BlockSpec | None = None,
                 num_layers: int = NUM_REFINEMENT_LAYERS):
        super().__init__()
        self.spec = spec or BlockSpec()
        self.embed = MLP(feature_width, self.spec.embedding_size, self.spec.hidden_size)
        self.layers = tnn.ModuleList(SubgraphLayer(self.spec) for _ in range(num_layers))

    def forward(self, features: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """features: (N, V, F); valid: (N, V) bool. Returns (N, D) instance
        attributes; instances with zero valid vectors get zero rows."""
        x = self.embed(features) * valid.unsqueeze(-1)
        for layer in self.layers:
            x = layer(x, valid)
        # Max-pool over valid vectors; avoid -inf rows for empty instances.
        neg = torch.finfo(x.dtype).min
        pooled = x.masked_fill(~valid.unsqueeze(-1), neg).max(dim=1).values
        any_valid = valid.any(dim=1, keepdim=True)
        return torch.where(any_valid, pooled, torch.zeros_like(pooled))


def attention_weights(attn: MultiHeadAttention, a: torch.Tensor,
                      support: torch.Tensor) -> torch.Tensor:
    """Coarse interaction weights: unscaled dot-product softmax over the
    support (row i over instances j != i), with the layer's per-head query
    and key projections averaged at the logit level.

    a: (..., N, D); support: (..., N, N) bool. Rows without support are
    all-zero. Excluded entries are exactly zero.
    """
    logits = attn.head_logits(a, a, scaled=False).mean(dim=-3)
    return masked_softmax(logits, support)


def coarse_select(profile: torch.Tensor, eps: float) -> torch.Tensor:
    """Instances whose weight exceeds the threshold, per target row."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"threshold must be in [0, 1), got {eps}")
    return profile > eps


def union_instance_set(selected_bev: torch.Tensor, selected_fpv: torch.Tensor,
                       fallback: torch.Tensor) -> torch.Tensor:
    """Union of the per-view selections; rows with an empty union fall back
    to the full support so the fine layer stays well-defined."""
    union = selected_bev | selected_fpv
    empty = ~union.any(dim=-1, keepdim=True)
    return torch.where(empty, fallback, union)


def fine_attention(attn: MultiHeadAttention, a: torch.Tensor,
                   selected: torch.Tensor) -> torch.Tensor:
    """Multi-head attention restricted to the selected instance set; the
    excluded instances contribute nothing."""
    return attn(a, a, a, key_mask=selected)


class GlobalGraphLayer(tnn.Module):
    def __init__(self, spec: BlockSpec):
        super().__init__()
        d = spec.embedding_size
        self.attn = MultiHeadAttention(spec)
        self.mlp = MLP(2 * d, d, spec.hidden_size)

    def forward(self, x, key_mask):
        attn_out = fine_attention(self.attn, x, key_mask)
        return self.mlp(torch.cat([x, attn_out], dim=-1))


class GlobalGraph(tnn.Module):
    """One view's interaction-graph branch (a stack of layers); the
    cross-view coupling lives in :func:`global_graph_forward`."""

    def __init__(self, spec: BlockSpec | None = None,
                 num_layers: int = NUM_REFINEMENT_LAYERS):
        super().__init__()
        self.spec = spec or BlockSpec()
        self.layers = tnn.ModuleList(GlobalGraphLayer(self.spec) for _ in range(num_layers))


def global_graph_forward(
    graph_bev: GlobalGraph,
    graph_fpv: GlobalGraph,
    a_bev: torch.Tensor,
    a_fpv: torch.Tensor,
    visible_fpv: torch.Tensor,
    mode: str = "cross_view",
    eps: float = DEFAULT_COARSE_THRESHOLD,
    inst_mask: torch.Tensor | None = None,
):
    """Run both interaction branches in lockstep.

    a_bev, a_fpv: (..., N, D) instance attributes (FPV rows of invisible
    instances are zero). mode "plain" attends over all other instances per
    view independently; "cross_view" unions the per-view coarse selections
    and both fine layers attend over the same set. FPV attention weights of
    invisible instances are zero, so they are never selected via FPV, but
    they remain selectable through BEV.

    inst_mask (..., N) marks real instances when the leading dims batch
    padded samples; padding rows are excluded from every support set.

    Returns (p_bev, p_fpv, profiles) where profiles is a per-layer list of
    {"bev": (..., N, N), "fpv": (..., N, N)} row-stochastic weights.
    """
    if mode not in ("plain", "cross_view"):
        raise ValueError(f"unknown mode {mode!r}")
    n = a_bev.shape[-2]
    not_self = ~torch.eye(n, dtype=torch.bool)
    support_bev = not_self if inst_mask is None else not_self & inst_mask.unsqueeze(-2)
    support_fpv = support_bev & visible_fpv.unsqueeze(-2)

    x_b, x_f = a_bev, a_fpv
    profiles = []
    for layer_b, layer_f in zip(graph_bev.layers, graph_fpv.layers):
        prof_b = attention_weights(layer_b.attn, x_b, support_bev)
        prof_f = attention_weights(layer_f.attn, x_f, support_fpv)
        profiles.append({"bev": prof_b, "fpv": prof_f})
        if mode == "cross_view":
            selected = union_instance_set(
                coarse_select(prof_b, eps), coarse_select(prof_f, eps), support_bev
            )
        else:
            selected = support_bev
        x_b = layer_b(x_b, selected)
        x_f = layer_f(x_f, selected) * visible_fpv.unsqueeze(-1)
    return x_b, x_f, profiles


class SparseGoalScorer(tnn.Module):
    """Scores sparse goal candidates through the state feature of the lane
    instance owning each candidate."""

    def __init__(self, spec: BlockSpec | None = None):
        super().__init__()
        spec = spec or BlockSpec()
        self.mlp = MLP(spec.embedding_size, 1, spec.hidden_size)

    def forward(self, state_features: torch.Tensor, owner_index: torch.Tensor) -> torch.Tensor:
        """Returns softmax scores over the sparse candidates."""
        logits = self.mlp(state_features[owner_index]).squeeze(-1)
        return torch.softmax(logits, dim=-1)


def sparse_goal_loss(scores: torch.Tensor, positive_index: int | torch.Tensor) -> torch.Tensor:
    """Cross entropy against a one-hot label over the sparse candidates."""
    target = torch.zeros_like(scores)
    positive_index = int(positive_index)
    if not 0 <= positive_index < scores.shape[0]:
        raise ValueError(f"positive index {positive_index} out of range")
    target[positive_index] = 1.0
    return cross_entropy(scores, target)
