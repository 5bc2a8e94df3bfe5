"""Goal-conditioned trajectory completion, one generator per view.

Each generator embeds the goal (in the view's native coordinates), joins it
with the target agent's state feature and decodes the full future in one
shot. BEV and FPV generators share the structure but not the parameters.
"""

from __future__ import annotations

import logging

import torch
from torch import nn as tnn

from .nn import BlockSpec, MLP

log = logging.getLogger(__name__)


class TrajectoryDecoder(tnn.Module):
    def __init__(self, t_pred: int, spec: BlockSpec | None = None):
        super().__init__()
        self.spec = spec or BlockSpec()
        self.t_pred = t_pred
        d = self.spec.embedding_size
        self.goal_embed = MLP(2, d, self.spec.hidden_size)
        self.decoder = MLP(2 * d, 2 * t_pred, self.spec.hidden_size)

    def forward(self, state_feature: torch.Tensor, goal: torch.Tensor | None) -> torch.Tensor:
        """state_feature: (D,); goal: (2,) in the view's coordinates, or
        None for a goal invisible in this view (zero goal embedding).
        Returns (t_pred, 2)."""
        if goal is None:
            ge = torch.zeros(self.spec.embedding_size, dtype=state_feature.dtype)
        else:
            ge = self.goal_embed(goal.to(state_feature.dtype))
        joint = torch.cat([state_feature, ge], dim=-1)
        return self.decoder(joint).reshape(self.t_pred, 2)


def complete_trajectory(decoder: TrajectoryDecoder, state_feature: torch.Tensor,
                        goal: torch.Tensor | None) -> torch.Tensor:
    return decoder(state_feature, goal)


def regression_loss(pred: torch.Tensor, gt: torch.Tensor,
                    valid: torch.Tensor | None = None) -> torch.Tensor:
    """Sum over evaluable steps of the per-step Euclidean distance.

    valid marks the ground-truth steps that can be evaluated (e.g. visible
    in FPV); with no evaluable step the loss contributes zero.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    diff = pred - gt
    step_dist = torch.sqrt((diff * diff).sum(dim=-1) + 1e-30)
    if valid is not None:
        if not bool(valid.any()):
            log.warning("regression_loss: no evaluable steps, contributing 0")
            return step_dist.sum() * 0.0
        step_dist = step_dist[valid]
    return step_dist.sum()
