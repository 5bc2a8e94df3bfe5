"""Shared 3D goal queries: candidate sampling, visibility/random masking,
per-view refinement, heatmap scoring and hill-climbing goal sampling.

The candidate set and the score heatmap are single shared objects; every
view reads the same scores, which is what makes the sampled goal indices
identical across views by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn as tnn

from .geometry import CameraModel, AbsoluteFrame, is_visible, project_to_bev, project_to_fpv, to_absolute_frame
from .nn import BlockSpec, MLP, TransformerLayer, cross_entropy
from .scene import KIND_LANE, Sample

DEFAULT_CANDIDATE_RADIUS = 50.0
DEFAULT_DENSE_RADIUS = 3.0
DEFAULT_DENSE_STEP = 1.0
DEDUP_CELL = 0.5
DEFAULT_COVERAGE_RADIUS = 2.0
DEFAULT_NUM_GOALS = 6
DEFAULT_MASK_PROBABILITY = 0.1
MAX_HILL_CLIMB_PASSES = 100


class CandidateError(ValueError):
    pass


@dataclass
class CandidateConfig:
    candidate_radius: float = DEFAULT_CANDIDATE_RADIUS
    dense_radius: float = DEFAULT_DENSE_RADIUS
    dense_step: float = DEFAULT_DENSE_STEP
    dedup_cell: float = DEDUP_CELL


@dataclass
class GoalCandidateSet:
    """Shared goal candidates in world space (all on the ground plane)."""

    points: np.ndarray  # (n, 3), z = 0
    is_sparse: np.ndarray  # (n,) bool
    owner_lane: np.ndarray  # (n,) instance index of the owning lane; -1 for dense

    def __len__(self):
        return len(self.points)

    @property
    def sparse_indices(self) -> np.ndarray:
        return np.flatnonzero(self.is_sparse)


def sample_candidates(sample: Sample, config: CandidateConfig | None = None) -> GoalCandidateSet:
    """Sparse candidates are lane vertices near the target's last observed
    position; dense candidates form a grid around each sparse one,
    deduplicated on a coarse cell grid."""
    cfg = config or CandidateConfig()
    anchor = sample.target_instance().polyline[-1, :2]

    sparse_pts: list[np.ndarray] = []
    sparse_owner: list[int] = []
    for idx, inst in enumerate(sample.instances):
        if inst.kind != KIND_LANE:
            continue
        for vertex in inst.polyline:
            if np.linalg.norm(vertex[:2] - anchor) <= cfg.candidate_radius:
                sparse_pts.append(vertex[:2].copy())
                sparse_owner.append(idx)
    if not sparse_pts:
        raise CandidateError("no candidates: no lane vertex within radius")

    # Dense grid offsets within dense_radius of a sparse point.
    r, step = cfg.dense_radius, cfg.dense_step
    ticks = np.arange(-np.floor(r / step), np.floor(r / step) + 1) * step
    ox, oy = np.meshgrid(ticks, ticks, indexing="ij")
    offsets = np.stack([ox.ravel(), oy.ravel()], axis=1)
    offsets = offsets[np.linalg.norm(offsets, axis=1) <= r]

    seen: set[tuple[int, int]] = set()
    points: list[np.ndarray] = []
    is_sparse: list[bool] = []
    owner: list[int] = []

    def cell_of(p) -> tuple[int, int]:
        return (int(np.floor(p[0] / cfg.dedup_cell)), int(np.floor(p[1] / cfg.dedup_cell)))

    for p, own in zip(sparse_pts, sparse_owner):
        c = cell_of(p)
        if c in seen:
            continue
        seen.add(c)
        points.append(p)
        is_sparse.append(True)
        owner.append(own)
    for p in sparse_pts:
        for off in offsets:
            q = p + off
            c = cell_of(q)
            if c in seen:
                continue
            seen.add(c)
            points.append(q)
            is_sparse.append(False)
            owner.append(-1)

    pts = np.asarray(points)
    return GoalCandidateSet(
        points=np.concatenate([pts, np.zeros((len(pts), 1))], axis=1),
        is_sparse=np.asarray(is_sparse, dtype=bool),
        owner_lane=np.asarray(owner, dtype=int),
    )


def build_mask(
    points: np.ndarray,
    cam: CameraModel,
    generator: torch.Generator | None = None,
    beta: float = DEFAULT_MASK_PROBABILITY,
    training: bool = False,
) -> dict[str, torch.Tensor]:
    """Per-view keep flags for the shared candidates.

    BEV sees everything; FPV keeps only camera-visible candidates. During
    training each visible flag is additionally zeroed with probability beta,
    independently per view, so the masking is asymmetric across views.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    n = len(points)
    vis_bev = torch.ones(n, dtype=torch.bool)
    vis_fpv = torch.from_numpy(np.ascontiguousarray(is_visible(points, cam)))
    mask = {"bev": vis_bev, "fpv": vis_fpv}
    if training and beta > 0.0:
        for view in ("bev", "fpv"):
            drop = torch.rand(n, dtype=torch.float64, generator=generator) < beta
            mask[view] = mask[view] & ~drop
    return mask


class QueryRefiner(tnn.Module):
    """One view's branch of the query transformation: embed the projected
    query coordinates and run a transformer over the view's state features."""

    def __init__(self, spec: BlockSpec | None = None):
        super().__init__()
        self.spec = spec or BlockSpec()
        self.embed = MLP(2, self.spec.embedding_size, self.spec.hidden_size)
        self.transformer = TransformerLayer(self.spec)

    def forward(self, coords: torch.Tensor, state_features: torch.Tensor,
                key_mask: torch.Tensor | None = None) -> torch.Tensor:
        q = self.embed(coords)
        return self.transformer(q, state_features, state_features, key_mask=key_mask)


def project_queries(
    points: np.ndarray,
    cam: CameraModel,
    frame: AbsoluteFrame,
) -> dict[str, torch.Tensor]:
    """Per-view query coordinates in each view's native feature units:
    absolute-frame meters for BEV, normalized pixels for FPV. Queries
    invisible in FPV get a zero coordinate (their mask flag is zero, so the
    value never reaches the fused representation)."""
    bev = to_absolute_frame(points, frame)[:, :2]
    uv, vis = project_to_fpv(points, cam)
    scale = np.array([cam.image_width, cam.image_height], dtype=float)
    fpv = np.where(vis[:, None], uv / scale, 0.0)
    return {
        "bev": torch.from_numpy(np.ascontiguousarray(bev)),
        "fpv": torch.from_numpy(np.ascontiguousarray(fpv)),
    }


def refine_queries(
    coords: dict[str, torch.Tensor],
    state_features: dict[str, torch.Tensor],
    mask: dict[str, torch.Tensor],
    refiners: dict[str, QueryRefiner],
    instance_visible: dict[str, torch.Tensor],
    rounds: int = 1,
) -> dict[str, torch.Tensor]:
    """Refine the shared queries per view and fuse them with the mask:
    Omega = Omega'_bev * mask_bev + Omega'_fpv * mask_fpv.

    Returns {"fused", "bev", "fpv"}; the per-view tensors are the unfused
    branch outputs (used by the single-view ablation).
    """
    per_view = {}
    for view in ("bev", "fpv"):
        q = refiners[view].embed(coords[view])
        for _ in range(max(rounds, 1)):
            q = refiners[view].transformer(
                q,
                state_features[view],
                state_features[view],
                key_mask=instance_visible[view],
            )
        per_view[view] = q
    fused = (
        per_view["bev"] * mask["bev"].to(per_view["bev"].dtype).unsqueeze(-1)
        + per_view["fpv"] * mask["fpv"].to(per_view["fpv"].dtype).unsqueeze(-1)
    )
    return {"fused": fused, "bev": per_view["bev"], "fpv": per_view["fpv"]}


class HeatmapScorer(tnn.Module):
    def __init__(self, spec: BlockSpec | None = None):
        super().__init__()
        spec = spec or BlockSpec()
        self.mlp = MLP(spec.embedding_size, 1, spec.hidden_size)

    def forward(self, omega: torch.Tensor) -> torch.Tensor:
        """Softmax score distribution over all candidates jointly."""
        return torch.softmax(self.mlp(omega).squeeze(-1), dim=-1)


def nearest_candidate(points: np.ndarray, endpoint: np.ndarray) -> int:
    """Index of the candidate nearest to the endpoint in the ground plane;
    ties break to the lowest index."""
    d = np.linalg.norm(points[:, :2] - np.asarray(endpoint)[:2], axis=1)
    return int(np.argmin(d))


def goal_loss(heatmap: torch.Tensor, gt_endpoint: np.ndarray, points: np.ndarray) -> torch.Tensor:
    """Cross entropy between the heatmap and a one-hot label on the
    candidate nearest to the ground-truth endpoint."""
    target = torch.zeros_like(heatmap)
    target[nearest_candidate(points, gt_endpoint)] = 1.0
    return cross_entropy(heatmap, target)


@dataclass
class GoalSet:
    indices: list[int]
    points: np.ndarray  # (k, 3)


def coverage(scores: np.ndarray, cover: np.ndarray, selected: list[int]) -> float:
    """Total score of candidates within the coverage radius of any selected
    goal."""
    if not selected:
        return 0.0
    covered = cover[selected].any(axis=0)
    return float(scores[covered].sum())


def hill_climb_sample(
    scores: np.ndarray,
    points: np.ndarray,
    k: int = DEFAULT_NUM_GOALS,
    radius: float = DEFAULT_COVERAGE_RADIUS,
) -> GoalSet:
    """Select k goals maximizing score coverage within the radius.

    Greedy seeding by maximal marginal coverage, then local exchange: a
    selected goal may be replaced by an unselected candidate within the
    radius of it when total coverage strictly increases. Deterministic; ties
    break to the lowest candidate index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(scores, dtype=float)
    n = len(scores)
    if n <= k:
        return GoalSet(indices=list(range(n)), points=points.copy())

    xy = points[:, :2]
    dist = np.linalg.norm(xy[:, None, :] - xy[None, :, :], axis=-1)
    cover = dist <= radius

    selected: list[int] = []
    covered = np.zeros(n, dtype=bool)
    for _ in range(k):
        gains = (cover & ~covered).astype(float) @ scores
        gains[selected] = -np.inf
        best = int(np.argmax(gains))
        selected.append(best)
        covered |= cover[best]

    current = coverage(scores, cover, selected)
    for _ in range(MAX_HILL_CLIMB_PASSES):
        improved = False
        for pos in range(k):
            g = selected[pos]
            in_set = set(selected)
            best_gain, best_cand = 0.0, None
            for cand in np.flatnonzero(cover[g]):
                cand = int(cand)
                if cand in in_set:
                    continue
                trial = selected[:pos] + [cand] + selected[pos + 1 :]
                value = coverage(scores, cover, trial)
                if value > current + 1e-15 and value - current > best_gain + 1e-15:
                    best_gain, best_cand = value - current, cand
            if best_cand is not None:
                selected[pos] = best_cand
                current = coverage(scores, cover, selected)
                improved = True
        if not improved:
            break
    return GoalSet(indices=selected, points=points[selected].copy())


def select_goals_per_view(goal_set: GoalSet, cam: CameraModel) -> dict:
    """Project the shared goals into each view. The candidate indices are
    identical across views by construction; a goal invisible in FPV keeps
    its mode with a None coordinate."""
    bev = project_to_bev(goal_set.points)
    uv, vis = project_to_fpv(goal_set.points, cam)
    fpv = [tuple(map(float, uv[i])) if bool(vis[i]) else None for i in range(len(goal_set.indices))]
    return {
        "indices": {"bev": list(goal_set.indices), "fpv": list(goal_set.indices)},
        "bev": bev,
        "fpv": fpv,
    }


def heatmap_to_json(points: np.ndarray, scores: np.ndarray) -> dict:
    return {
        "candidates": [[float(x) for x in p] for p in points],
        "scores": [float(s) for s in scores],
    }
