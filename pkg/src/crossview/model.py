"""Full cross-view prediction model: per-view encoders, the shared-query
goal predictor and the per-view trajectory generators, with the ablation
switches (shared queries / random mask / cross-view attention) wired in.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np
import torch
from torch import nn as tnn

from . import goals as goals_mod
from .encoder import (
    GlobalGraph,
    SparseGoalScorer,
    SubgraphEncoder,
    global_graph_forward,
    sparse_goal_loss,
)
from .geometry import project_to_fpv, to_absolute_frame
from .goals import (
    CandidateConfig,
    GoalCandidateSet,
    GoalSet,
    HeatmapScorer,
    QueryRefiner,
    build_mask,
    goal_loss,
    hill_climb_sample,
    project_queries,
    refine_queries,
    sample_candidates,
)
from .nn import BlockSpec, DTYPE, LOG_EPSILON, init_parameters, masked_softmax
from .scene import FEATURE_WIDTH, Sample, VectorizedView, vectorize_bev, vectorize_fpv
from .trajectory import TrajectoryDecoder, regression_loss

VIEWS = ("bev", "fpv")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    t_obs: int = 8
    t_pred: int = 12
    coarse_threshold: float = 0.05
    mask_probability: float = 0.1
    refinement_rounds: int = 1
    use_shared_queries: bool = True  # Que
    use_random_mask: bool = True  # RM
    use_cross_attention: bool = True  # CA
    num_goals: int = 6
    coverage_radius: float = 2.0
    candidate_radius: float = 50.0
    dense_radius: float = 3.0
    dense_step: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.mask_probability <= 1.0:
            raise ConfigError("mask_probability must be in [0, 1]")
        if self.use_random_mask and not self.use_shared_queries:
            raise ConfigError("random mask requires shared queries (it masks shared-query flags)")

    def candidate_config(self) -> CandidateConfig:
        return CandidateConfig(
            candidate_radius=self.candidate_radius,
            dense_radius=self.dense_radius,
            dense_step=self.dense_step,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


@dataclass
class PreparedSample:
    """Per-sample tensors precomputed once before training."""

    sample: Sample
    features: dict[str, torch.Tensor]  # view -> (N, V, F)
    valid: dict[str, torch.Tensor]  # view -> (N, V) bool
    instance_visible: dict[str, torch.Tensor]  # view -> (N,) bool
    target_index: int
    candidates: GoalCandidateSet
    cand_coords: dict[str, torch.Tensor]  # view -> (n, 2)
    sparse_owner: torch.Tensor  # (S,) instance indices
    sparse_positive: int  # index within the sparse candidates
    goal_positive: int  # index within all candidates
    future: dict[str, torch.Tensor]  # view -> (T, 2); bev absolute m, fpv normalized px
    future_valid: dict[str, torch.Tensor]  # view -> (T,) bool
    endpoint_world: np.ndarray  # (2,) ground-truth endpoint, world frame
    endpoint_goal: dict[str, torch.Tensor | None]  # teacher-forcing goal per view


def prepare_sample(sample: Sample, cfg: ModelConfig) -> PreparedSample:
    views = {"bev": vectorize_bev(sample, cfg.t_obs), "fpv": vectorize_fpv(sample, cfg.t_obs)}

    def to_t(a, dtype=DTYPE):
        return torch.from_numpy(np.ascontiguousarray(a)).to(dtype)

    features = {v: to_t(views[v].features) for v in VIEWS}
    valid = {v: torch.from_numpy(views[v].valid.copy()) for v in VIEWS}
    visible = {v: torch.from_numpy(views[v].instance_visible.copy()) for v in VIEWS}

    cands = sample_candidates(sample, cfg.candidate_config())
    coords = project_queries(cands.points, sample.camera, sample.frame)

    endpoint_world = sample.future_bev[-1]
    sparse_pts = cands.points[cands.is_sparse]
    sparse_positive = goals_mod.nearest_candidate(sparse_pts, endpoint_world)
    goal_positive = goals_mod.nearest_candidate(cands.points, endpoint_world)

    future_abs = to_absolute_frame(
        np.concatenate([sample.future_bev, np.zeros((cfg.t_pred, 1))], axis=1), sample.frame
    )[:, :2]
    uv, vis = sample.future_fpv()
    scale = np.array([sample.camera.image_width, sample.camera.image_height], dtype=float)
    fut_fpv = np.where(vis[:, None], uv / scale, 0.0)

    endpoint_goal = {
        "bev": to_t(future_abs[-1]),
        "fpv": to_t(fut_fpv[-1]) if bool(vis[-1]) else None,
    }

    return PreparedSample(
        sample=sample,
        features=features,
        valid=valid,
        instance_visible=visible,
        target_index=views["bev"].target_index,
        candidates=cands,
        cand_coords=coords,
        sparse_owner=torch.from_numpy(cands.owner_lane[cands.is_sparse].copy()),
        sparse_positive=sparse_positive,
        goal_positive=goal_positive,
        future={"bev": to_t(future_abs), "fpv": to_t(fut_fpv)},
        future_valid={
            "bev": torch.ones(cfg.t_pred, dtype=torch.bool),
            "fpv": torch.from_numpy(vis.copy()),
        },
        endpoint_world=np.asarray(endpoint_world, dtype=float),
        endpoint_goal=endpoint_goal,
    )


@dataclass
class PreparedBatch:
    """Padded stack of prepared samples for one optimizer step.

    Subgraph inputs are concatenated over all instances of all samples
    (instances are independent there), everything downstream is padded to
    (B, N_max) instances and (B, n_max) candidates with boolean masks.
    """

    preps: list[PreparedSample]
    sub_features: dict[str, torch.Tensor]  # view -> (M, V_max, F)
    sub_valid: dict[str, torch.Tensor]  # view -> (M, V_max) bool
    inst_mask: torch.Tensor  # (B, N_max) bool, real instances
    inst_visible: dict[str, torch.Tensor]  # view -> (B, N_max) bool
    target_index: torch.Tensor  # (B,) long
    cand_coords: dict[str, torch.Tensor]  # view -> (B, n_max, 2)
    cand_mask: torch.Tensor  # (B, n_max) bool, real candidates
    cand_visible: dict[str, torch.Tensor]  # view -> (B, n_max) bool
    goal_positive: torch.Tensor  # (B,) long
    sparse_owner: torch.Tensor  # (B, S_max) long
    sparse_mask: torch.Tensor  # (B, S_max) bool
    sparse_positive: torch.Tensor  # (B,) long
    future: dict[str, torch.Tensor]  # view -> (B, T, 2)
    future_valid: dict[str, torch.Tensor]  # view -> (B, T) bool
    endpoint_goal: dict[str, torch.Tensor]  # view -> (B, 2)
    endpoint_ok: dict[str, torch.Tensor]  # view -> (B,) bool

    def __len__(self):
        return len(self.preps)


def collate_batch(preps: list[PreparedSample], dtype: torch.dtype = DTYPE) -> PreparedBatch:
    b = len(preps)
    if b == 0:
        raise ValueError("empty batch")
    n_inst = [p.features["bev"].shape[0] for p in preps]
    n_max = max(n_inst)
    inst_mask = torch.zeros(b, n_max, dtype=torch.bool)
    for i, n in enumerate(n_inst):
        inst_mask[i, :n] = True

    sub_features, sub_valid, inst_visible = {}, {}, {}
    for v in VIEWS:
        v_max = max(p.features[v].shape[1] for p in preps)
        width = preps[0].features[v].shape[2]
        m = sum(n_inst)
        feats = torch.zeros(m, v_max, width, dtype=dtype)
        valid = torch.zeros(m, v_max, dtype=torch.bool)
        visible = torch.zeros(b, n_max, dtype=torch.bool)
        row = 0
        for i, p in enumerate(preps):
            n, vv = p.features[v].shape[:2]
            feats[row : row + n, :vv] = p.features[v].to(dtype)
            valid[row : row + n, :vv] = p.valid[v]
            visible[i, :n] = p.instance_visible[v]
            row += n
        sub_features[v], sub_valid[v], inst_visible[v] = feats, valid, visible

    n_cand = [len(p.candidates) for p in preps]
    c_max = max(n_cand)
    cand_mask = torch.zeros(b, c_max, dtype=torch.bool)
    cand_coords = {v: torch.zeros(b, c_max, 2, dtype=dtype) for v in VIEWS}
    cand_visible = {v: torch.zeros(b, c_max, dtype=torch.bool) for v in VIEWS}
    for i, p in enumerate(preps):
        n = n_cand[i]
        cand_mask[i, :n] = True
        for v in VIEWS:
            cand_coords[v][i, :n] = p.cand_coords[v].to(dtype)
        static = build_mask(p.candidates.points, p.sample.camera, training=False)
        cand_visible["bev"][i, :n] = static["bev"]
        cand_visible["fpv"][i, :n] = static["fpv"]

    s_len = [len(p.sparse_owner) for p in preps]
    s_max = max(s_len)
    sparse_owner = torch.zeros(b, s_max, dtype=torch.long)
    sparse_mask = torch.zeros(b, s_max, dtype=torch.bool)
    for i, p in enumerate(preps):
        sparse_owner[i, : s_len[i]] = p.sparse_owner
        sparse_mask[i, : s_len[i]] = True

    future = {v: torch.stack([p.future[v] for p in preps]).to(dtype) for v in VIEWS}
    future_valid = {v: torch.stack([p.future_valid[v] for p in preps]) for v in VIEWS}
    endpoint_goal, endpoint_ok = {}, {}
    for v in VIEWS:
        goals, oks = [], []
        for p in preps:
            g = p.endpoint_goal[v]
            oks.append(g is not None)
            goals.append(g.to(dtype) if g is not None else torch.zeros(2, dtype=dtype))
        endpoint_goal[v] = torch.stack(goals)
        endpoint_ok[v] = torch.tensor(oks, dtype=torch.bool)

    return PreparedBatch(
        preps=preps,
        sub_features=sub_features,
        sub_valid=sub_valid,
        inst_mask=inst_mask,
        inst_visible=inst_visible,
        target_index=torch.tensor([p.target_index for p in preps], dtype=torch.long),
        cand_coords=cand_coords,
        cand_mask=cand_mask,
        cand_visible=cand_visible,
        goal_positive=torch.tensor([p.goal_positive for p in preps], dtype=torch.long),
        sparse_owner=sparse_owner,
        sparse_mask=sparse_mask,
        sparse_positive=torch.tensor([p.sparse_positive for p in preps], dtype=torch.long),
        future=future,
        future_valid=future_valid,
        endpoint_goal=endpoint_goal,
        endpoint_ok=endpoint_ok,
    )


class CrossViewModel(tnn.Module):
    """Two encoder branches, the shared-query goal predictor and two
    trajectory generators. Identical structure, independent parameters per
    view throughout."""

    def __init__(self, cfg: ModelConfig | None = None, spec: BlockSpec | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.spec = spec or BlockSpec()
        self.subgraph = tnn.ModuleDict(
            {v: SubgraphEncoder(FEATURE_WIDTH, self.spec) for v in VIEWS}
        )
        self.global_graph = tnn.ModuleDict({v: GlobalGraph(self.spec) for v in VIEWS})
        self.sparse_scorer = tnn.ModuleDict({v: SparseGoalScorer(self.spec) for v in VIEWS})
        self.refiner = tnn.ModuleDict({v: QueryRefiner(self.spec) for v in VIEWS})
        # Shared heatmap scorer (Que on) and per-view scorers (Que off).
        self.heat_scorer = HeatmapScorer(self.spec)
        self.view_scorer = tnn.ModuleDict({v: HeatmapScorer(self.spec) for v in VIEWS})
        self.decoder = tnn.ModuleDict(
            {v: TrajectoryDecoder(self.cfg.t_pred, self.spec) for v in VIEWS}
        )
        init_parameters(self)

    @property
    def dtype(self) -> torch.dtype:
        """Parameter dtype; inputs are cast to it on entry."""
        return self.heat_scorer.mlp.fc1.weight.dtype

    # -- encoder ------------------------------------------------------------

    def encode(self, prep: PreparedSample):
        a = {
            v: self.subgraph[v](prep.features[v].to(self.dtype), prep.valid[v])
            for v in VIEWS
        }
        mode = "cross_view" if self.cfg.use_cross_attention else "plain"
        p_bev, p_fpv, profiles = global_graph_forward(
            self.global_graph["bev"],
            self.global_graph["fpv"],
            a["bev"],
            a["fpv"],
            prep.instance_visible["fpv"],
            mode=mode,
            eps=self.cfg.coarse_threshold,
        )
        return {"bev": p_bev, "fpv": p_fpv}, profiles

    # -- goal prediction ----------------------------------------------------

    def query_mask(self, prep: PreparedSample, training: bool,
                   generator: torch.Generator | None = None) -> dict[str, torch.Tensor]:
        beta = self.cfg.mask_probability if (training and self.cfg.use_random_mask) else 0.0
        return build_mask(
            prep.candidates.points,
            prep.sample.camera,
            generator=generator,
            beta=beta,
            training=training,
        )

    def refine(self, prep: PreparedSample, state, mask):
        return refine_queries(
            {v: prep.cand_coords[v].to(self.dtype) for v in VIEWS},
            state,
            mask,
            {v: self.refiner[v] for v in VIEWS},
            prep.instance_visible,
            rounds=self.cfg.refinement_rounds,
        )

    def heatmaps(self, prep: PreparedSample, refined, mask) -> dict[str, torch.Tensor]:
        """Que on: one shared heatmap under both keys. Que off: independent
        per-view heatmaps from the masked per-view branch outputs."""
        if self.cfg.use_shared_queries:
            heat = self.heat_scorer(refined["fused"])
            return {v: heat for v in VIEWS}
        out = {}
        for v in VIEWS:
            omega_v = refined[v] * mask[v].to(refined[v].dtype).unsqueeze(-1)
            out[v] = self.view_scorer[v](omega_v)
        return out

    # -- losses -------------------------------------------------------------

    def compute_losses(self, prep: PreparedSample, training: bool = True,
                       generator: torch.Generator | None = None) -> dict:
        state, _ = self.encode(prep)
        mask = self.query_mask(prep, training, generator)
        refined = self.refine(prep, state, mask)
        heat = self.heatmaps(prep, refined, mask)

        components = {}
        for v in VIEWS:
            scores = self.sparse_scorer[v](state[v], prep.sparse_owner)
            l1 = sparse_goal_loss(scores, prep.sparse_positive)
            l2 = goal_loss(heat[v], prep.endpoint_world, prep.candidates.points)
            # Teacher forcing: condition on the ground-truth endpoint
            # projected into the view, never on a sampled goal.
            pred = self.decoder[v](state[v][prep.target_index], prep.endpoint_goal[v])
            l3 = regression_loss(pred, prep.future[v], prep.future_valid[v])
            components[v] = {"l1": l1, "l2": l2, "l3": l3}
        return components

    # -- batched training path ----------------------------------------------

    def encode_batch(self, batch: PreparedBatch) -> dict[str, torch.Tensor]:
        state = {}
        for v in VIEWS:
            out = self.subgraph[v](batch.sub_features[v], batch.sub_valid[v])  # (M, D)
            st = out.new_zeros(batch.inst_mask.shape + (out.shape[-1],))
            st[batch.inst_mask] = out
            state[v] = st
        mode = "cross_view" if self.cfg.use_cross_attention else "plain"
        p_bev, p_fpv, _ = global_graph_forward(
            self.global_graph["bev"],
            self.global_graph["fpv"],
            state["bev"],
            state["fpv"],
            batch.inst_visible["fpv"],
            mode=mode,
            eps=self.cfg.coarse_threshold,
            inst_mask=batch.inst_mask,
        )
        return {"bev": p_bev, "fpv": p_fpv}

    def query_mask_batch(
        self,
        batch: PreparedBatch,
        training: bool,
        generators: list[torch.Generator] | None = None,
    ) -> dict[str, torch.Tensor]:
        beta = self.cfg.mask_probability if (training and self.cfg.use_random_mask) else 0.0
        if beta == 0.0:
            return dict(batch.cand_visible)
        masks = {v: batch.cand_visible[v].clone() for v in VIEWS}
        for i, prep in enumerate(batch.preps):
            gen = generators[i] if generators is not None else None
            m = build_mask(
                prep.candidates.points,
                prep.sample.camera,
                generator=gen,
                beta=beta,
                training=True,
            )
            n = len(prep.candidates)
            for v in VIEWS:
                masks[v][i, :n] = m[v]
        return masks

    def compute_losses_batch(
        self,
        batch: PreparedBatch,
        training: bool = True,
        generators: list[torch.Generator] | None = None,
    ) -> dict:
        """Batched equivalent of compute_losses; every term is a (B,) tensor
        of per-sample values."""
        state = self.encode_batch(batch)
        mask = self.query_mask_batch(batch, training, generators)
        refined = refine_queries(
            batch.cand_coords,
            state,
            mask,
            {v: self.refiner[v] for v in VIEWS},
            batch.inst_visible,
            rounds=self.cfg.refinement_rounds,
        )

        if self.cfg.use_shared_queries:
            logits = self.heat_scorer.mlp(refined["fused"]).squeeze(-1)
            shared = masked_softmax(logits, batch.cand_mask)
            heat = {v: shared for v in VIEWS}
        else:
            heat = {}
            for v in VIEWS:
                omega_v = refined[v] * mask[v].to(refined[v].dtype).unsqueeze(-1)
                logits = self.view_scorer[v].mlp(omega_v).squeeze(-1)
                heat[v] = masked_softmax(logits, batch.cand_mask)

        b = len(batch)
        rows = torch.arange(b)
        components = {}
        for v in VIEWS:
            st = state[v]
            owner_feat = torch.gather(
                st, 1, batch.sparse_owner.unsqueeze(-1).expand(-1, -1, st.shape[-1])
            )
            sparse_logits = self.sparse_scorer[v].mlp(owner_feat).squeeze(-1)
            sparse_probs = masked_softmax(sparse_logits, batch.sparse_mask)
            p1 = sparse_probs.gather(1, batch.sparse_positive.unsqueeze(1)).squeeze(1)
            l1 = -torch.log(p1 + LOG_EPSILON)

            p2 = heat[v].gather(1, batch.goal_positive.unsqueeze(1)).squeeze(1)
            l2 = -torch.log(p2 + LOG_EPSILON)

            target_state = st[rows, batch.target_index]
            dec = self.decoder[v]
            ge = dec.goal_embed(batch.endpoint_goal[v]) * batch.endpoint_ok[v].unsqueeze(
                -1
            ).to(st.dtype)
            pred = dec.decoder(torch.cat([target_state, ge], dim=-1)).reshape(
                b, self.cfg.t_pred, 2
            )
            diff = pred - batch.future[v]
            step_dist = torch.sqrt((diff * diff).sum(dim=-1) + 1e-30)
            l3 = (step_dist * batch.future_valid[v].to(step_dist.dtype)).sum(dim=-1)

            components[v] = {"l1": l1, "l2": l2, "l3": l3}
        return components

    # -- inference ----------------------------------------------------------

    @torch.no_grad()
    def predict(self, prep: PreparedSample) -> dict:
        """Full inference pass: heatmap(s), sampled goals, and k
        goal-conditioned trajectories per view.

        BEV trajectories are in absolute-frame meters, FPV in normalized
        pixels. FPV modes whose goal is invisible carry evaluable=False.
        """
        state, _ = self.encode(prep)
        mask = self.query_mask(prep, training=False)
        refined = self.refine(prep, state, mask)
        heat = self.heatmaps(prep, refined, mask)

        points = prep.candidates.points
        k, r = self.cfg.num_goals, self.cfg.coverage_radius
        if self.cfg.use_shared_queries:
            goal_set = hill_climb_sample(heat["bev"].numpy(), points, k=k, radius=r)
            goal_sets = {v: goal_set for v in VIEWS}
        else:
            goal_sets = {
                v: hill_climb_sample(heat[v].numpy(), points, k=k, radius=r) for v in VIEWS
            }

        cam = prep.sample.camera
        scale = np.array([cam.image_width, cam.image_height], dtype=float)
        out = {"heatmaps": {v: heat[v].numpy() for v in VIEWS}, "candidates": points}
        for v in VIEWS:
            gset = goal_sets[v]
            trajs, evaluable = [], []
            for idx in gset.indices:
                if v == "bev":
                    goal = torch.from_numpy(
                        np.ascontiguousarray(
                            to_absolute_frame(points[idx], prep.sample.frame)[:2]
                        )
                    ).to(self.dtype)
                    ok = True
                else:
                    uv, vis = project_to_fpv(points[idx], cam)
                    ok = bool(vis)
                    goal = (
                        torch.from_numpy(np.ascontiguousarray(uv / scale)).to(self.dtype)
                        if ok
                        else None
                    )
                trajs.append(self.decoder[v](state[v][prep.target_index], goal).numpy())
                evaluable.append(ok)
            out[v] = {
                "goal_indices": list(gset.indices),
                "goal_points": points[gset.indices].copy(),
                "trajectories": np.stack(trajs),
                "evaluable": evaluable,
            }
        return out
