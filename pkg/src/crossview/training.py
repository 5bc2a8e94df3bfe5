"""Composite objective, Adam optimization loop, configuration and
checkpointing. Training is deterministic: identical config and seed yield
bit-identical parameter trajectories and checkpoints.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, asdict

import numpy as np
import torch

from .model import CrossViewModel, ModelConfig, PreparedSample, collate_batch, prepare_sample
from .nn import save_checkpoint, load_checkpoint
from .scene import Sample

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    # Loss weights: per-term and per-view.
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    w_bev: float = 1.0
    w_fpv: float = 1.0
    mask_probability: float = 0.1  # beta
    coarse_threshold: float = 0.05  # eps
    use_shared_queries: bool = True
    use_random_mask: bool = True
    use_cross_attention: bool = True
    learning_rate: float = 1e-3
    lr_decay: float = 1.0  # per-epoch multiplicative decay
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    val_fraction: float = 0.1
    val_every: int = 5
    refinement_rounds: int = 1
    num_goals: int = 6
    coverage_radius: float = 2.0
    candidate_radius: float = 50.0
    dense_radius: float = 3.0
    dense_step: float = 1.0
    # Training dtype. float64 keeps training numerics and verification in
    # the same precision; float32 roughly halves wall-clock on one CPU core.
    # Checkpoints are stored as float64 either way.
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("w1", "w2", "w3", "w_bev", "w_fpv"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if not 0.0 <= self.mask_probability <= 1.0:
            raise ValueError("mask_probability must be in [0, 1]")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def model_config(self, t_obs: int, t_pred: int) -> ModelConfig:
        return ModelConfig(
            t_obs=t_obs,
            t_pred=t_pred,
            coarse_threshold=self.coarse_threshold,
            mask_probability=self.mask_probability,
            refinement_rounds=self.refinement_rounds,
            use_shared_queries=self.use_shared_queries,
            use_random_mask=self.use_random_mask,
            use_cross_attention=self.use_cross_attention,
            num_goals=self.num_goals,
            coverage_radius=self.coverage_radius,
            candidate_radius=self.candidate_radius,
            dense_radius=self.dense_radius,
            dense_step=self.dense_step,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)

    @classmethod
    def from_json_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        with open(path) as fh:
            obj = json.load(fh)
        obj.update(overrides or {})
        return cls.from_dict(obj)


def total_loss(components: dict, cfg: TrainConfig) -> torch.Tensor:
    """Weighted sum over views of the three loss terms:
    sum_m w_m (w1 L1_m + w2 L2_m + w3 L3_m)."""
    view_weight = {"bev": cfg.w_bev, "fpv": cfg.w_fpv}
    total = 0.0
    for view, terms in components.items():
        total = total + view_weight[view] * (
            cfg.w1 * terms["l1"] + cfg.w2 * terms["l2"] + cfg.w3 * terms["l3"]
        )
    return total


def mask_generator(seed: int, epoch: int, sample_index: int) -> torch.Generator:
    """Per-sample seeded stream for the random query mask; independent of
    batch order."""
    g = torch.Generator()
    g.manual_seed((seed * 1_000_003 + epoch) * 1_000_033 + sample_index)
    return g


def train_step(
    model: CrossViewModel,
    optimizer: torch.optim.Optimizer,
    batch: list[tuple[int, PreparedSample]],
    cfg: TrainConfig,
    epoch: int,
) -> float:
    """One Adam step on the mean total loss of the batch. Returns the loss
    value; aborts on a non-finite loss."""
    optimizer.zero_grad()
    collated = collate_batch([prep for _, prep in batch], dtype=model.dtype)
    generators = [mask_generator(cfg.seed, epoch, i) for i, _ in batch]
    components = model.compute_losses_batch(collated, training=True, generators=generators)
    loss = total_loss(components, cfg).mean()
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {float(loss.detach())} at epoch {epoch}")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def prepare_dataset(samples: list[Sample], model_cfg: ModelConfig) -> list[PreparedSample]:
    return [prepare_sample(s, model_cfg) for s in samples]


def split_dataset(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    return perm[n_val:], perm[:n_val]


def run_training(
    samples: list[Sample],
    cfg: TrainConfig,
    checkpoint_path=None,
    history_path=None,
) -> tuple[CrossViewModel, list[dict]]:
    """Epoch loop with seeded shuffling and periodic validation; retains the
    parameters with the best validation BEV minFDE. With zero epochs the
    initial parameters are returned."""
    from .evaluation import evaluate_prepared  # deferred: avoids module cycle

    if not samples:
        raise TrainingError("dataset is empty")
    t_pred = len(samples[0].future_bev)
    t_obs = len(samples[0].target_instance().polyline)
    model_cfg = cfg.model_config(t_obs, t_pred)

    torch.manual_seed(cfg.seed)
    model = CrossViewModel(model_cfg)
    if cfg.torch_dtype is not torch.float64:
        model = model.to(cfg.torch_dtype)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)

    prepared = prepare_dataset(samples, model_cfg)
    train_idx, val_idx = split_dataset(len(prepared), cfg.val_fraction, cfg.seed)
    if len(train_idx) == 0:
        train_idx = np.arange(len(prepared))
    train_set = [(int(i), prepared[int(i)]) for i in train_idx]
    val_set = [prepared[int(i)] for i in val_idx]

    best_state = copy.deepcopy(model.state_dict())
    best_minfde = float("inf")
    history: list[dict] = []
    shuffle_rng = np.random.default_rng(cfg.seed + 1)

    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.lr_decay**epoch
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = shuffle_rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[int(i)] for i in order[start : start + cfg.batch_size]]
            losses.append(train_step(model, optimizer, batch, cfg, epoch))
        record = {"epoch": epoch, "train_loss": float(np.mean(losses))}

        last = epoch == cfg.epochs - 1
        if val_set and (last or (epoch + 1) % cfg.val_every == 0):
            model.eval()
            report = evaluate_prepared(val_set, model)
            model.train()
            record["val_bev_minfde"] = report.bev_minfde
            if report.bev_minfde is not None and report.bev_minfde < best_minfde:
                best_minfde = report.bev_minfde
                best_state = copy.deepcopy(model.state_dict())
        history.append(record)
        log.info("epoch %d: %s", epoch, record)

    if cfg.epochs > 0 and best_minfde < float("inf"):
        model.load_state_dict(best_state)

    if checkpoint_path is not None:
        save_model(checkpoint_path, model, cfg)
    if history_path is not None:
        with open(history_path, "w") as fh:
            json.dump(history, fh, indent=2)
    return model, history


def save_model(path, model: CrossViewModel, train_cfg: TrainConfig | None = None):
    extra = {"model_config": model.cfg.to_dict()}
    if train_cfg is not None:
        extra["train_config"] = train_cfg.to_dict()
    save_checkpoint(path, model, extra=extra)


def load_model(path, override_cfg: ModelConfig | None = None) -> tuple[CrossViewModel, dict]:
    state, extra = load_checkpoint(path)
    if "model_config" not in extra:
        raise TrainingError("checkpoint missing model_config")
    cfg = override_cfg or ModelConfig.from_dict(extra["model_config"])
    model = CrossViewModel(cfg)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise TrainingError(f"checkpoint/config mismatch: {exc}") from exc
    model.eval()
    return model, extra
