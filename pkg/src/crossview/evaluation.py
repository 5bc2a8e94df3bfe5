"""minADE/minFDE metrics, cross-view consistency verification and the
evaluation report.

BEV errors are in meters, FPV errors in raw pixels over evaluable (visible)
steps only; samples with no evaluable FPV step are excluded from the FPV
means and counted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .model import CrossViewModel, PreparedSample, prepare_sample
from .scene import Sample


class EvaluationError(ValueError):
    pass


def _per_step_errors(preds: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """(k, T) Euclidean distances restricted to valid steps -> (k, T_valid)."""
    preds = np.asarray(preds, dtype=float)
    gt = np.asarray(gt, dtype=float)
    d = np.linalg.norm(preds - gt[None, :, :], axis=-1)
    return d[:, valid]


def min_ade(preds: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> float | None:
    """Min over candidates of the mean per-step distance; None when no step
    is evaluable."""
    if valid is None:
        valid = np.ones(len(gt), dtype=bool)
    if len(preds) == 0 or not valid.any():
        return None
    return float(_per_step_errors(preds, gt, valid).mean(axis=1).min())


def min_fde(preds: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> float | None:
    """Min over candidates of the distance at the final evaluable step."""
    if valid is None:
        valid = np.ones(len(gt), dtype=bool)
    if len(preds) == 0 or not valid.any():
        return None
    last = int(np.flatnonzero(valid)[-1])
    d = np.linalg.norm(np.asarray(preds, dtype=float)[:, last, :] - np.asarray(gt, dtype=float)[last], axis=-1)
    return float(d.min())


def consistency_check(goal_indices_bev: list[int], goal_indices_fpv: list[int]) -> bool:
    """True iff the ordered index lists are identical. Order-sensitive: the
    sampler is deterministic, so any divergence is a real inconsistency."""
    return list(goal_indices_bev) == list(goal_indices_fpv)


def mode_coverage(goal_points: np.ndarray, branch_endpoints: np.ndarray, radius: float = 2.0) -> bool:
    """True iff every branch endpoint has a sampled goal within the radius."""
    d = np.linalg.norm(
        goal_points[:, None, :2] - np.asarray(branch_endpoints)[None, :, :2], axis=-1
    )
    return bool((d.min(axis=0) <= radius).all())


@dataclass
class EvalReport:
    bev_minade: float | None
    bev_minfde: float | None
    fpv_minade: float | None
    fpv_minfde: float | None
    fpv_skipped: int
    consistency_rate: float
    mode_coverage: float | None
    n: int

    def __post_init__(self):
        if not 0.0 <= self.consistency_rate <= 1.0:
            raise EvaluationError("consistency_rate outside [0, 1]")
        if self.mode_coverage is not None and not 0.0 <= self.mode_coverage <= 1.0:
            raise EvaluationError("mode_coverage outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "bev": {"minade": self.bev_minade, "minfde": self.bev_minfde},
            "fpv": {
                "minade": self.fpv_minade,
                "minfde": self.fpv_minfde,
                "skipped": self.fpv_skipped,
            },
            "consistency_rate": self.consistency_rate,
            "mode_coverage": self.mode_coverage,
            "n": self.n,
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def evaluate_prepared(prepared: list[PreparedSample], model: CrossViewModel,
                      coverage_radius: float = 2.0) -> EvalReport:
    """Run inference (random mask off, k from the model config) over the
    prepared samples and aggregate per-view metrics."""
    if not prepared:
        raise EvaluationError("empty dataset")
    bev_ades, bev_fdes, fpv_ades, fpv_fdes = [], [], [], []
    fpv_skipped = 0
    consistent = 0
    coverage_hits, coverage_total = 0, 0

    for prep in prepared:
        out = model.predict(prep)
        cam = prep.sample.camera
        scale = np.array([cam.image_width, cam.image_height], dtype=float)

        gt_bev = prep.future["bev"].numpy()
        ade = min_ade(out["bev"]["trajectories"], gt_bev)
        fde = min_fde(out["bev"]["trajectories"], gt_bev)
        if ade is not None:
            bev_ades.append(ade)
            bev_fdes.append(fde)

        valid = prep.future_valid["fpv"].numpy()
        evaluable = np.asarray(out["fpv"]["evaluable"], dtype=bool)
        preds_px = out["fpv"]["trajectories"][evaluable] * scale
        gt_px = prep.future["fpv"].numpy() * scale
        ade = min_ade(preds_px, gt_px, valid)
        if ade is None:
            fpv_skipped += 1
        else:
            fpv_ades.append(ade)
            fpv_fdes.append(min_fde(preds_px, gt_px, valid))

        if consistency_check(out["bev"]["goal_indices"], out["fpv"]["goal_indices"]):
            consistent += 1

        be = prep.sample.branch_endpoints
        if be is not None and len(be) >= 2:
            coverage_total += 1
            if mode_coverage(out["bev"]["goal_points"], be, radius=coverage_radius):
                coverage_hits += 1

    def mean(values):
        return float(np.mean(values)) if values else None

    return EvalReport(
        bev_minade=mean(bev_ades),
        bev_minfde=mean(bev_fdes),
        fpv_minade=mean(fpv_ades),
        fpv_minfde=mean(fpv_fdes),
        fpv_skipped=fpv_skipped,
        consistency_rate=consistent / len(prepared),
        mode_coverage=(coverage_hits / coverage_total) if coverage_total else None,
        n=len(prepared),
    )


def evaluate(samples: list[Sample], model: CrossViewModel,
             coverage_radius: float = 2.0) -> EvalReport:
    if not samples:
        raise EvaluationError("empty dataset")
    prepared = [prepare_sample(s, model.cfg) for s in samples]
    return evaluate_prepared(prepared, model, coverage_radius=coverage_radius)
