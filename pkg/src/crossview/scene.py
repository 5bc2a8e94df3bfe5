"""Vectorized scenes: synthetic intersection generation, per-view
vectorization, sequence filtering and JSON-Lines serialization.

A scene holds agent and lane instances as 3D polylines in a common world
frame. The BEV view expresses them in the sequence's absolute frame
(meters); the FPV view projects them through the front camera and
normalizes pixels by the image size.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    AbsoluteFrame,
    CameraModel,
    default_camera,
    is_visible,
    project_to_fpv,
    to_absolute_frame,
    wrap_angle,
)

# VectorFeature layout: start(2) end(2) type_onehot(3) time_index valid pad
FEATURE_WIDTH = 10
TYPE_TARGET, TYPE_AGENT, TYPE_LANE = 0, 1, 2

KIND_AGENT = "agent"
KIND_LANE = "lane"

DATASET_FORMAT = "crossview-scenes-v1"


class SceneError(ValueError):
    pass


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed; names line and field."""


@dataclass
class Instance:
    id: int
    kind: str  # agent | lane
    label: str
    polyline: np.ndarray  # (P, 3) world frame; agents carry T_obs points

    def __post_init__(self):
        self.polyline = np.asarray(self.polyline, dtype=float)
        if self.polyline.ndim != 2 or self.polyline.shape[1] != 3:
            raise SceneError(f"polyline must be (P, 3), got {self.polyline.shape}")
        if len(self.polyline) < 2:
            raise SceneError("polyline needs at least 2 points")
        if self.kind not in (KIND_AGENT, KIND_LANE):
            raise SceneError(f"unknown instance kind {self.kind!r}")


@dataclass
class Sample:
    instances: list[Instance]
    target_id: int
    future_bev: np.ndarray  # (T_pred, 2) world frame, meters
    camera: CameraModel
    frame: AbsoluteFrame
    # Noiseless per-branch future endpoints (world xy), used to score mode
    # coverage on synthetic scenes. Optional.
    branch_endpoints: np.ndarray | None = None

    def __post_init__(self):
        self.future_bev = np.asarray(self.future_bev, dtype=float)
        ids = [inst.id for inst in self.instances]
        if len(set(ids)) != len(ids):
            raise SceneError("duplicate instance ids")
        if self.target_id not in ids:
            raise SceneError(f"target_id {self.target_id} not among instances")
        if self.target_instance().kind != KIND_AGENT:
            raise SceneError("target instance must be an agent")

    def target_instance(self) -> Instance:
        for inst in self.instances:
            if inst.id == self.target_id:
                return inst
        raise SceneError("target instance missing")

    def future_fpv(self) -> tuple[np.ndarray, np.ndarray]:
        """Project the BEV future (lifted to z = 0) into the camera.

        Returns (uv_pixels (T, 2), visible (T,)).
        """
        pts = np.concatenate([self.future_bev, np.zeros((len(self.future_bev), 1))], axis=1)
        return project_to_fpv(pts, self.camera)


@dataclass
class VectorizedView:
    view: str  # bev | fpv
    features: np.ndarray  # (N, V_max, FEATURE_WIDTH)
    valid: np.ndarray  # (N, V_max) bool
    instance_visible: np.ndarray  # (N,) bool
    instance_ids: list[int]
    instance_kinds: list[str]
    instance_labels: list[str]
    target_index: int


@dataclass
class GenConfig:
    """Synthetic intersection scene parameters."""

    branches: int = 2
    t_obs: int = 8
    t_pred: int = 12
    dt: float = 0.2
    noise: float = 0.2  # per-step Gaussian position noise, meters
    speed: float = 5.0  # target speed, m/s
    lane_vertex_spacing: float = 3.0
    lane_half_width: float = 1.75
    turn_radius: float = 6.0
    approach_length: float = 26.0  # inbound lane length before the junction
    outbound_length: float = 26.0
    entry_gap: float = 2.0  # distance from last observed point to the junction
    max_neighbors: int = 4
    camera_focal: float = 800.0
    image_width: int = 1280
    image_height: int = 720
    camera_height: float = 1.6

    def validate(self):
        if not 2 <= self.branches <= 4:
            raise SceneError(f"branches must be in [2, 4], got {self.branches}")
        if self.t_obs < 2 or self.t_pred < 1:
            raise SceneError("need t_obs >= 2 and t_pred >= 1")
        if self.noise < 0:
            raise SceneError("noise must be >= 0")
        if self.dt <= 0 or self.speed <= 0:
            raise SceneError("dt and speed must be positive")


def _resample_polyline(points: np.ndarray, spacing: float) -> np.ndarray:
    """Resample a 2D polyline at roughly uniform arc-length spacing,
    keeping both endpoints."""
    seg = np.diff(points, axis=0)
    lengths = np.linalg.norm(seg, axis=1)
    total = lengths.sum()
    n = max(int(round(total / spacing)), 1)
    s_targets = np.linspace(0.0, total, n + 1)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    out = np.empty((len(s_targets), 2))
    for i, s in enumerate(s_targets):
        j = np.searchsorted(cum, s, side="right") - 1
        j = min(j, len(lengths) - 1)
        t = 0.0 if lengths[j] == 0 else (s - cum[j]) / lengths[j]
        out[i] = points[j] + t * seg[j]
    return out


def _point_at_arclength(points: np.ndarray, s: float) -> np.ndarray:
    """Point at arc length s along a 2D polyline (clamped to its ends)."""
    seg = np.diff(points, axis=0)
    lengths = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    s = min(max(s, 0.0), cum[-1])
    j = np.searchsorted(cum, s, side="right") - 1
    j = min(j, len(lengths) - 1)
    t = 0.0 if lengths[j] == 0 else (s - cum[j]) / lengths[j]
    return points[j] + t * seg[j]


def _arc(center: np.ndarray, radius: float, start_angle: float, end_angle: float, n: int = 24) -> np.ndarray:
    angles = np.linspace(start_angle, end_angle, n)
    return center + radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _branch_paths(cfg: GenConfig) -> list[np.ndarray]:
    """Center-line paths of the outgoing branches, each starting at the
    junction entry point (0, 0) and heading +x initially."""
    r = cfg.turn_radius
    out = cfg.outbound_length
    straight = np.array([[0.0, 0.0], [out + r, 0.0]])
    # Left turn: quarter arc about (0, r), then straight along +y.
    left_arc = _arc(np.array([0.0, r]), r, -math.pi / 2, 0.0)
    left = np.concatenate([left_arc, np.array([[r, r + out]])])
    # Right turn: mirror image.
    right = left * np.array([1.0, -1.0])
    # Shallow left: 45-degree arc with a wider radius, then straight.
    r2 = 2.0 * r
    diag_arc = _arc(np.array([0.0, r2]), r2, -math.pi / 2, -math.pi / 4)
    d = np.array([math.cos(math.pi / 4), math.sin(math.pi / 4)])
    diag = np.concatenate([diag_arc, [diag_arc[-1] + out * d]])
    return [straight, left, right, diag][: cfg.branches]


def generate_synthetic_scene(seed: int, config: GenConfig | None = None) -> Sample:
    """Generate one intersection scene, deterministically from the seed.

    The target agent approaches the junction along an inbound lane over
    t_obs steps, then follows a uniformly chosen branch for t_pred steps.
    Neighbor agents travel along other lanes. Per-step Gaussian noise of
    scale config.noise is added to every agent position.
    """
    cfg = config or GenConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)

    inbound = np.array([[-cfg.approach_length, 0.0], [0.0, 0.0]])
    branches = _branch_paths(cfg)
    lane_paths = [inbound] + branches
    lane_labels = ["inbound"] + [f"branch_{i}" for i in range(len(branches))]

    step = cfg.speed * cfg.dt
    chosen = int(rng.integers(len(branches)))

    # Target path: inbound lane followed by the chosen branch.
    full_paths = [np.concatenate([inbound, b[1:]], axis=0) for b in branches]
    s_entry = cfg.approach_length
    s_last_obs = s_entry - cfg.entry_gap
    s_obs = s_last_obs - step * np.arange(cfg.t_obs - 1, -1, -1)
    s_fut = s_last_obs + step * np.arange(1, cfg.t_pred + 1)

    target_path = full_paths[chosen]
    obs = np.stack([_point_at_arclength(target_path, s) for s in s_obs])
    fut = np.stack([_point_at_arclength(target_path, s) for s in s_fut])
    branch_endpoints = np.stack(
        [_point_at_arclength(p, s_fut[-1]) for p in full_paths]
    )

    if cfg.noise > 0:
        obs = obs + rng.normal(0.0, cfg.noise, obs.shape)
        fut = fut + rng.normal(0.0, cfg.noise, fut.shape)

    instances: list[Instance] = []
    next_id = 0
    target_id = next_id
    instances.append(
        Instance(
            id=next_id,
            kind=KIND_AGENT,
            label="target",
            polyline=np.concatenate([obs, np.zeros((len(obs), 1))], axis=1),
        )
    )
    next_id += 1

    n_neighbors = int(rng.integers(cfg.max_neighbors + 1))
    for _ in range(n_neighbors):
        path = full_paths[int(rng.integers(len(full_paths)))]
        total = np.linalg.norm(np.diff(path, axis=0), axis=1).sum()
        speed = rng.uniform(3.0, 7.0)
        start = rng.uniform(0.0, max(total - speed * cfg.dt * cfg.t_obs, 1.0))
        s_nb = start + speed * cfg.dt * np.arange(cfg.t_obs)
        traj = np.stack([_point_at_arclength(path, s) for s in s_nb])
        if cfg.noise > 0:
            traj = traj + rng.normal(0.0, cfg.noise, traj.shape)
        instances.append(
            Instance(
                id=next_id,
                kind=KIND_AGENT,
                label="neighbor",
                polyline=np.concatenate([traj, np.zeros((len(traj), 1))], axis=1),
            )
        )
        next_id += 1

    for path, label in zip(lane_paths, lane_labels):
        pts = _resample_polyline(path, cfg.lane_vertex_spacing)
        instances.append(
            Instance(
                id=next_id,
                kind=KIND_LANE,
                label=label,
                polyline=np.concatenate([pts, np.zeros((len(pts), 1))], axis=1),
            )
        )
        next_id += 1

    origin = np.array([obs[0, 0], obs[0, 1], 0.0])
    # Initial forward direction follows the (noiseless) inbound lane.
    heading = wrap_angle(math.atan2(0.0, 1.0))
    frame = AbsoluteFrame(origin=origin, heading=heading)
    camera = default_camera(
        frame,
        focal=cfg.camera_focal,
        image_width=cfg.image_width,
        image_height=cfg.image_height,
        height=cfg.camera_height,
    )
    return Sample(
        instances=instances,
        target_id=target_id,
        future_bev=fut,
        camera=camera,
        frame=frame,
        branch_endpoints=branch_endpoints,
    )


def _type_onehot(inst: Instance, is_target: bool) -> np.ndarray:
    onehot = np.zeros(3)
    if inst.kind == KIND_LANE:
        onehot[TYPE_LANE] = 1.0
    elif is_target:
        onehot[TYPE_TARGET] = 1.0
    else:
        onehot[TYPE_AGENT] = 1.0
    return onehot


def _assemble_view(
    view: str,
    sample: Sample,
    per_instance_rows: list[np.ndarray],
) -> VectorizedView:
    n = len(sample.instances)
    v_max = max((len(r) for r in per_instance_rows), default=0)
    v_max = max(v_max, 1)
    features = np.zeros((n, v_max, FEATURE_WIDTH))
    valid = np.zeros((n, v_max), dtype=bool)
    visible = np.zeros(n, dtype=bool)
    target_index = -1
    for i, (inst, rows) in enumerate(zip(sample.instances, per_instance_rows)):
        if inst.id == sample.target_id:
            target_index = i
        if len(rows):
            features[i, : len(rows)] = rows
            valid[i, : len(rows)] = True
            visible[i] = True
    return VectorizedView(
        view=view,
        features=features,
        valid=valid,
        instance_visible=visible,
        instance_ids=[inst.id for inst in sample.instances],
        instance_kinds=[inst.kind for inst in sample.instances],
        instance_labels=[inst.label for inst in sample.instances],
        target_index=target_index,
    )


def _vector_rows(inst: Instance, is_target: bool, coords: np.ndarray, keep: np.ndarray, t_obs: int) -> np.ndarray:
    """Build (start, end) vector features from per-vertex 2D coords.

    keep marks vertices usable in this view; a vector survives only if both
    endpoints are kept.
    """
    onehot = _type_onehot(inst, is_target)
    rows = []
    n_vec = len(coords) - 1
    for j in range(n_vec):
        if not (keep[j] and keep[j + 1]):
            continue
        time_index = 0.0 if inst.kind == KIND_LANE else (j + 1) / t_obs
        rows.append(
            np.concatenate([coords[j], coords[j + 1], onehot, [time_index, 1.0, 0.0]])
        )
    return np.asarray(rows).reshape(-1, FEATURE_WIDTH)


def vectorize_bev(sample: Sample, t_obs: int | None = None) -> VectorizedView:
    """Express every instance in the absolute frame and emit consecutive
    (start, end) vectors. Everything is visible in BEV."""
    t_obs = t_obs or len(sample.target_instance().polyline)
    rows = []
    for inst in sample.instances:
        coords = to_absolute_frame(inst.polyline, sample.frame)[:, :2]
        keep = np.ones(len(coords), dtype=bool)
        rows.append(_vector_rows(inst, inst.id == sample.target_id, coords, keep, t_obs))
    return _assemble_view("bev", sample, rows)


def vectorize_fpv(sample: Sample, t_obs: int | None = None) -> VectorizedView:
    """Project every instance into the front camera; drop vectors with any
    invisible endpoint; normalize pixels by the image size."""
    t_obs = t_obs or len(sample.target_instance().polyline)
    scale = np.array([sample.camera.image_width, sample.camera.image_height], dtype=float)
    rows = []
    for inst in sample.instances:
        pts = inst.polyline.copy()
        if inst.kind == KIND_AGENT:
            pts[:, 2] = 0.0
        uv, vis = project_to_fpv(pts, sample.camera)
        coords = np.where(vis[:, None], uv / scale, 0.0)
        rows.append(_vector_rows(inst, inst.id == sample.target_id, coords, vis, t_obs))
    return _assemble_view("fpv", sample, rows)


def visible_future_fraction(sample: Sample) -> float:
    _, vis = sample.future_fpv()
    return float(np.mean(vis))


def filter_unqualified(samples: list[Sample], min_visible_future_fraction: float = 0.5) -> list[Sample]:
    """Keep samples whose FPV future has at least the given fraction of
    visible steps; order preserved."""
    if not 0.0 <= min_visible_future_fraction <= 1.0:
        raise SceneError("min_visible_future_fraction must be in [0, 1]")
    return [s for s in samples if visible_future_fraction(s) >= min_visible_future_fraction]


# --- serialization ----------------------------------------------------------
#
# JSON Lines, one sample per line. Floats are encoded as decimal strings of
# binary64 via repr(), which round-trips exactly.


def _enc_floats(arr) -> list:
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        return [repr(float(x)) for x in arr]
    return [_enc_floats(row) for row in arr]


def _dec_floats(obj) -> np.ndarray:
    return np.asarray(obj, dtype=float)


def _sample_to_obj(sample: Sample) -> dict:
    cam = sample.camera
    obj = {
        "instances": [
            {
                "id": inst.id,
                "kind": inst.kind,
                "label": inst.label,
                "polyline": _enc_floats(inst.polyline),
            }
            for inst in sample.instances
        ],
        "target_id": sample.target_id,
        "future": _enc_floats(sample.future_bev),
        "camera": {
            "fx": repr(cam.focal_x),
            "fy": repr(cam.focal_y),
            "cx": repr(cam.principal_x),
            "cy": repr(cam.principal_y),
            "w": cam.image_width,
            "h": cam.image_height,
            "R": _enc_floats(cam.rotation.reshape(-1)),
            "t": _enc_floats(cam.translation),
        },
        "frame": {
            "origin": _enc_floats(sample.frame.origin),
            "heading": repr(sample.frame.heading),
        },
    }
    if sample.branch_endpoints is not None:
        obj["branch_endpoints"] = _enc_floats(sample.branch_endpoints)
    return obj


def _sample_from_obj(obj: dict) -> Sample:
    instances = [
        Instance(
            id=int(rec["id"]),
            kind=rec["kind"],
            label=rec["label"],
            polyline=_dec_floats(rec["polyline"]),
        )
        for rec in obj["instances"]
    ]
    cam_obj = obj["camera"]
    camera = CameraModel(
        focal_x=float(cam_obj["fx"]),
        focal_y=float(cam_obj["fy"]),
        principal_x=float(cam_obj["cx"]),
        principal_y=float(cam_obj["cy"]),
        image_width=int(cam_obj["w"]),
        image_height=int(cam_obj["h"]),
        rotation=_dec_floats(cam_obj["R"]).reshape(3, 3),
        translation=_dec_floats(cam_obj["t"]),
    )
    frame = AbsoluteFrame(
        origin=_dec_floats(obj["frame"]["origin"]),
        heading=float(obj["frame"]["heading"]),
    )
    branch_endpoints = None
    if "branch_endpoints" in obj:
        branch_endpoints = _dec_floats(obj["branch_endpoints"])
    return Sample(
        instances=instances,
        target_id=int(obj["target_id"]),
        future_bev=_dec_floats(obj["future"]),
        camera=camera,
        frame=frame,
        branch_endpoints=branch_endpoints,
    )


def save_dataset(samples: list[Sample], path):
    with open(path, "w") as fh:
        for sample in samples:
            fh.write(json.dumps(_sample_to_obj(sample)) + "\n")


def load_dataset(path) -> list[Sample]:
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {lineno}: invalid JSON ({exc})") from exc
            try:
                samples.append(_sample_from_obj(obj))
            except (KeyError, ValueError, TypeError) as exc:
                field_name = exc.args[0] if isinstance(exc, KeyError) else exc
                raise DatasetFormatError(f"line {lineno}: bad field {field_name}") from exc
    return samples
