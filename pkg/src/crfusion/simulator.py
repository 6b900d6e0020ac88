"""Synthetic driving scenes: ground-truth objects, radar returns, camera features.

Scenes are generated deterministically from (config, seed). Objects get
non-overlapping BEV placements, headings, and heading-aligned velocities.
Radar frames carry per-class miss rates, range/azimuth noise, Doppler radial
velocities (plus clutter); the measured z is pinned near the sensor height,
so radar carries no height information. Camera feature maps hold smooth
per-object blobs whose channels encode class, image-space offset to center,
apparent size and heading, but never range directly: depth must be inferred
from apparent size, which object-size variation makes ambiguous, while
azimuth is sharp. That asymmetry is the whole point of fusing radar in.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, FeaturePyramid, GroundTruthBox, project_point
from .radar import DESK_SCHEMA, RadarFrameSet, RadarPoint, SCHEMAS

CLASS_NAMES = ("car", "pedestrian")
CAR, PEDESTRIAN = 0, 1

# Default per-class radar miss probabilities (production-fleet statistics).
DEFAULT_MISS_RATES = {CAR: 0.3605, PEDESTRIAN: 0.7816}

BASE_DIMS = {CAR: (1.6, 1.9, 4.5), PEDESTRIAN: (1.7, 0.7, 0.7)}
SPEED_RANGES = {CAR: (0.0, 15.0), PEDESTRIAN: (0.0, 2.0)}

RECORD_SCHEMA_VERSION = 1


def make_camera_rig(n_cams: int = 4, grid: int = 16, focal: float = 7.0,
                    height: float = 1.6) -> list:
    """Surround rig: n cameras at equal yaw spacing, +z optical axis forward."""
    cams = []
    for k in range(n_cams):
        yaw = 2.0 * math.pi * k / n_cams
        z_axis = np.array([math.cos(yaw), math.sin(yaw), 0.0])
        x_axis = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
        y_axis = np.array([0.0, 0.0, -1.0])
        rot = np.stack([x_axis, y_axis, z_axis])
        center = np.array([0.0, 0.0, height])
        extrinsic = np.eye(4)
        extrinsic[:3, :3] = rot
        extrinsic[:3, 3] = -rot @ center
        cams.append(
            CameraModel(
                extrinsic=extrinsic,
                fu=focal, fv=focal,
                cu=(grid - 1) / 2.0, cv=(grid - 1) / 2.0,
                width=grid, height=grid,
            )
        )
    return cams


@dataclass
class SceneConfig:
    """Everything the generator needs; all fields are plain config surface."""

    objects_min: int = 2
    objects_max: int = 6
    bev_bound: float = 22.0
    min_range: float = 4.0
    min_separation: float = 4.0
    class_mix: dict = field(default_factory=lambda: {CAR: 0.6, PEDESTRIAN: 0.4})
    miss_rates: dict = field(default_factory=lambda: dict(DEFAULT_MISS_RATES))
    dim_jitter: float = 0.10
    frames: int = 5
    frame_dt: float = 0.1
    range_sigma: float = 0.3
    azimuth_sigma_deg: float = 0.5
    velocity_sigma: float = 0.2
    z_sigma: float = 0.05
    sensor_height: float = 0.5
    clutter_per_frame: int = 5
    ego_speed_max: float = 8.0
    n_cams: int = 4
    grid: int = 16
    focal: float = 7.0
    cam_height: float = 1.6
    channels: int = 32
    pyramid_levels: int = 2
    radar_schema: str = DESK_SCHEMA.name
    seed: int = 0

    def __post_init__(self):
        if self.bev_bound > 50.0:
            raise ValueError("BEV bounds must stay inside the +/-50 m box")
        for p in self.miss_rates.values():
            if not 0.0 <= p <= 1.0:
                raise ValueError("miss probabilities must be in [0, 1]")
        if self.objects_min < 1 or self.objects_max < self.objects_min:
            raise ValueError("bad object count range")

    def cameras(self) -> list:
        return make_camera_rig(self.n_cams, self.grid, self.focal, self.cam_height)


@dataclass
class Scene:
    """One generated sample: objects, radar frames, feature pyramids, metadata."""

    ground_truth: list  # GroundTruthBox
    radar: RadarFrameSet
    pyramids: list  # FeaturePyramid per camera
    cameras: list  # CameraModel per camera
    meta: dict

    def objects_with_radar_hits(self) -> set:
        """Ground-truth indices that produced at least one radar return."""
        hits = set()
        for frame in self.radar.frames:
            for p in frame:
                if p.source_index >= 0:
                    hits.add(p.source_index)
        return hits


def _place_objects(cfg: SceneConfig, rng) -> list:
    count = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    classes = list(cfg.class_mix.keys())
    probs = np.array([cfg.class_mix[c] for c in classes], dtype=np.float64)
    probs = probs / probs.sum()
    objects = []
    centers = []
    for _ in range(count):
        cls = int(rng.choice(classes, p=probs))
        placed = False
        for _ in range(200):
            x = rng.uniform(-cfg.bev_bound, cfg.bev_bound)
            y = rng.uniform(-cfg.bev_bound, cfg.bev_bound)
            r = math.hypot(x, y)
            if r < cfg.min_range:
                continue
            if any(math.hypot(x - cx, y - cy) < cfg.min_separation
                   for cx, cy in centers):
                continue
            placed = True
            break
        if not placed:
            raise RuntimeError("object placement failed after bounded retries")
        dims = np.array(BASE_DIMS[cls]) * rng.uniform(
            1.0 - cfg.dim_jitter, 1.0 + cfg.dim_jitter, size=3
        )
        heading = rng.uniform(-math.pi, math.pi)
        lo, hi = SPEED_RANGES[cls]
        speed = rng.uniform(lo, hi)
        velocity = speed * np.array([math.cos(heading), math.sin(heading)])
        centers.append((x, y))
        objects.append(
            GroundTruthBox(
                cls=cls,
                center=np.array([x, y, dims[0] / 2.0]),
                dims=dims,
                heading=heading,
                velocity=velocity,
            )
        )
    return objects


def simulate_radar(objects, cfg: SceneConfig, rng, ego_velocity=None) -> RadarFrameSet:
    """Radar returns for the accumulation window, oldest frame first.

    Per object per frame a hit is drawn with probability 1 - miss(class);
    the measured position is the object center at that frame's time pushed
    to the sensor height plus range/azimuth noise, and the measured velocity
    is the radial projection of the object velocity (raw variant relative to
    the moving ego, compensated variant in the world frame). Clutter points
    are static world points with near-zero compensated velocity.
    """
    if ego_velocity is None:
        ego_velocity = np.zeros(2)
    ego_velocity = np.asarray(ego_velocity, dtype=np.float64)
    az_sigma = math.radians(cfg.azimuth_sigma_deg)
    frames = []
    poses = []
    for f in range(cfg.frames):
        t = -(cfg.frames - 1 - f) * cfg.frame_dt
        ego_pos = ego_velocity * t
        pose = np.eye(4)
        pose[:2, 3] = ego_pos
        poses.append(pose)
        points = []
        for idx, obj in enumerate(objects):
            if rng.random() < cfg.miss_rates.get(obj.cls, 0.0):
                continue
            world_xy = obj.center[:2] + obj.velocity * t
            rel_xy = world_xy - ego_pos
            rng_noise = rng.normal(0.0, cfg.range_sigma) if cfg.range_sigma else 0.0
            az_noise = rng.normal(0.0, az_sigma) if az_sigma else 0.0
            r = math.hypot(rel_xy[0], rel_xy[1])
            az = math.atan2(rel_xy[1], rel_xy[0])
            r_meas = max(r + rng_noise, 0.1)
            az_meas = az + az_noise
            pos = np.array(
                [
                    r_meas * math.cos(az_meas),
                    r_meas * math.sin(az_meas),
                    cfg.sensor_height
                    + (rng.normal(0.0, cfg.z_sigma) if cfg.z_sigma else 0.0),
                ]
            )
            los = rel_xy / r if r > 0 else np.array([1.0, 0.0])
            v_noise = rng.normal(0.0, cfg.velocity_sigma) if cfg.velocity_sigma else 0.0
            raw_speed = float((obj.velocity - ego_velocity) @ los) + v_noise
            raw = raw_speed * los
            comp = raw + float(ego_velocity @ los) * los
            moving = 1 if abs(float(obj.velocity @ los)) > 0.5 else 0
            fa = 0 if rng.random() < 0.9 else 1
            points.append(
                RadarPoint(
                    position=pos,
                    raw_velocity=raw,
                    comp_velocity=comp,
                    state_categories={"dynamic": moving, "false_alarm": fa},
                    time_offset=t,
                    source_index=idx,
                )
            )
        for _ in range(cfg.clutter_per_frame):
            world_xy = rng.uniform(-cfg.bev_bound, cfg.bev_bound, size=2)
            rel_xy = world_xy - ego_pos
            r = math.hypot(rel_xy[0], rel_xy[1])
            los = rel_xy / r if r > 0 else np.array([1.0, 0.0])
            v_noise = rng.normal(0.0, cfg.velocity_sigma) if cfg.velocity_sigma else 0.0
            raw_speed = float(-ego_velocity @ los) + v_noise
            raw = raw_speed * los
            comp = raw + float(ego_velocity @ los) * los
            fa = 1 if rng.random() < 0.7 else 0
            points.append(
                RadarPoint(
                    position=np.array([rel_xy[0], rel_xy[1],
                                       cfg.sensor_height
                                       + (rng.normal(0.0, cfg.z_sigma)
                                          if cfg.z_sigma else 0.0)]),
                    raw_velocity=raw,
                    comp_velocity=comp,
                    state_categories={"dynamic": 0, "false_alarm": fa},
                    time_offset=t,
                    source_index=-1,
                )
            )
        frames.append(points)
    return RadarFrameSet(frames=frames, ego_poses=poses, frame_dt=cfg.frame_dt)


# Channel layout of the rendered feature maps. Only the first 7 channels are
# populated; the remainder stay zero to fill the configured width.
FEAT_CAR, FEAT_PED, FEAT_DU, FEAT_DV, FEAT_SIZE, FEAT_SIN, FEAT_COS = range(7)
BLOB_FLOOR = 1e-4


def render_features(objects, cams, channels: int, levels: int, rng) -> list:
    """Rasterize each visible object as a localized blob per camera and level.

    The blob's amplitude channels carry class identity; offset channels point
    from the sampled cell toward the blob center in cells; the size channel
    carries apparent size (focal * object size / range), the only range cue;
    two channels carry the heading. Amplitude gets a small per-object jitter
    so scale is an honest, noisy cue.
    """
    pyramids = []
    amp_jitter = [float(rng.uniform(0.9, 1.1)) for _ in objects]
    for cam in cams:
        maps = []
        scales = []
        for l in range(levels):
            s = 1.0 / (2**l)
            h = max(int(round(cam.height * s)), 2)
            w = max(int(round(cam.width * s)), 2)
            maps.append(np.zeros((h, w, channels)))
            scales.append(s)
        for idx, obj in enumerate(objects):
            u, v, visible = project_point(obj.center, cam)
            if not visible:
                continue
            cam_pt = cam.extrinsic[:3, :3] @ obj.center + cam.extrinsic[:3, 3]
            depth = cam_pt[2]
            size_repr = float(np.mean(obj.dims))
            apparent = cam.fu * size_repr / depth
            sigma = max(0.5 * apparent, 0.6)
            amp = amp_jitter[idx]
            ch_cls = FEAT_CAR if obj.cls == CAR else FEAT_PED
            for level, s in zip(maps, scales):
                uc, vc = u * s, v * s
                sig = max(sigma * s, 0.5)
                h, w = level.shape[:2]
                u_lo = max(int(math.floor(uc - 3 * sig)), 0)
                u_hi = min(int(math.ceil(uc + 3 * sig)), w - 1)
                v_lo = max(int(math.floor(vc - 3 * sig)), 0)
                v_hi = min(int(math.ceil(vc + 3 * sig)), h - 1)
                for vi in range(v_lo, v_hi + 1):
                    for ui in range(u_lo, u_hi + 1):
                        du = uc - ui
                        dv = vc - vi
                        g = amp * math.exp(-(du * du + dv * dv) / (2 * sig * sig))
                        if g < BLOB_FLOOR:
                            continue
                        cell = level[vi, ui]
                        cell[ch_cls] += g
                        cell[FEAT_DU] += du * g
                        cell[FEAT_DV] += dv * g
                        cell[FEAT_SIZE] += apparent * s * g
                        cell[FEAT_SIN] += math.sin(obj.heading) * g
                        cell[FEAT_COS] += math.cos(obj.heading) * g
        pyramids.append(FeaturePyramid(levels=maps, scales=scales))
    return pyramids


def generate_scene(cfg: SceneConfig, seed: int) -> Scene:
    """Deterministic scene: (cfg, seed) fully determine every array bit."""
    ss = np.random.SeedSequence(entropy=[seed, cfg.seed])
    rng_obj, rng_radar, rng_feat, rng_ego = (
        np.random.default_rng(s) for s in ss.spawn(4)
    )
    objects = _place_objects(cfg, rng_obj)
    ego_speed = float(rng_ego.uniform(0.0, cfg.ego_speed_max))
    ego_velocity = np.array([ego_speed, 0.0])
    radar = simulate_radar(objects, cfg, rng_radar, ego_velocity)
    cams = cfg.cameras()
    pyramids = render_features(objects, cams, cfg.channels, cfg.pyramid_levels,
                               rng_feat)
    return Scene(
        ground_truth=objects,
        radar=radar,
        pyramids=pyramids,
        cameras=cams,
        meta={
            "seed": int(seed),
            "ego_velocity": ego_velocity.tolist(),
            "radar_schema": cfg.radar_schema,
        },
    )


# --- serialization: one scene per line, floats as 17-significant-digit text ---


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, dict):
        inner = ",".join(f"{json.dumps(str(k))}:{_fmt(v)}" for k, v in x.items())
        return "{" + inner + "}"
    if isinstance(x, (list, tuple, np.ndarray)):
        seq = x.tolist() if isinstance(x, np.ndarray) else x
        return "[" + ",".join(_fmt(v) for v in seq) + "]"
    raise TypeError(f"cannot serialize {type(x)!r}")


def scene_to_record(scene: Scene) -> str:
    schema = SCHEMAS[scene.meta.get("radar_schema", DESK_SCHEMA.name)]
    rec = {
        "schema": RECORD_SCHEMA_VERSION,
        "seed": scene.meta["seed"],
        "ego_velocity": scene.meta["ego_velocity"],
        "radar_schema": schema.to_dict(),
        "objects": [b.record() for b in scene.ground_truth],
        "radar": {
            "frame_dt": scene.radar.frame_dt,
            "poses": [p.reshape(-1) for p in scene.radar.ego_poses],
            "frames": [[p.record() for p in frame] for frame in scene.radar.frames],
        },
        "cameras": [c.to_dict() for c in scene.cameras],
        "pyramids": [
            {
                "levels": [
                    {
                        "shape": list(level.shape),
                        "scale": sc,
                        "data": level.reshape(-1),
                    }
                    for level, sc in zip(pyr.levels, pyr.scales)
                ]
            }
            for pyr in scene.pyramids
        ],
    }
    return _fmt(rec)


def scene_from_record(line: str) -> Scene:
    rec = json.loads(line)
    if rec.get("schema") != RECORD_SCHEMA_VERSION:
        raise ValueError(f"unsupported scene record schema {rec.get('schema')!r}")
    objects = [GroundTruthBox.from_record(r) for r in rec["objects"]]
    radar = RadarFrameSet(
        frames=[[RadarPoint.from_record(p) for p in frame]
                for frame in rec["radar"]["frames"]],
        ego_poses=[np.asarray(p).reshape(4, 4) for p in rec["radar"]["poses"]],
        frame_dt=rec["radar"]["frame_dt"],
    )
    cams = [CameraModel.from_dict(d) for d in rec["cameras"]]
    pyramids = [
        FeaturePyramid(
            levels=[
                np.asarray(lv["data"], dtype=np.float64).reshape(lv["shape"])
                for lv in p["levels"]
            ],
            scales=[lv["scale"] for lv in p["levels"]],
        )
        for p in rec["pyramids"]
    ]
    return Scene(
        ground_truth=objects,
        radar=radar,
        pyramids=pyramids,
        cameras=cams,
        meta={
            "seed": rec["seed"],
            "ego_velocity": rec["ego_velocity"],
            "radar_schema": rec["radar_schema"]["name"],
        },
    )


def write_dataset(path, scenes):
    with open(path, "w") as fh:
        for scene in scenes:
            fh.write(scene_to_record(scene))
            fh.write("\n")


def read_dataset(path) -> list:
    scenes = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                scenes.append(scene_from_record(line))
    return scenes
