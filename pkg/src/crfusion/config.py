"""Run configuration: a flat key = value text format with typed defaults.

Every knob of the simulator, model, loss and optimizer lives here so runs
are reproducible from one small file plus a seed. Unknown keys are rejected
(usage error), values are parsed according to the default's type.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .model import ModelConfig
from .simulator import CAR, PEDESTRIAN, SceneConfig


@dataclass
class RunConfig:
    # dataset / simulator
    train_scenes: int = 400
    eval_scenes: int = 100
    objects_min: int = 2
    objects_max: int = 6
    bev_bound: float = 22.0
    ego_speed_max: float = 8.0
    clutter_per_frame: int = 5
    frames: int = 5
    frame_dt: float = 0.1
    miss_car: float = 0.3605
    miss_ped: float = 0.7816
    range_sigma: float = 0.3
    azimuth_sigma_deg: float = 0.5
    velocity_sigma: float = 0.2
    n_cams: int = 4
    grid: int = 16
    focal: float = 7.0
    # model
    n_queries: int = 32
    radar_slots: int = 64
    channels: int = 32
    camera_layers: int = 2
    fusion_radii: tuple = (2.0, 2.0, 1.0)
    heads: int = 4
    ffn_hidden: int = 64
    radar_hidden: int = 64
    vision_only: bool = False
    use_mask: bool = True
    use_velocity_channels: bool = True
    resample_image: bool = True
    # loss
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    lambda_box: float = 0.25
    vel_weight: float = 1.0
    # optimizer
    optimizer: str = "adam"
    lr: float = 2e-3
    steps: int = 320
    batch_size: int = 4
    clip_norm: float = 10.0
    eval_every: int = 0  # 0: no mid-training eval
    eval_subset: int = 25
    # reproducibility
    seed: int = 0

    def scene_config(self) -> SceneConfig:
        return SceneConfig(
            objects_min=self.objects_min,
            objects_max=self.objects_max,
            bev_bound=self.bev_bound,
            miss_rates={CAR: self.miss_car, PEDESTRIAN: self.miss_ped},
            frames=self.frames,
            frame_dt=self.frame_dt,
            range_sigma=self.range_sigma,
            azimuth_sigma_deg=self.azimuth_sigma_deg,
            velocity_sigma=self.velocity_sigma,
            clutter_per_frame=self.clutter_per_frame,
            ego_speed_max=self.ego_speed_max,
            n_cams=self.n_cams,
            grid=self.grid,
            focal=self.focal,
            channels=self.channels,
            seed=self.seed,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            n_queries=self.n_queries,
            radar_slots=self.radar_slots,
            channels=self.channels,
            camera_layers=self.camera_layers,
            fusion_radii=tuple(self.fusion_radii),
            heads=self.heads,
            ffn_hidden=self.ffn_hidden,
            radar_hidden=self.radar_hidden,
            query_bound=self.bev_bound,
            vision_only=self.vision_only,
            use_mask=self.use_mask,
            use_velocity_channels=self.use_velocity_channels,
            resample_image=self.resample_image,
        )

    def to_flat_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, tuple):
                v = list(v)
            out[k] = v
        return out


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(x) for x in raw.split(",") if x.strip())
    return raw


def load_config(path=None, overrides=None) -> RunConfig:
    """Build a RunConfig from an optional key = value file plus overrides.

    Lines are ``key = value``; blank lines and '#' comments are skipped.
    Unknown keys raise ValueError (the CLI maps that to a usage error).
    """
    cfg = RunConfig()
    known = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    updates = {}
    if path is not None:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key = value")
                key, raw = line.split("=", 1)
                key = key.strip()
                if key not in known:
                    raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
                updates[key] = _parse_value(key, raw, known[key])
    if overrides:
        for key, value in overrides.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            if isinstance(value, str):
                value = _parse_value(key, value, known[key])
            updates[key] = value
    for key, value in updates.items():
        setattr(cfg, key, value)
    if len(cfg.fusion_radii) < 1 and not cfg.vision_only:
        raise ValueError("fusion_radii must name at least one stage radius")
    return cfg


def save_config(cfg: RunConfig, path):
    with open(path, "w") as fh:
        for key, value in cfg.to_flat_dict().items():
            if isinstance(value, list):
                value = ",".join(f"{v:g}" for v in value)
            fh.write(f"{key} = {value}\n")
