"""Radar preprocessing and the radar feature / position-encoding networks.

Raw returns are filtered to the evaluated BEV box, accumulated over several
past frames with ego-motion compensation, expanded into fixed-width channel
vectors (continuous measurements plus one-hot state categories plus a time
offset), and pushed through two small MLPs: one learns a feature per point,
the other encodes its xyz position. The sum is the radar feature matrix
consumed by the fusion decoders, padded to a fixed row count so shapes are
static.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

BEV_FILTER_LIMIT = 50.0

# Padding rows carry this position: far beyond any attention radius, so no
# query can ever attend them.
SENTINEL_POSITION = (1e6, 1e6, 0.0)


@dataclass
class RadarPoint:
    """One radar return in some frame's ego coordinates.

    ``raw_velocity`` is the radial velocity as measured (relative to the
    moving sensor); ``comp_velocity`` has ego motion compensated away.
    ``state_categories`` holds small-integer sensor states keyed by name.
    ``source_index`` is simulator provenance (ground-truth object index, or
    -1 for clutter); it is never exposed to the network.
    """

    position: np.ndarray
    raw_velocity: np.ndarray
    comp_velocity: np.ndarray
    state_categories: dict = field(default_factory=dict)
    time_offset: float = 0.0
    source_index: int = -1

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.raw_velocity = np.asarray(self.raw_velocity, dtype=np.float64)
        self.comp_velocity = np.asarray(self.comp_velocity, dtype=np.float64)

    def record(self) -> list:
        return [
            *self.position.tolist(),
            *self.raw_velocity.tolist(),
            *self.comp_velocity.tolist(),
            {k: int(v) for k, v in self.state_categories.items()},
            float(self.time_offset),
            int(self.source_index),
        ]

    @classmethod
    def from_record(cls, rec) -> "RadarPoint":
        return cls(
            position=rec[0:3],
            raw_velocity=rec[3:5],
            comp_velocity=rec[5:7],
            state_categories={k: int(v) for k, v in rec[7].items()},
            time_offset=float(rec[8]),
            source_index=int(rec[9]),
        )


@dataclass
class RadarFrameSet:
    """Per-frame point lists (oldest first) with poses into the current frame."""

    frames: list  # list of lists of RadarPoint, each in its own ego frame
    ego_poses: list  # 4x4 rigid transforms, frame ego -> current ego
    frame_dt: float = 0.1

    def __post_init__(self):
        if len(self.frames) != len(self.ego_poses):
            raise ValueError("need one ego pose per radar frame")
        self.ego_poses = [np.asarray(p, dtype=np.float64) for p in self.ego_poses]


@dataclass
class RadarFeatureSet:
    """Fixed-size encoder output: features (M, C), positions (M, 3), validity."""

    features: ad.Tensor  # (M, C)
    positions: np.ndarray  # (M, 3), sentinel rows for padding
    valid: np.ndarray  # (M,) bool

    @property
    def slots(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class ChannelSchema:
    """Ordered layout of the per-point input vector.

    ``continuous`` names map to point attributes; ``categorical`` pairs
    (name, cardinality) expand to one-hot blocks. A trailing time-offset
    channel is always appended. The layout is serialized with every dataset
    so stored scenes are self-describing.
    """

    name: str
    continuous: tuple
    categorical: tuple  # ((name, cardinality), ...)

    @property
    def width(self) -> int:
        return len(self.continuous) + sum(c for _, c in self.categorical) + 1

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "continuous": list(self.continuous),
            "categorical": [[n, c] for n, c in self.categorical],
        }


# Desk-scale schema used by the simulator: 7 continuous + 5 one-hot + time = 13.
DESK_SCHEMA = ChannelSchema(
    name="desk14",
    continuous=("x", "y", "z", "vx", "vy", "vxc", "vyc"),
    categorical=(("dynamic", 3), ("false_alarm", 2)),
)

# Layout mirroring the 18-channel production radar format after one-hot
# expansion: 12 continuous measurements + quality/state one-hots + time = 36.
NUSCENES_SCHEMA = ChannelSchema(
    name="nuscenes36",
    continuous=(
        "x", "y", "z", "rcs",
        "vx", "vy", "vxc", "vyc",
        "x_rms", "y_rms", "vx_rms", "vy_rms",
    ),
    categorical=(
        ("quality_valid", 2),
        ("dynamic", 8),
        ("ambiguity", 5),
        ("false_alarm", 8),
    ),
)

SCHEMAS = {s.name: s for s in (DESK_SCHEMA, NUSCENES_SCHEMA)}


def filter_points(points) -> list:
    """Keep returns inside the evaluated +/-50 m BEV box (boundary inclusive)."""
    return [
        p
        for p in points
        if abs(p.position[0]) <= BEV_FILTER_LIMIT
        and abs(p.position[1]) <= BEV_FILTER_LIMIT
    ]


def accumulate(frames: RadarFrameSet) -> list:
    """Transform every frame's points into the current ego frame.

    Each output point is stamped with its source frame's time offset
    (0 for the newest frame, -k*dt for the k-th previous one).
    """
    n = len(frames.frames)
    out = []
    for k, (pts, pose) in enumerate(zip(frames.frames, frames.ego_poses)):
        if pose is None:
            raise ValueError(f"missing ego pose for radar frame {k}")
        offset = -(n - 1 - k) * frames.frame_dt
        rot = pose[:3, :3]
        trans = pose[:3, 3]
        for p in pts:
            out.append(
                RadarPoint(
                    position=rot @ p.position + trans,
                    raw_velocity=p.raw_velocity,
                    comp_velocity=p.comp_velocity,
                    state_categories=dict(p.state_categories),
                    time_offset=offset,
                    source_index=p.source_index,
                )
            )
    return out


def expand_channels(point: RadarPoint, schema: ChannelSchema = DESK_SCHEMA) -> np.ndarray:
    """Fixed-width input vector: continuous channels, one-hots, time offset."""
    values = {
        "x": point.position[0],
        "y": point.position[1],
        "z": point.position[2],
        "vx": point.raw_velocity[0],
        "vy": point.raw_velocity[1],
        "vxc": point.comp_velocity[0],
        "vyc": point.comp_velocity[1],
    }
    out = []
    for name in schema.continuous:
        if name in values:
            out.append(float(values[name]))
        else:
            out.append(float(point.state_categories.get(name, 0)))
    for name, card in schema.categorical:
        cat = int(point.state_categories.get(name, 0))
        if not 0 <= cat < card:
            raise ValueError(
                f"category {name}={cat} outside schema cardinality {card}"
            )
        onehot = [0.0] * card
        onehot[cat] = 1.0
        out.extend(onehot)
    out.append(float(point.time_offset))
    return np.asarray(out, dtype=np.float64)


def init_radar_params(store: ad.ParamStore, rng, in_width: int, channels: int,
                      hidden: int = 64, prefix: str = "radar"):
    """Register the feature-MLP and position-MLP weights."""

    def lin(name, n_in, n_out):
        bound = np.sqrt(6.0 / (n_in + n_out))
        store.add(f"{prefix}.{name}.w", rng.uniform(-bound, bound, size=(n_in, n_out)))
        store.add(f"{prefix}.{name}.b", np.zeros(n_out))

    lin("feat.0", in_width, hidden)
    lin("feat.1", hidden, channels)
    lin("feat.2", channels, channels)
    lin("pos.0", 3, hidden)
    lin("pos.1", hidden, channels)
    lin("pos.2", channels, channels)


def _mlp(store: ad.ParamStore, prefix: str, x: ad.Tensor) -> ad.Tensor:
    h = ad.relu(ad.linear_forward(x, store[f"{prefix}.0.w"], store[f"{prefix}.0.b"]))
    h = ad.relu(ad.linear_forward(h, store[f"{prefix}.1.w"], store[f"{prefix}.1.b"]))
    return ad.linear_forward(h, store[f"{prefix}.2.w"], store[f"{prefix}.2.b"])


def encode_radar(points, store: ad.ParamStore, slots: int, channels: int,
                 schema: ChannelSchema = DESK_SCHEMA,
                 prefix: str = "radar",
                 use_velocity_channels: bool = True) -> RadarFeatureSet:
    """Per-point feature MLP + position-encoding MLP, padded to ``slots`` rows.

    Points are processed independently; the combined row is the sum of the
    learned feature and the position encoding. If more points arrive than
    slots, the ones nearest the ego origin are kept (deterministic, stable
    order). Padding rows have zero features, sentinel positions and
    ``valid=False``. ``use_velocity_channels=False`` zeroes the four velocity
    channels before the network sees them (ablation switch).
    """
    points = list(points)
    if len(points) > slots:
        order = np.argsort(
            [float(np.hypot(p.position[0], p.position[1])) for p in points],
            kind="stable",
        )
        points = [points[i] for i in order[:slots]]

    positions = np.tile(np.asarray(SENTINEL_POSITION), (slots, 1))
    valid = np.zeros(slots, dtype=bool)
    if not points:
        return RadarFeatureSet(
            features=ad.constant(np.zeros((slots, channels))),
            positions=positions,
            valid=valid,
        )

    channel_rows = np.stack([expand_channels(p, schema) for p in points])
    if not use_velocity_channels:
        vel_idx = [
            i for i, name in enumerate(schema.continuous)
            if name in ("vx", "vy", "vxc", "vyc")
        ]
        channel_rows[:, vel_idx] = 0.0
    xyz = np.stack([p.position for p in points])

    feat = _mlp(store, f"{prefix}.feat", ad.constant(channel_rows))
    pos = _mlp(store, f"{prefix}.pos", ad.constant(xyz))
    combined = ad.add(feat, pos)  # (n, C)

    n = len(points)
    pad = ad.constant(np.zeros((slots - n, channels)))
    features = ad.concat([combined, pad], axis=0) if n < slots else combined
    positions[:n] = xyz
    valid[:n] = True
    return RadarFeatureSet(features=features, positions=positions, valid=valid)
