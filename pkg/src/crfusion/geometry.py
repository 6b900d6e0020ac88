"""Box codec, pinhole projection, feature-pyramid sampling, BEV distance.

Boxes are annotated as an 11-component record (class, center, dims, heading
as sin/cos, planar velocity). The network regresses a 10-component encoding:
center offsets against a query reference point, log dimensions, heading
sin/cos, and velocity. The codec here converts between the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass
class GroundTruthBox:
    """An annotated 3D box: class, center (m), dims h/w/l (m), heading, velocity."""

    cls: int
    center: np.ndarray
    dims: np.ndarray
    heading: float
    velocity: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.dims = np.asarray(self.dims, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if np.any(self.dims <= 0.0):
            raise ValueError(f"box dims must be positive, got {self.dims}")
        # keep heading in (-pi, pi]
        h = math.atan2(math.sin(self.heading), math.cos(self.heading))
        self.heading = math.pi if h == -math.pi else h

    def record(self) -> list:
        """The 11-component annotation vector [cls, x, y, z, h, w, l, sin, cos, vx, vy]."""
        return [
            float(self.cls),
            *self.center.tolist(),
            *self.dims.tolist(),
            math.sin(self.heading),
            math.cos(self.heading),
            *self.velocity.tolist(),
        ]

    @classmethod
    def from_record(cls, rec) -> "GroundTruthBox":
        rec = list(rec)
        if len(rec) != 11:
            raise ValueError(f"box record must have 11 entries, got {len(rec)}")
        return cls(
            cls=int(rec[0]),
            center=rec[1:4],
            dims=rec[4:7],
            heading=math.atan2(rec[7], rec[8]),
            velocity=rec[9:11],
        )


@dataclass
class BoxPrediction:
    """Per-query network output: class probabilities plus the 10-dim regression."""

    class_scores: np.ndarray  # (n_classes,), each in [0, 1]
    reg: np.ndarray  # (dx, dy, dz, log h, log w, log l, sin, cos, vx, vy)
    reference_point: np.ndarray  # the query position the offsets are relative to

    def __post_init__(self):
        self.class_scores = np.asarray(self.class_scores, dtype=np.float64)
        self.reg = np.asarray(self.reg, dtype=np.float64)
        self.reference_point = np.asarray(self.reference_point, dtype=np.float64)
        if self.reg.shape != (10,):
            raise ValueError(f"regression vector must have 10 components, got {self.reg.shape}")


def decode_box(reference_point, reg) -> GroundTruthBox:
    """Regression vector + reference point -> box estimate.

    center = reference + offsets, dims = exp(log dims), heading = atan2(sin, cos).
    The class id is not part of the regression and is left at -1.
    """
    reference_point = np.asarray(reference_point, dtype=np.float64)
    reg = np.asarray(reg, dtype=np.float64)
    if not np.all(np.isfinite(reg)):
        raise FloatingPointError("non-finite regression vector")
    return GroundTruthBox(
        cls=-1,
        center=reference_point + reg[0:3],
        dims=np.exp(reg[3:6]),
        heading=math.atan2(reg[6], reg[7]),
        velocity=reg[8:10].copy(),
    )


def encode_box(reference_point, gt: GroundTruthBox) -> np.ndarray:
    """Inverse of decode_box: the 10-dim regression target for a reference point."""
    reference_point = np.asarray(reference_point, dtype=np.float64)
    if np.any(gt.dims <= 0.0):
        raise ValueError("cannot encode non-positive dims")
    return np.concatenate(
        [
            gt.center - reference_point,
            np.log(gt.dims),
            [math.sin(gt.heading), math.cos(gt.heading)],
            gt.velocity,
        ]
    )


@dataclass
class CameraModel:
    """Pinhole camera: rigid ego->camera transform plus intrinsics.

    The image extent (width, height) is measured in feature-grid cells at the
    base pyramid level; sampleable coordinates run over [0, width-1] x
    [0, height-1]. Camera frame: +z forward (optical axis), +x right, +y down.
    """

    extrinsic: np.ndarray  # 4x4, ego -> camera
    fu: float
    fv: float
    cu: float
    cv: float
    width: int
    height: int

    def __post_init__(self):
        self.extrinsic = np.asarray(self.extrinsic, dtype=np.float64)
        if self.extrinsic.shape != (4, 4):
            raise ValueError("extrinsic must be 4x4")
        rot = self.extrinsic[:3, :3]
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("extrinsic rotation must be proper orthonormal")
        if self.fu <= 0 or self.fv <= 0:
            raise ValueError("focal lengths must be positive")

    def to_dict(self) -> dict:
        return {
            "extrinsic": self.extrinsic.reshape(-1).tolist(),
            "fu": self.fu,
            "fv": self.fv,
            "cu": self.cu,
            "cv": self.cv,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(
            extrinsic=np.asarray(d["extrinsic"], dtype=np.float64).reshape(4, 4),
            fu=d["fu"],
            fv=d["fv"],
            cu=d["cu"],
            cv=d["cv"],
            width=int(d["width"]),
            height=int(d["height"]),
        )


@dataclass
class FeaturePyramid:
    """k feature maps of shared channel width, finest first.

    ``scales[l]`` converts base-level pixel coordinates to level-l
    coordinates (e.g. 1.0 for the base map, 0.5 for a half-resolution map).
    """

    levels: list  # list of (H_l, W_l, C) float64 arrays
    scales: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ValueError("pyramid needs at least one level")
        self.levels = [
            np.ascontiguousarray(np.asarray(lv, dtype=np.float64)) for lv in self.levels
        ]
        widths = {lv.shape[2] for lv in self.levels}
        if len(widths) != 1:
            raise ValueError("all pyramid levels must share one channel count")
        if not self.scales:
            self.scales = [1.0 / (2**l) for l in range(len(self.levels))]

    @property
    def channels(self) -> int:
        return self.levels[0].shape[2]


MIN_DEPTH = 1e-6


def project_point(p, cam: CameraModel):
    """Pinhole-project an ego-frame point; returns (u, v, visible).

    visible is True when the point sits in front of the camera and its
    projection lands inside the image extent. Invisibility is a state,
    not an error.
    """
    p = np.asarray(p, dtype=np.float64)
    cam_pt = cam.extrinsic[:3, :3] @ p + cam.extrinsic[:3, 3]
    z = cam_pt[2]
    if z <= MIN_DEPTH:
        return 0.0, 0.0, False
    u = cam.cu + cam.fu * cam_pt[0] / z
    v = cam.cv + cam.fv * cam_pt[1] / z
    visible = 0.0 <= u <= cam.width - 1 and 0.0 <= v <= cam.height - 1
    return float(u), float(v), bool(visible)


def sample_level(level: np.ndarray, u: float, v: float) -> np.ndarray:
    """Bilinear sample of one (H, W, C) map with zero padding outside."""
    out = ad.bilinear_gather(level, ad.constant([[u, v]]))
    return out.data[0]


def sample_pyramid(pyramids, cams, p) -> np.ndarray:
    """Sum of bilinear samples of all levels of every camera that sees p.

    Returns the zero vector when no camera sees the point. ``pyramids`` is a
    list of FeaturePyramid, one per camera, sharing a channel count.
    """
    if len(pyramids) != len(cams):
        raise ValueError("need one pyramid per camera")
    c = pyramids[0].channels
    out = np.zeros(c, dtype=np.float64)
    for pyr, cam in zip(pyramids, cams):
        if pyr.channels != c:
            raise ValueError("pyramids must share the channel count")
        u, v, visible = project_point(p, cam)
        if not visible:
            continue
        for level, scale in zip(pyr.levels, pyr.scales):
            out = out + sample_level(level, u * scale, v * scale)
    return out


def project_points_graph(points: ad.Tensor, cam: CameraModel):
    """Differentiable projection of (N, 3) ego points into one camera.

    Returns (uv tensor (N, 2), visible bool (N,)). Points behind the camera
    are routed through a dummy depth so no division blows up; their samples
    are zeroed by the visibility gate downstream, which also zeroes their
    gradients.
    """
    rot = ad.constant(np.ascontiguousarray(cam.extrinsic[:3, :3].T))
    trans = ad.constant(cam.extrinsic[:3, 3])
    cam_pts = ad.add(ad.matmul(points, rot), trans)  # (N, 3)
    in_front = cam_pts.data[:, 2] > MIN_DEPTH
    gate = in_front.astype(np.float64)[:, None]
    z = ad.slice_cols(cam_pts, 2, 3)
    safe_z = ad.add(ad.mul(z, gate), 1.0 - gate)
    xy = ad.slice_cols(cam_pts, 0, 2)
    uv = ad.add(
        ad.mul(ad.div(xy, safe_z), np.array([cam.fu, cam.fv])),
        np.array([cam.cu, cam.cv]),
    )
    visible = (
        in_front
        & (uv.data[:, 0] >= 0.0)
        & (uv.data[:, 0] <= cam.width - 1)
        & (uv.data[:, 1] >= 0.0)
        & (uv.data[:, 1] <= cam.height - 1)
    )
    return uv, visible


def sample_pyramid_graph(points: ad.Tensor, pyramids, cams) -> ad.Tensor:
    """Differentiable sample_pyramid over a batch of reference points.

    Output is (N, C); rows for points no camera sees are exactly zero.
    Gradients flow into the point coordinates through the bilinear weights
    and the projection.
    """
    n = points.data.shape[0]
    c = pyramids[0].channels
    total = ad.constant(np.zeros((n, c)))
    for pyr, cam in zip(pyramids, cams):
        uv, visible = project_points_graph(points, cam)
        if not visible.any():
            continue
        gate = ad.constant(visible.astype(np.float64)[:, None])
        for level, scale in zip(pyr.levels, pyr.scales):
            sampled = ad.bilinear_gather(level, ad.mul(uv, scale))
            total = ad.add(total, ad.mul(sampled, gate))
    return total


def bev_distance(a, b) -> float:
    """Euclidean distance in the ground plane; z is ignored."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(math.hypot(a[0] - b[0], a[1] - b[1]))


def bev_distance_matrix(points_a: np.ndarray, points_b: np.ndarray) -> np.ndarray:
    """Pairwise BEV distances between (N, >=2) and (M, >=2) point arrays."""
    d = points_a[:, None, :2] - points_b[None, :, :2]
    return np.sqrt((d * d).sum(axis=2))
