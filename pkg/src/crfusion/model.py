"""Full detector assembly: camera decoder stack, radar encoder, fusion cascade.

One ``FusionDetector`` owns the parameter store and knows how to run a scene
forward, collect every supervised prediction set for the training loss, and
decode the final predictions into detections for scoring. A vision-only
variant simply skips the radar encoder and fusion stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import radar as radar_mod
from .fusion import init_fusion_params, make_stages, run_fusion
from .geometry import BoxPrediction, decode_box
from .radar import SCHEMAS, RadarFeatureSet, accumulate, encode_radar, filter_points
from .simulator import Scene
from .vision import (
    init_layer_params,
    init_queries,
    init_query_params,
    run_camera_network,
)


@dataclass
class ModelConfig:
    n_queries: int = 32
    radar_slots: int = 64
    channels: int = 32
    camera_layers: int = 2
    fusion_radii: tuple = (2.0, 2.0, 1.0)
    heads: int = 4
    ffn_hidden: int = 64
    radar_hidden: int = 64
    n_classes: int = 2
    query_bound: float = 22.0
    radar_schema: str = "desk14"
    vision_only: bool = False
    use_mask: bool = True
    use_velocity_channels: bool = True
    resample_image: bool = True

    @property
    def fusion_stage_count(self) -> int:
        return 0 if self.vision_only else len(self.fusion_radii)


class FusionDetector:
    """Parameter owner plus forward passes at scene granularity."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.store = ad.ParamStore()
        rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 9151]))
        init_query_params(self.store, rng, cfg.n_queries, cfg.channels,
                          cfg.query_bound)
        for l in range(cfg.camera_layers):
            init_layer_params(self.store, rng, cfg.channels, cfg.ffn_hidden,
                              cfg.n_classes, f"camera.layer{l}")
        if not cfg.vision_only:
            schema = SCHEMAS[cfg.radar_schema]
            radar_mod.init_radar_params(
                self.store, rng, schema.width, cfg.channels, cfg.radar_hidden
            )
            self.stages = make_stages(cfg.fusion_radii, cfg.resample_image,
                                      use_distance_mask=cfg.use_mask)
            init_fusion_params(self.store, rng, cfg.channels, cfg.ffn_hidden,
                               cfg.n_classes, self.stages)
        else:
            self.stages = []

    def radar_features(self, scene: Scene) -> RadarFeatureSet:
        points = filter_points(accumulate(scene.radar))
        return encode_radar(
            points,
            self.store,
            slots=self.cfg.radar_slots,
            channels=self.cfg.channels,
            schema=SCHEMAS[self.cfg.radar_schema],
            use_velocity_channels=self.cfg.use_velocity_channels,
        )

    def forward(self, scene: Scene):
        """Run the whole pipeline on one scene.

        Returns (final QuerySet, list of supervised prediction sets). Each
        prediction set carries graph tensors logits/reg plus the reference
        points its offsets regress against.
        """
        cfg = self.cfg
        qs = init_queries(self.store)
        qs, cam_sets = run_camera_network(
            qs, scene.pyramids, scene.cameras, self.store,
            layers=cfg.camera_layers, n_classes=cfg.n_classes, heads=cfg.heads,
        )
        sets = list(cam_sets)
        if not cfg.vision_only:
            radar_feats = self.radar_features(scene)
            qs, fusion_sets = run_fusion(
                qs, radar_feats, self.stages, self.store,
                n_classes=cfg.n_classes, heads=cfg.heads,
                pyramids=scene.pyramids, cams=scene.cameras,
            )
            sets.extend(fusion_sets)
        return qs, sets

    def predictions(self, prediction_set) -> list:
        """Decode one prediction set into BoxPrediction records."""
        logits = prediction_set["logits"].data
        reg = prediction_set["reg"].data
        refs = prediction_set["refs"].data
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=1, keepdims=True)
        out = []
        for i in range(logits.shape[0]):
            out.append(
                BoxPrediction(
                    class_scores=probs[i, : self.cfg.n_classes],
                    reg=reg[i],
                    reference_point=refs[i],
                )
            )
        return out

    def detect(self, scene: Scene, scene_id: int = 0) -> list:
        """Inference: decode only the last stage (or last camera layer)."""
        from .evalmetrics import Detection

        _, sets = self.forward(scene)
        final = sets[-1]
        dets = []
        for pred in self.predictions(final):
            cls = int(np.argmax(pred.class_scores))
            conf = float(pred.class_scores[cls])
            box = decode_box(pred.reference_point, pred.reg)
            dets.append(
                Detection(
                    cls=cls,
                    confidence=conf,
                    center=box.center,
                    dims=box.dims,
                    heading=box.heading,
                    velocity=box.velocity,
                    scene=scene_id,
                )
            )
        return dets
