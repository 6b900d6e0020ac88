"""Camera-radar fusion: distance-gated attention masks and cascaded decoders.

Each fusion stage lets the queries attend only to radar features within a
BEV radius of their current reference points, forms attention-weighted radar
features, folds them (plus optionally re-sampled image features) into the
query embeddings through an FFN, and refines the reference points with a
stage box head. Queries whose mask row is empty pass through untouched by
radar: their detections stay vision-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import bev_distance_matrix, sample_pyramid_graph
from .radar import RadarFeatureSet
from .vision import QuerySet, box_head, init_layer_params

DEFAULT_RADII = (2.0, 2.0, 1.0)


@dataclass
class QueryRadarMask:
    """Binary N x M allow matrix: query i may attend radar j iff their BEV
    distance is strictly below the radius and row j is a real (non-padded)
    return."""

    allow: np.ndarray
    radius: float

    def as_mask(self) -> ad.AdditiveMask:
        return ad.AdditiveMask(self.allow)


@dataclass
class FusionStage:
    """Configuration of one cross-attention decoder in the cascade."""

    stage_index: int
    radius: float
    uses_image_resample: bool = True
    use_distance_mask: bool = True  # False: every valid radar row is allowed
    prefix: str = ""

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("mask radius must be positive")
        if not self.prefix:
            self.prefix = f"fusion.stage{self.stage_index}"


def build_mask(qs: QuerySet, radar: RadarFeatureSet, radius: float) -> QueryRadarMask:
    """Distance gate: strict less-than on BEV distance, padded rows denied."""
    if radius <= 0:
        raise ValueError("mask radius must be positive")
    dists = bev_distance_matrix(qs.reference_points.data, radar.positions)
    allow = (dists < radius) & radar.valid[None, :]
    return QueryRadarMask(allow=allow, radius=radius)


def make_stages(radii=DEFAULT_RADII, resample_image=True,
                use_distance_mask=True) -> list:
    """Stage configs for the cascade; radii default to (2, 2, 1) meters.

    Image re-sampling refreshes each stage's image features at the updated
    reference points; stage 1 consumes the vision-updated queries directly,
    so only later stages re-sample by default.
    """
    return [
        FusionStage(
            stage_index=i + 1,
            radius=r,
            uses_image_resample=resample_image and i > 0,
            use_distance_mask=use_distance_mask,
        )
        for i, r in enumerate(radii)
    ]


def init_fusion_params(store: ad.ParamStore, rng, channels: int, hidden: int,
                       n_classes: int, stages) -> None:
    for st in stages:
        init_layer_params(store, rng, channels, hidden, n_classes, st.prefix)
        bound = np.sqrt(6.0 / (2 * channels))
        for k in ("wq", "wk", "wv", "wo"):
            store.add(f"{st.prefix}.cross.{k}.w",
                      rng.uniform(-bound, bound, size=(channels, channels)))
            store.add(f"{st.prefix}.cross.{k}.b", np.zeros(channels))


def _cross_attention(store: ad.ParamStore, prefix: str, queries: ad.Tensor,
                     radar_feats: ad.Tensor, mask: ad.AdditiveMask, heads: int):
    """Masked query-radar attention; returns the head-averaged score matrix.

    The stage consumes the attention matrix itself: the weighted radar
    features are an exact convex combination of the raw radar feature rows,
    so an isolated allowed row passes through unchanged.
    """
    _, attn = ad.multi_head_cross_attention(
        queries, radar_feats, radar_feats, mask, heads,
        {
            "wq": store[f"{prefix}.cross.wq.w"], "bq": store[f"{prefix}.cross.wq.b"],
            "wk": store[f"{prefix}.cross.wk.w"], "bk": store[f"{prefix}.cross.wk.b"],
            "wv": store[f"{prefix}.cross.wv.w"], "bv": store[f"{prefix}.cross.wv.b"],
            "wo": store[f"{prefix}.cross.wo.w"], "bo": store[f"{prefix}.cross.wo.b"],
        },
    )
    return attn


def fusion_stage(qs: QuerySet, radar: RadarFeatureSet, stage: FusionStage,
                 store: ad.ParamStore, n_classes: int, heads: int,
                 pyramids=None, cams=None):
    """One fusion decoder pass.

    Rebuilds the distance mask from the current reference points, computes
    masked attention scores A, weights the radar features (F* = A F_radar),
    folds them into the embeddings together with optionally re-sampled image
    features, and advances the reference points by the stage head's offsets.
    Returns (QuerySet, (logits, reg), attention matrix).
    """
    prefix = stage.prefix
    emb = qs.embeddings
    refs = qs.reference_points
    n = qs.count

    posenc = ad.linear_forward(refs, store[f"{prefix}.posenc.w"],
                               store[f"{prefix}.posenc.b"])
    emb = ad.add(emb, posenc)

    attended, _ = ad.multi_head_cross_attention(
        emb, emb, emb, ad.AdditiveMask.all_allowed(n, n), heads,
        {
            "wq": store[f"{prefix}.attn.wq.w"], "bq": store[f"{prefix}.attn.wq.b"],
            "wk": store[f"{prefix}.attn.wk.w"], "bk": store[f"{prefix}.attn.wk.b"],
            "wv": store[f"{prefix}.attn.wv.w"], "bv": store[f"{prefix}.attn.wv.b"],
            "wo": store[f"{prefix}.attn.wo.w"], "bo": store[f"{prefix}.attn.wo.b"],
        },
    )
    emb = ad.layer_norm(ad.add(emb, attended),
                        store[f"{prefix}.norm_attn.gain"],
                        store[f"{prefix}.norm_attn.shift"])

    if stage.use_distance_mask:
        mask = build_mask(
            QuerySet(embeddings=emb, reference_points=refs), radar, stage.radius
        )
    else:
        allow = np.broadcast_to(radar.valid[None, :], (n, radar.slots)).copy()
        mask = QueryRadarMask(allow=allow, radius=float("inf"))
    attn = _cross_attention(store, prefix, emb, radar.features,
                            mask.as_mask(), heads)
    weighted = ad.matmul(attn, radar.features)  # (N, C)

    combined = ad.add(emb, weighted)
    if stage.uses_image_resample:
        if pyramids is None or cams is None:
            raise ValueError("image re-sampling stage needs pyramids and cameras")
        resampled = sample_pyramid_graph(refs, pyramids, cams)
        combined = ad.add(combined, resampled)

    emb = ad.layer_norm(combined,
                        store[f"{prefix}.norm_feat.gain"],
                        store[f"{prefix}.norm_feat.shift"])
    ffn_out = ad.ffn_forward(emb,
                             store[f"{prefix}.ffn.0.w"], store[f"{prefix}.ffn.0.b"],
                             store[f"{prefix}.ffn.1.w"], store[f"{prefix}.ffn.1.b"])
    emb = ad.layer_norm(ad.add(emb, ffn_out),
                        store[f"{prefix}.norm_ffn.gain"],
                        store[f"{prefix}.norm_ffn.shift"])

    logits, reg = box_head(store, prefix, emb, n_classes)
    new_refs = ad.add(refs, ad.slice_cols(reg, 0, 3))
    out = QuerySet(embeddings=emb, reference_points=new_refs,
                   layer_index=qs.layer_index + 1)
    return out, (logits, reg), attn


def run_fusion(vision_queries: QuerySet, radar: RadarFeatureSet, stages,
               store: ad.ParamStore, n_classes: int, heads: int,
               pyramids=None, cams=None):
    """Cascade the fusion stages.

    All stage predictions are returned for per-stage training supervision;
    inference reads only the last entry. Masks are rebuilt inside each stage
    from the reference points it receives, so refinement moves the gates.
    """
    qs = vision_queries
    per_stage = []
    for st in stages:
        prev_refs = qs.reference_points
        qs, (logits, reg), attn = fusion_stage(
            qs, radar, st, store, n_classes, heads, pyramids=pyramids, cams=cams
        )
        per_stage.append(
            {"logits": logits, "reg": reg, "refs": prev_refs, "attn": attn}
        )
    return qs, per_stage
