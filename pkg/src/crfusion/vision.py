"""Camera network: 3D object queries iteratively refined against image features.

Each query is a learned embedding paired with an explicit 3D reference point.
A decoder layer samples the feature pyramids at every reference point's
projection, runs self-attention over the queries, folds the sampled features
in, and emits a box prediction whose center offsets advance the reference
point for the next layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import sample_pyramid_graph


@dataclass
class ObjectQuery:
    """One candidate detection: a C-dim embedding plus a 3D reference point."""

    embedding: np.ndarray
    reference_point: np.ndarray


@dataclass
class QuerySet:
    """A fixed-size batch of queries flowing through the decoder stack.

    ``embeddings`` is an (N, C) tensor and ``reference_points`` an (N, 3)
    tensor; both stay in the autodiff graph so gradients reach the query
    initialization and every refinement step.
    """

    embeddings: ad.Tensor
    reference_points: ad.Tensor
    layer_index: int = 0

    @property
    def count(self) -> int:
        return self.embeddings.data.shape[0]

    def query(self, i: int) -> ObjectQuery:
        return ObjectQuery(
            embedding=self.embeddings.data[i].copy(),
            reference_point=self.reference_points.data[i].copy(),
        )


def init_query_params(store: ad.ParamStore, rng, n: int, channels: int,
                      bounds: float, prefix: str = "queries"):
    """Register the learnable query embeddings and initial reference points.

    Reference points start uniform inside the surveillance box (z fixed at a
    nominal object height); the network learns their distribution during
    training. N = 0 is a configuration error.
    """
    if n <= 0:
        raise ValueError("need at least one object query")
    if bounds <= 0:
        raise ValueError("query bounds must be non-degenerate")
    emb = rng.normal(0.0, 0.5, size=(n, channels))
    refs = np.column_stack(
        [
            rng.uniform(-bounds, bounds, size=n),
            rng.uniform(-bounds, bounds, size=n),
            np.full(n, 1.0),
        ]
    )
    store.add(f"{prefix}.embed", emb)
    store.add(f"{prefix}.ref", refs)


def init_queries(store: ad.ParamStore, prefix: str = "queries") -> QuerySet:
    """Instantiate the query set from the stored parameters."""
    return QuerySet(
        embeddings=store[f"{prefix}.embed"],
        reference_points=store[f"{prefix}.ref"],
        layer_index=0,
    )


def init_layer_params(store: ad.ParamStore, rng, channels: int, hidden: int,
                      n_classes: int, prefix: str):
    """Weights for one decoder layer: posenc, self-attn, norms, FFN, box head."""

    def lin(name, n_in, n_out, zero=False):
        if zero:
            store.add(f"{prefix}.{name}.w", np.zeros((n_in, n_out)))
        else:
            bound = np.sqrt(6.0 / (n_in + n_out))
            store.add(
                f"{prefix}.{name}.w", rng.uniform(-bound, bound, size=(n_in, n_out))
            )
        store.add(f"{prefix}.{name}.b", np.zeros(n_out))

    def norm(name):
        store.add(f"{prefix}.{name}.gain", np.ones(channels))
        store.add(f"{prefix}.{name}.shift", np.zeros(channels))

    lin("posenc", 3, channels)
    for k in ("wq", "wk", "wv", "wo"):
        lin(f"attn.{k}", channels, channels)
    norm("norm_attn")
    norm("norm_feat")
    lin("ffn.0", channels, hidden)
    lin("ffn.1", hidden, channels)
    norm("norm_ffn")
    lin("head.0", channels, hidden)
    # Zero-initialized output head: layer 0 starts with identity reference
    # points and uniform class scores, which keeps early training stable.
    lin("head.1", hidden, n_classes + 1 + 10, zero=True)


def _attn_weight_map(store: ad.ParamStore, prefix: str) -> dict:
    return {
        "wq": store[f"{prefix}.attn.wq.w"],
        "bq": store[f"{prefix}.attn.wq.b"],
        "wk": store[f"{prefix}.attn.wk.w"],
        "bk": store[f"{prefix}.attn.wk.b"],
        "wv": store[f"{prefix}.attn.wv.w"],
        "bv": store[f"{prefix}.attn.wv.b"],
        "wo": store[f"{prefix}.attn.wo.w"],
        "bo": store[f"{prefix}.attn.wo.b"],
    }


def box_head(store: ad.ParamStore, prefix: str, emb: ad.Tensor, n_classes: int):
    """Per-query heads: class logits (with background) and the 10-dim regression."""
    h = ad.relu(ad.linear_forward(emb, store[f"{prefix}.head.0.w"],
                                  store[f"{prefix}.head.0.b"]))
    out = ad.linear_forward(h, store[f"{prefix}.head.1.w"], store[f"{prefix}.head.1.b"])
    logits = ad.slice_cols(out, 0, n_classes + 1)
    reg = ad.slice_cols(out, n_classes + 1, n_classes + 11)
    return logits, reg


def camera_layer(qs: QuerySet, pyramids, cams, store: ad.ParamStore,
                 n_classes: int, heads: int, prefix: str):
    """One decoder layer: sample, self-attend, combine, predict, advance.

    Returns the refined QuerySet plus the layer's raw prediction tensors
    (class logits (N, n_classes+1) and regression (N, 10)).
    """
    emb = qs.embeddings
    refs = qs.reference_points
    n = qs.count

    sampled = sample_pyramid_graph(refs, pyramids, cams)  # (N, C)

    posenc = ad.linear_forward(refs, store[f"{prefix}.posenc.w"],
                               store[f"{prefix}.posenc.b"])
    emb = ad.add(emb, posenc)

    attended, _ = ad.multi_head_cross_attention(
        emb, emb, emb, ad.AdditiveMask.all_allowed(n, n), heads,
        _attn_weight_map(store, prefix),
    )
    emb = ad.layer_norm(ad.add(emb, attended),
                        store[f"{prefix}.norm_attn.gain"],
                        store[f"{prefix}.norm_attn.shift"])
    emb = ad.layer_norm(ad.add(emb, sampled),
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
    return out, (logits, reg)


def run_camera_network(qs: QuerySet, pyramids, cams, store: ad.ParamStore,
                       layers: int, n_classes: int, heads: int,
                       prefix: str = "camera"):
    """Chain decoder layers; collect every layer's predictions for the loss.

    The returned QuerySet holds the vision-updated queries handed to fusion.
    Per-layer predictions pair each layer's (logits, reg) with the reference
    points the offsets were regressed against.
    """
    if layers < 1:
        raise ValueError("camera network needs at least one layer")
    per_layer = []
    for l in range(layers):
        prev_refs = qs.reference_points
        qs, (logits, reg) = camera_layer(
            qs, pyramids, cams, store, n_classes, heads, f"{prefix}.layer{l}"
        )
        per_layer.append({"logits": logits, "reg": reg, "refs": prev_refs})
    return qs, per_layer
