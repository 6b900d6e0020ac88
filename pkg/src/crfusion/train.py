"""Training loop, optimizers, checkpointing, evaluation driving.

Training is deterministic given (dataset, config, seed): the only randomness
is one generator whose state rides along in checkpoints, so save/load/resume
reproduces an uninterrupted run bit for bit.
"""

from __future__ import annotations

import base64
import json

import numpy as np

from . import autodiff as ad
from .config import RunConfig, load_config
from .evalmetrics import Detection, GtEntry, evaluate
from .model import FusionDetector
from .setloss import hungarian_loss

CHECKPOINT_SCHEMA = 1


class TrainingDiverged(RuntimeError):
    pass


def _encode_array(a: np.ndarray) -> dict:
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode(),
    }


def _decode_array(d: dict) -> np.ndarray:
    flat = np.frombuffer(base64.b64decode(d["data"]), dtype="<f8")
    return flat.reshape(d["shape"]).copy()


class Optimizer:
    """SGD or Adam over a ParamStore; slots are checkpointed for bit-exact resume."""

    def __init__(self, kind: str, lr: float, clip_norm: float = 0.0):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.lr = lr
        self.clip_norm = clip_norm
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, store: ad.ParamStore):
        grads = store.grads
        if self.clip_norm > 0.0:
            total = 0.0
            for g in grads.values():
                total += float((g * g).sum())
            norm = np.sqrt(total)
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
                for g in grads.values():
                    g *= scale
        self.t += 1
        if self.kind == "sgd":
            for name, p in store.params.items():
                p.data -= self.lr * grads[name]
            return
        b1, b2, eps = 0.9, 0.999, 1e-8
        for name, p in store.params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1**self.t)
            vhat = self.v[name] / (1 - b2**self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + eps)

    def state(self) -> dict:
        return {
            "t": self.t,
            "m": {k: _encode_array(v) for k, v in self.m.items()},
            "v": {k: _encode_array(v) for k, v in self.v.items()},
        }

    def load_state(self, state: dict):
        self.t = int(state["t"])
        self.m = {k: _decode_array(v) for k, v in state["m"].items()}
        self.v = {k: _decode_array(v) for k, v in state["v"].items()}


def save_checkpoint(path, detector: FusionDetector, optimizer: Optimizer,
                    cfg: RunConfig, step: int, rng) -> None:
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "step": step,
        "config": cfg.to_flat_dict(),
        "rng_state": rng.bit_generator.state,
        "params": {
            name: _encode_array(p.data)
            for name, p in detector.store.params.items()
        },
        "optimizer": optimizer.state(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_checkpoint(path):
    """Rebuild (detector, optimizer, cfg, step, rng) from a checkpoint file."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {payload.get('schema')!r}")
    cfg = load_config(overrides=payload["config"])
    detector = FusionDetector(cfg.model_config(), seed=cfg.seed)
    for name, enc in payload["params"].items():
        detector.store.params[name].data[...] = _decode_array(enc)
    optimizer = Optimizer(cfg.optimizer, cfg.lr, cfg.clip_norm)
    optimizer.load_state(payload["optimizer"])
    rng = np.random.default_rng(0)
    rng.bit_generator.state = payload["rng_state"]
    return detector, optimizer, cfg, int(payload["step"]), rng


def scene_gt_entries(scene, scene_id: int) -> list:
    hits = scene.objects_with_radar_hits()
    return [
        GtEntry(
            cls=b.cls,
            center=b.center,
            velocity=b.velocity,
            scene=scene_id,
            has_radar=(i in hits),
        )
        for i, b in enumerate(scene.ground_truth)
    ]


def evaluate_detector(detector: FusionDetector, scenes) -> "MetricsBundle":
    """Pooled evaluation over a list of scenes."""
    dets: list[Detection] = []
    gts: list[GtEntry] = []
    for sid, scene in enumerate(scenes):
        dets.extend(detector.detect(scene, scene_id=sid))
        gts.extend(scene_gt_entries(scene, sid))
    return evaluate(dets, gts)


def scene_loss(detector: FusionDetector, scene, cfg: RunConfig):
    _, sets = detector.forward(scene)
    return hungarian_loss(
        sets,
        scene.ground_truth,
        alpha=cfg.focal_alpha,
        gamma=cfg.focal_gamma,
        lambda_box=cfg.lambda_box,
        vel_weight=cfg.vel_weight,
    )


def train(cfg: RunConfig, train_data, val_data, log=None,
          detector=None, optimizer=None, rng=None, start_step: int = 0):
    """Gradient training on the set loss summed over all supervised sets.

    Returns (detector, optimizer, rng, history) where history holds one row
    per logged step. Raises TrainingDiverged on a non-finite loss.
    """
    if detector is None:
        detector = FusionDetector(cfg.model_config(), seed=cfg.seed)
    if optimizer is None:
        optimizer = Optimizer(cfg.optimizer, cfg.lr, cfg.clip_norm)
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=[cfg.seed, 517]))
    history = []
    n_train = len(train_data)
    if n_train == 0:
        raise ValueError("empty training dataset")
    for step in range(start_step, cfg.steps):
        idx = rng.integers(0, n_train, size=cfg.batch_size)
        detector.store.zero_grads()
        total = None
        cls_sum = box_sum = 0.0
        try:
            for i in idx:
                loss, bd = scene_loss(detector, train_data[int(i)], cfg)
                scaled = ad.mul(loss, 1.0 / cfg.batch_size)
                total = scaled if total is None else ad.add(total, scaled)
                cls_sum += bd.classification
                box_sum += bd.box_l1
        except FloatingPointError as exc:
            raise TrainingDiverged(
                f"non-finite loss at step {step}: {exc}"
            ) from exc
        if not np.isfinite(total.data):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        ad.backward(total, detector.store)
        optimizer.step(detector.store)
        row = {
            "step": step + 1,
            "loss": float(total.data),
            "classification": cls_sum / cfg.batch_size,
            "box_l1": box_sum / cfg.batch_size,
        }
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0 and val_data:
            subset = val_data[: cfg.eval_subset]
            report = evaluate_detector(detector, subset)
            row["val_map"] = report.mean_ap
            row["val_ate"] = report.ate if report.ate is not None else ""
            row["val_ave"] = report.ave if report.ave is not None else ""
        history.append(row)
        if log is not None:
            log(row)
    return detector, optimizer, rng, history
