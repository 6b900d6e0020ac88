"""Detection metrics: center-distance AP, translation/velocity errors, range buckets.

Matching is greedy by descending confidence against the nearest unmatched
ground truth of the same class, with a strict less-than distance threshold.
AP uses 101-point recall interpolation; the error metrics (ATE in meters,
AVE in m/s) average over the true positives matched at a fixed threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import bev_distance

AP_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_ERROR_THRESHOLD = 2.0
RANGE_BUCKETS = ((0.0, 20.0), (20.0, 30.0), (30.0, 40.0), (40.0, 50.0))


@dataclass
class Detection:
    """One decoded detection ready for scoring."""

    cls: int
    confidence: float
    center: np.ndarray
    dims: np.ndarray
    heading: float
    velocity: np.ndarray
    scene: int = 0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.dims = np.asarray(self.dims, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)


@dataclass
class GtEntry:
    """A ground-truth box tagged with its scene for cross-scene scoring.

    ``has_radar`` marks objects that produced at least one radar return, so
    errors can additionally be reported on the radar-visible subset.
    """

    cls: int
    center: np.ndarray
    velocity: np.ndarray
    scene: int = 0
    has_radar: bool = False

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)


@dataclass
class MetricsReport:
    """Scored metrics; ``ap[cls][threshold]`` is None when a class has no gts."""

    ap: dict = field(default_factory=dict)
    mean_ap: float = 0.0
    ate: float | None = None
    ave: float | None = None
    ate_radar: float | None = None
    ave_radar: float | None = None
    tp_count: int = 0
    gt_count: int = 0
    det_count: int = 0
    buckets: dict = field(default_factory=dict)

    def flat_items(self, prefix: str = ""):
        """(key, value) pairs with stable names for the key = value report."""

        def opt(v):
            return "absent" if v is None else v

        items = []
        for cls in sorted(self.ap):
            for t in sorted(self.ap[cls]):
                items.append((f"{prefix}ap_class{cls}_at_{t:g}m",
                              opt(self.ap[cls][t])))
        items.append((f"{prefix}map", self.mean_ap))
        items.append((f"{prefix}ate_m", opt(self.ate)))
        items.append((f"{prefix}ave_mps", opt(self.ave)))
        items.append((f"{prefix}ate_radar_m", opt(self.ate_radar)))
        items.append((f"{prefix}ave_radar_mps", opt(self.ave_radar)))
        items.append((f"{prefix}tp_count", self.tp_count))
        items.append((f"{prefix}gt_count", self.gt_count))
        items.append((f"{prefix}det_count", self.det_count))
        for (lo, hi), rep in self.buckets.items():
            items.extend(rep.flat_items(prefix=f"{prefix}range_{lo:g}_{hi:g}_"))
        return items


def match_detections(dets, gts, threshold: float):
    """Greedy confidence-ordered matching within one class.

    Returns (labels, matches): labels[k] is True when the k-th detection in
    descending-confidence order is a true positive; matches pairs detection
    and ground-truth list indices. Each ground truth is used at most once; a
    detection matches the nearest unmatched ground truth of its scene if the
    BEV center distance is strictly below the threshold.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    taken = [False] * len(gts)
    labels = []
    matches = []
    for i in order:
        det = dets[i]
        best_j = -1
        best_d = threshold
        for j, gt in enumerate(gts):
            if taken[j] or gt.cls != det.cls or gt.scene != det.scene:
                continue
            d = bev_distance(det.center, gt.center)
            if d < best_d:
                best_d = d
                best_j = j
        if best_j >= 0:
            taken[best_j] = True
            labels.append(True)
            matches.append((i, best_j))
        else:
            labels.append(False)
    return labels, matches


def average_precision(labels, gt_count: int):
    """Area under the precision-recall curve via 101-point interpolation.

    ``labels`` are TP flags in descending-confidence order. Returns None
    when there are no ground truths (AP undefined).
    """
    if gt_count == 0:
        return None
    if not labels:
        return 0.0
    tp = np.cumsum(np.asarray(labels, dtype=np.float64))
    fp = np.cumsum(~np.asarray(labels, dtype=bool))
    recall = tp / gt_count
    precision = tp / (tp + fp)
    out = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        out += precision[mask].max() if mask.any() else 0.0
    return out / 101.0


def tp_errors(pairs):
    """(ATE, AVE) over matched (detection, ground truth) pairs; None if empty."""
    if not pairs:
        return None, None
    ate = float(np.mean([bev_distance(d.center, g.center) for d, g in pairs]))
    ave = float(
        np.mean([np.linalg.norm(d.velocity - g.velocity) for d, g in pairs])
    )
    return ate, ave


def evaluate(dets, gts, thresholds=AP_THRESHOLDS,
             tp_threshold: float = TP_ERROR_THRESHOLD) -> MetricsReport:
    """Score detections against ground truths across all scenes.

    AP is computed per class per threshold; mean AP averages over classes
    (with at least one ground truth) and thresholds. ATE/AVE average over
    the matches at ``tp_threshold``.
    """
    classes = sorted({g.cls for g in gts} | {d.cls for d in dets})
    report = MetricsReport(gt_count=len(gts), det_count=len(dets))
    ap_values = []
    tp_pairs = []
    tp_total = 0
    for cls in classes:
        cls_dets = [d for d in dets if d.cls == cls]
        cls_gts = [g for g in gts if g.cls == cls]
        report.ap[cls] = {}
        for t in thresholds:
            labels, matches = match_detections(cls_dets, cls_gts, t)
            ap = average_precision(labels, len(cls_gts))
            report.ap[cls][t] = ap
            if ap is not None:
                ap_values.append(ap)
            if t == tp_threshold:
                tp_pairs.extend(
                    (cls_dets[i], cls_gts[j]) for i, j in matches
                )
                tp_total += len(matches)
    report.mean_ap = float(np.mean(ap_values)) if ap_values else 0.0
    report.ate, report.ave = tp_errors(tp_pairs)
    radar_pairs = [(d, g) for d, g in tp_pairs if getattr(g, "has_radar", False)]
    report.ate_radar, report.ave_radar = tp_errors(radar_pairs)
    report.tp_count = tp_total
    return report


def range_breakdown(dets, gts, buckets=RANGE_BUCKETS) -> dict:
    """Score each ego-distance bucket independently.

    Buckets are (lo, hi] intervals on BEV distance to the ego origin (the
    first bucket includes 0); they must not overlap. Ground truths and
    detections are assigned to buckets by their own centers.
    """
    spans = sorted(buckets)
    for (lo1, hi1), (lo2, hi2) in zip(spans, spans[1:]):
        if hi1 > lo2:
            raise ValueError("range buckets must not overlap")

    def bucket_of(center, bucket):
        lo, hi = bucket
        r = bev_distance(center, (0.0, 0.0, 0.0))
        return (lo < r <= hi) or (lo == 0.0 and r == 0.0)

    out = {}
    for bucket in buckets:
        b_dets = [d for d in dets if bucket_of(d.center, bucket)]
        b_gts = [g for g in gts if bucket_of(g.center, bucket)]
        out[bucket] = evaluate(b_dets, b_gts)
    return out


def write_report(path, items):
    """Write key = value lines; floats at full precision, stable order."""
    with open(path, "w") as fh:
        for key, value in items:
            if isinstance(value, float):
                fh.write(f"{key} = {value:.17g}\n")
            else:
                fh.write(f"{key} = {value}\n")


def write_table(path, header, rows):
    """Comma-separated table for plotting; floats at full precision."""
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = [
                f"{v:.17g}" if isinstance(v, float) else str(v) for v in row
            ]
            fh.write(",".join(cells) + "\n")
