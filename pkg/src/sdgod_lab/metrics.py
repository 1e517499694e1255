"""IoU, AP/mAP, mean performance under corruption, and feature cosine analysis."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .structures import BoxF, box_iou_matrix


def iou(a, b) -> float:
    a, b = BoxF(*a), BoxF(*b)
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def match_detections(dets, gts, iou_thr=0.5):
    """Greedy matching in descending score order.

    ``dets``: iterable of (image_id, score, box); ``gts``: mapping image_id -> (N, 4).
    Returns (true-positive flags in sorted order, number of GT boxes).
    """
    dets = sorted(dets, key=lambda d: -d[1])
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    n_gt = sum(len(v) for v in gts.values())
    tp = np.zeros(len(dets), dtype=bool)
    for i, (img, _, box) in enumerate(dets):
        g = np.asarray(gts.get(img, np.zeros((0, 4)))).reshape(-1, 4)
        if len(g) == 0:
            continue
        ious = box_iou_matrix(np.asarray(box, dtype=np.float64)[None], g)[0]
        ious[used[img]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_thr:
            used[img][j] = True
            tp[i] = True
    return tp, n_gt


def average_precision(dets, gts, iou_thr=0.5) -> float:
    """All-point interpolated AP (area under the precision envelope), in [0, 1]."""
    tp, n_gt = match_detections(dets, gts, iou_thr)
    if n_gt == 0:
        return 1.0 if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.nonzero(mrec[1:] != mrec[:-1])[0]
    # accumulate left to right so the result does not depend on numpy's summation blocking
    ap = 0.0
    for i in step:
        ap += float(mrec[i + 1] - mrec[i]) * float(mpre[i + 1])
    return ap


def mean_ap(per_class) -> float:
    """Mean of per-class APs; ``None``/NaN entries (classes without GT) are excluded."""
    vals = per_class.values() if isinstance(per_class, dict) else per_class
    vals = [v for v in vals if v is not None and not np.isnan(v)]
    if not vals:
        raise ValueError("no class has ground truth")
    return float(np.mean(vals))


def dataset_map(detections, samples, n_classes, iou_thr=0.5) -> float:
    """mAP in percent for per-image detection lists aligned with ``samples``."""
    if len(detections) != len(samples):
        raise ValueError(f"{len(detections)} detection lists for {len(samples)} samples")
    per_class = {}
    for k in range(n_classes):
        gts = {s.image_id: s.boxes[s.labels == k] for s in samples}
        if sum(len(v) for v in gts.values()) == 0:
            per_class[k] = None
            continue
        dets = [(s.image_id, score, box) for s, ds in zip(samples, detections)
                for box, cat, score in ds if cat == k]
        per_class[k] = average_precision(dets, gts, iou_thr)
    return 100.0 * mean_ap(per_class)


def mpc(P, n_c=None, n_s=None) -> float:
    """Mean over corruptions of the mean over severities of ``P[c][s]``."""
    rows = [list(r) for r in P]
    if not rows or any(len(r) != len(rows[0]) for r in rows) or len(rows[0]) == 0:
        raise ValueError("P must be a non-empty rectangular matrix")
    arr = np.asarray(rows, dtype=np.float64)
    if n_c is not None and arr.shape[0] != n_c or n_s is not None and arr.shape[1] != n_s:
        raise ValueError(f"P has shape {arr.shape}, expected ({n_c}, {n_s})")
    per_corruption = [sum(r) / len(r) for r in arr.tolist()]
    return sum(per_corruption) / len(per_corruption)


@dataclass
class MpcReport:
    P: np.ndarray
    corruptions: list
    severities: list
    clean_map: float
    mpc: float = field(default=float("nan"))

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        if self.P.shape != (len(self.corruptions), len(self.severities)):
            raise ValueError(f"P shape {self.P.shape} does not match labels")
        if np.any(self.P < 0) or np.any(self.P > 100):
            raise ValueError("mAP entries must lie in [0, 100]")
        self.mpc = mpc(self.P)

    def per_corruption(self) -> dict:
        """Severity-averaged mAP per corruption (the table-style row)."""
        return {c: float(np.mean(r)) for c, r in zip(self.corruptions, self.P)}

    def to_json(self) -> str:
        return json.dumps({"corruptions": list(self.corruptions), "severities": list(self.severities),
                           "P": self.P.tolist(), "clean_map": self.clean_map, "mpc": self.mpc}, indent=1)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["P"], d["corruptions"], d["severities"], d["clean_map"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["corruption"] + [f"s{s}" for s in self.severities])
        for c, row in zip(self.corruptions, self.P):
            w.writerow([c] + [repr(float(v)) for v in row])
        return buf.getvalue()


@dataclass
class CosineSimReport:
    severity: int
    similarity: dict

    def __post_init__(self):
        for k, v in self.similarity.items():
            if not -1.0 - 1e-12 <= v <= 1.0 + 1e-12:
                raise ValueError(f"cosine similarity {v} for {k} out of range")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["corruption", "severity", "cosine_similarity"])
        for c, v in self.similarity.items():
            w.writerow([c, self.severity, repr(float(v))])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"severity": self.severity, "similarity": self.similarity}, indent=1)


def mean_cosine(a, b) -> float:
    """Mean row-wise cosine similarity between two (N, D) feature matrices."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = np.where((na > 0) & (nb > 0), na * nb, 1.0)
    cos = np.where((na > 0) & (nb > 0), (a * b).sum(axis=1) / denom, 0.0)
    return float(np.clip(cos, -1.0, 1.0).mean())


def cosine_report(feature_fn, clean_ds, corrupted_suites, severity) -> CosineSimReport:
    """Mean clean-vs-corrupted cosine of pooled features, per corruption.

    ``feature_fn`` maps an (N, H, W, 3) stack to (N, D) pooled features;
    ``corrupted_suites`` maps corruption name -> samples aligned with ``clean_ds``.
    """
    ids = [s.image_id for s in clean_ds]
    clean = feature_fn(np.stack([s.image for s in clean_ds]))
    sims = {}
    for name, suite in corrupted_suites.items():
        if [s.image_id for s in suite] != ids:
            raise ValueError(f"image ids of {name} do not match the clean set")
        sims[name] = mean_cosine(clean, feature_fn(np.stack([s.image for s in suite])))
    return CosineSimReport(severity, sims)
