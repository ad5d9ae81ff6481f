"""Overlap and surface-distance metrics for binary masks.

Surface distances use the 4-connected erosion residue as boundary, Euclidean
distance in pixel units, and the symmetric set of nearest boundary distances.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .core import ValidationError

_CROSS = ndimage.generate_binary_structure(2, 1)


def _pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt


def boundary(mask):
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def dsc(pred, gt):
    """Dice similarity in percent; two empty masks score 100."""
    pred, gt = _pair(pred, gt)
    denom = pred.sum() + gt.sum()
    if denom == 0:
        return 100.0
    return 100.0 * 2.0 * np.logical_and(pred, gt).sum() / denom


def surface_distances(pred, gt):
    """Concatenated nearest distances pred-boundary -> gt-boundary and back.

    Returns None if either mask is empty.
    """
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        return None
    bp, bg = boundary(pred), boundary(gt)
    to_gt = ndimage.distance_transform_edt(~bg)
    to_pred = ndimage.distance_transform_edt(~bp)
    return np.concatenate([to_gt[bp], to_pred[bg]])


def empty_sentinel(shape):
    return float(math.hypot(*shape))


def _surface_metric(pred, gt, reduce):
    pred, gt = _pair(pred, gt)
    if not pred.any() and not gt.any():
        return 0.0
    d = surface_distances(pred, gt)
    if d is None:
        return empty_sentinel(pred.shape)
    return float(reduce(d))


def hd95(pred, gt):
    """95th percentile of symmetric boundary distances (diagonal if one mask is empty)."""
    return _surface_metric(pred, gt, lambda d: np.percentile(d, 95))


def asd(pred, gt):
    """Average symmetric boundary distance (diagonal if one mask is empty)."""
    return _surface_metric(pred, gt, np.mean)


@dataclass
class ImageMetrics:
    id: str
    dsc: float
    hd95: float
    asd: float
    empty_pred: bool = False


@dataclass
class MetricReport:
    per_image: list = field(default_factory=list)

    @property
    def dsc(self):
        return float(np.mean([m.dsc for m in self.per_image]))

    @property
    def hd95(self):
        return float(np.mean([m.hd95 for m in self.per_image]))

    @property
    def asd(self):
        return float(np.mean([m.asd for m in self.per_image]))

    @property
    def n_empty(self):
        return sum(m.empty_pred for m in self.per_image)

    def aggregate(self):
        return {"dsc": self.dsc, "hd95": self.hd95, "asd": self.asd}

    def summary(self):
        return (f"n={len(self.per_image)} DSC={self.dsc:.2f} HD95={self.hd95:.2f} "
                f"ASD={self.asd:.2f} empty_pred={self.n_empty}")

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "dsc", "hd95", "asd", "empty_pred_flag"])
            for m in self.per_image:
                w.writerow([m.id, repr(m.dsc), repr(m.hd95), repr(m.asd), int(m.empty_pred)])
        return path

    @classmethod
    def from_csv(cls, path):
        rows = []
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append(ImageMetrics(r["id"], float(r["dsc"]), float(r["hd95"]),
                                         float(r["asd"]), bool(int(r["empty_pred_flag"]))))
        return cls(rows)


def score(id, pred, gt):
    pred, gt = _pair(pred, gt)
    return ImageMetrics(id, float(dsc(pred, gt)), hd95(pred, gt), asd(pred, gt),
                        empty_pred=bool(gt.any() and not pred.any()))


@torch.no_grad()
def predict(model, images, batch_size=16):
    """Argmax masks of ``model`` on a (N, 3, S, S) array/tensor, in eval mode."""
    was_training = model.training
    model.eval()
    out = []
    try:
        x = torch.as_tensor(images, dtype=torch.float32)
        for i in range(0, len(x), batch_size):
            out.append(model(x[i:i + batch_size]).argmax(dim=1))
    finally:
        model.train(was_training)
    return torch.cat(out).numpy()


def evaluate(model, samples, batch_size=16):
    """Per-image and mean DSC/HD95/ASD of ``model`` over labelled samples."""
    samples = list(samples)
    if not samples:
        raise ValidationError("cannot evaluate on an empty dataset")
    if any(s.mask is None for s in samples):
        raise ValidationError("evaluation samples must carry masks")
    images = np.stack([s.image for s in samples])
    preds = predict(model, images, batch_size)
    return MetricReport([score(s.id, p, s.mask > 0) for s, p in zip(samples, preds)])
