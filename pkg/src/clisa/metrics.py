"""Segmentation evaluation: overall accuracy, recall, precision, mIoU,
Cohen's kappa, Boundary IoU, Hausdorff distance, and cloud-coverage
regression statistics, plus omission/commission overlay maps.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ContractError

# gray levels for the overlay PGM
OVERLAY_BG = 0
OVERLAY_CORRECT = 255
OVERLAY_OMISSION = 96  # cloud missed
OVERLAY_COMMISSION = 176  # clear falsely flagged


@dataclass
class MetricsReport:
    oa: float
    recall: float
    precision: float
    miou_percent: float
    kappa: float
    boundary_iou_percent: float
    hausdorff_m: float
    hausdorff_empty_mask: bool = False

    def as_dict(self):
        return {
            "oa": self.oa,
            "recall": self.recall,
            "precision": self.precision,
            "miou_percent": self.miou_percent,
            "kappa": self.kappa,
            "boundary_iou_percent": self.boundary_iou_percent,
            "hausdorff_m": self.hausdorff_m,
            "hausdorff_empty_mask": self.hausdorff_empty_mask,
        }


def confusion_metrics(pred, truth):
    """(oa, recall, precision, miou_percent, kappa) for integer label masks.

    Recall/precision treat the highest label as foreground (cloud);
    mIoU averages over classes present in the union of both masks;
    kappa is 0 by convention when chance agreement is 1.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ContractError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    n = int(max(pred.max(), truth.max())) + 1
    cm = np.zeros((n, n), dtype=np.int64)
    np.add.at(cm, (truth.reshape(-1), pred.reshape(-1)), 1)
    total = cm.sum()
    oa = np.trace(cm) / total

    fg = n - 1
    tp = cm[fg, fg]
    fn = cm[fg].sum() - tp
    fp = cm[:, fg].sum() - tp
    recall = tp / (tp + fn) if tp + fn else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0

    ious = []
    for c in range(n):
        union = cm[c].sum() + cm[:, c].sum() - cm[c, c]
        if union:
            ious.append(cm[c, c] / union)
    miou = 100.0 * float(np.mean(ious)) if ious else 100.0

    pe = float((cm.sum(axis=0) * cm.sum(axis=1)).sum()) / (total * total)
    kappa = 0.0 if pe == 1.0 else (oa - pe) / (1.0 - pe)
    return float(oa), float(recall), float(precision), miou, float(kappa)


def _disk(radius):
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy * yy + xx * xx) <= radius * radius


def _boundary_region(mask, d):
    mask = mask.astype(bool)
    if not mask.any():
        return mask
    eroded = ndimage.binary_erosion(mask, structure=_disk(d), border_value=1)
    return mask & ~eroded


def boundary_iou(pred, truth, d=2):
    """IoU (percent) of the two masks restricted to their boundary bands.

    The band is each mask minus its erosion by a disk of radius d; for
    d at least the image radius this degrades to plain IoU. Vacuously
    100 when both boundaries are empty.
    """
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ContractError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    bp = _boundary_region(pred, d)
    bt = _boundary_region(truth, d)
    union = (bp | bt).sum()
    if union == 0:
        return 100.0
    return 100.0 * (bp & bt).sum() / union


def hausdorff_distance(pred, truth, gsd=1.0):
    """Symmetric Hausdorff distance between foreground pixel sets, in
    meters (Euclidean pixel distance times gsd).

    Returns (distance, empty_flag); an empty mask yields the image
    diagonal as sentinel with the flag set, never NaN.
    """
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ContractError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    a = np.argwhere(pred)
    b = np.argwhere(truth)
    if len(a) == 0 or len(b) == 0:
        diag = float(np.hypot(*pred.shape))
        return diag * gsd, True
    ta, tb = cKDTree(a), cKDTree(b)
    d_ab = tb.query(a)[0].max()
    d_ba = ta.query(b)[0].max()
    return float(max(d_ab, d_ba)) * gsd, False


def coverage_stats(true_fracs, pred_fracs):
    """Ordinary R^2 and MAE of predicted vs true coverage fractions.

    Returns (r2, mae, degenerate_flag); with zero variance in the truth
    R^2 is undefined and flagged (reported as nan).
    """
    t = np.asarray(true_fracs, dtype=float)
    p = np.asarray(pred_fracs, dtype=float)
    if t.shape != p.shape or t.ndim != 1 or len(t) < 2:
        raise ContractError(f"need >= 2 paired fractions, got {t.shape} and {p.shape}")
    mae = float(np.abs(p - t).mean())
    ss_tot = float(((t - t.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return float("nan"), mae, True
    ss_res = float(((t - p) ** 2).sum())
    return 1.0 - ss_res / ss_tot, mae, False


def error_overlay(pred, truth):
    """Gray-coded omission/commission map for a binary mask pair.

    255 = agreed cloud, 96 = omission (missed cloud), 176 = commission
    (false cloud), 0 = agreed clear; written out as PGM by callers.
    """
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    out = np.full(pred.shape, OVERLAY_BG, dtype=np.uint8)
    out[pred & truth] = OVERLAY_CORRECT
    out[~pred & truth] = OVERLAY_OMISSION
    out[pred & ~truth] = OVERLAY_COMMISSION
    return out


def evaluate_pair(pred, truth, gsd=1.0, boundary_d=2):
    """Full MetricsReport for one mask pair."""
    oa, rec, pre, miou, kappa = confusion_metrics(pred, truth)
    fg = int(max(np.asarray(pred).max(), np.asarray(truth).max()))
    bi = boundary_iou(np.asarray(pred) == fg, np.asarray(truth) == fg, boundary_d)
    hd, empty = hausdorff_distance(np.asarray(pred) == fg, np.asarray(truth) == fg, gsd)
    return MetricsReport(
        oa=oa,
        recall=rec,
        precision=pre,
        miou_percent=miou,
        kappa=kappa,
        boundary_iou_percent=bi,
        hausdorff_m=hd,
        hausdorff_empty_mask=empty,
    )
