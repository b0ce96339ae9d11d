"""Depth metrics, condition splits and the low-height band mask."""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import lidar_depth

TAGS = ("day", "night", "rain")
MIN_PRED = 1e-3


class EvaluationError(ValueError):
    pass


@dataclass
class MetricsReport:
    rmse: float
    rmse_log: float
    abs_rel: float
    delta1: float
    delta2: float
    delta3: float
    n_valid: int
    n_clamped: int = 0

    def to_dict(self):
        return asdict(self)


def valid_mask(gt, max_depth=80.0):
    gt = np.asarray(gt)
    return (gt > 0) & (gt <= max_depth)


def _metrics_from_pixels(p, g):
    if p.size == 0:
        raise EvaluationError("no valid pixels to evaluate")
    if np.any(p <= 0):
        raise EvaluationError("prediction <= 0 inside the evaluation mask (log undefined)")
    n_clamped = int(np.count_nonzero(p < MIN_PRED))
    p = np.maximum(p, MIN_PRED)
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    log_diff = np.log(p) - np.log(g)
    return MetricsReport(
        rmse=float(np.sqrt(np.mean(diff * diff))),
        rmse_log=float(np.sqrt(np.mean(log_diff * log_diff))),
        abs_rel=float(np.mean(np.abs(diff) / g)),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        n_valid=int(p.size),
        n_clamped=n_clamped,
    )


def compute_metrics(pred, gt, mask=None):
    """Standard depth metrics over the pixels selected by ``mask``.

    The mask must lie inside ``gt > 0``; by default it is exactly that set.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise EvaluationError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    mask = gt > 0 if mask is None else np.asarray(mask, dtype=bool)
    if np.any(mask & ~(gt > 0)):
        raise EvaluationError("mask selects pixels without ground truth")
    return _metrics_from_pixels(pred[mask], gt[mask])


def low_height_mask(lidar_ego, cam_pose, k, width, height, z_range=(0.3, 2.0), max_depth=None):
    """Pixels whose winning lidar return lies between z_range meters above ground."""
    depth, src = lidar_depth(lidar_ego, cam_pose, k, width, height)
    z = lidar_ego.xyz[:, 2] if len(lidar_ego) else np.zeros(0)
    hit = src >= 0
    zpix = np.where(hit, z[np.maximum(src, 0)] if z.size else 0.0, np.nan)
    mask = hit & (zpix >= z_range[0]) & (zpix <= z_range[1])
    if max_depth is not None:
        mask &= depth <= max_depth
    return mask


def split_report(per_sample):
    """Pixel-pooled metrics per condition tag plus a pooled ``combine`` entry.

    ``per_sample`` yields ``(pred, gt, mask, tag)``. Tags without samples
    are omitted from the result.
    """
    pools = {t: ([], []) for t in TAGS}
    for pred, gt, mask, tag in per_sample:
        if tag not in pools:
            raise EvaluationError(f"unknown condition tag {tag!r}; expected one of {TAGS}")
        pred = np.asarray(pred, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        mask = gt > 0 if mask is None else np.asarray(mask, dtype=bool)
        pools[tag][0].append(pred[mask])
        pools[tag][1].append(gt[mask])
    out = {}
    all_p, all_g = [], []
    for tag in TAGS:
        ps, gs = pools[tag]
        if not ps:
            continue
        p, g = np.concatenate(ps), np.concatenate(gs)
        if p.size:
            out[tag] = _metrics_from_pixels(p, g)
        all_p.append(p)
        all_g.append(g)
    if not all_p:
        raise EvaluationError("no samples to report")
    out["combine"] = _metrics_from_pixels(np.concatenate(all_p), np.concatenate(all_g))
    return out


def report_json(reports):
    return json.dumps({k: v.to_dict() for k, v in reports.items()}, indent=2)


def report_table(reports, title=None):
    """Plain-text table with one column per split, metrics as rows."""
    cols = [c for c in ("combine",) + TAGS if c in reports]
    rows = [("delta1", "d1<1.25"), ("delta2", "d2<1.25^2"), ("delta3", "d3<1.25^3"),
            ("rmse", "RMSE"), ("rmse_log", "RMSE_log"), ("abs_rel", "AbsRel"), ("n_valid", "pixels")]
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'metric':<12}" + "".join(f"{c:>12}" for c in cols))
    for key, label in rows:
        vals = [getattr(reports[c], key) for c in cols]
        if key == "n_valid":
            cells = "".join(f"{v:>12d}" for v in vals)
        else:
            cells = "".join(f"{v:>12.4f}" for v in vals)
        lines.append(f"{label:<12}" + cells)
    return "\n".join(lines)
