"""Evaluation metrics: endpoint errors and threshold accuracies.

2D errors live in pixels on the image plane, 3D errors in scene length
units on per-pixel scene-flow vectors (moved point minus original point).
All means and fractions are taken over an explicit pixel mask; asking for
a metric over an empty mask is an error, not a NaN.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import camera
from .camera import InverseDepthMap, PinholeIntrinsics
from .errors import EmptyMask
from .se3 import Se3
from .synth import Scene


def _checked_mask(mask, shape):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} does not match field shape {shape}")
    if not mask.any():
        raise EmptyMask("metric requested over an empty mask")
    return mask


def endpoint_error_2d(pred, gt):
    """Per-pixel Euclidean gap between the pixel-displacement components."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("flow field shapes disagree")
    diff = pred[..., :2] - gt[..., :2]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def epe2d(pred, gt, mask) -> float:
    """Mean 2D endpoint error (px) over the masked pixels."""
    err = endpoint_error_2d(pred, gt)
    mask = _checked_mask(mask, err.shape)
    return float(np.mean(err[mask]))


def scene_flow(T: Se3, z1: InverseDepthMap, K: PinholeIntrinsics):
    """Per-pixel 3D displacement T*X - X and a backprojection-validity mask."""
    X, ok = camera.backproject_masked(camera.augmented_grid(z1), K)
    ok = ok & z1.valid
    return np.where(ok[..., None], T.act(X) - X, 0.0), ok


def endpoint_error_3d(T_pred: Se3, scene: Scene):
    """Per-pixel Euclidean gap between predicted and true scene flow."""
    s_pred, ok_p = scene_flow(T_pred, scene.invdepth1, scene.intrinsics)
    s_gt, ok_g = scene_flow(scene.gt_field(), scene.invdepth1, scene.intrinsics)
    diff = s_pred - s_gt
    return np.sqrt(np.sum(diff * diff, axis=-1)), ok_p & ok_g


def epe3d(T_pred: Se3, scene: Scene, mask=None) -> float:
    """Mean 3D endpoint error over masked pixels (default: measured pixels)."""
    err, ok = endpoint_error_3d(T_pred, scene)
    mask = scene.meas_ok if mask is None else mask
    mask = _checked_mask(mask, err.shape) & ok
    if not mask.any():
        raise EmptyMask("no valid pixels under mask")
    return float(np.mean(err[mask]))


def threshold_metrics(pred, gt, mask, thresholds):
    """Fractions of masked pixels whose endpoint error falls strictly below
    each threshold. pred/gt are vector fields compared in Euclidean norm
    over the trailing axis."""
    for t in thresholds:
        if not t > 0:
            raise ValueError("thresholds must be positive")
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("field shapes disagree")
    diff = pred - gt
    err = np.sqrt(np.sum(diff * diff, axis=-1))
    mask = _checked_mask(mask, err.shape)
    sel = err[mask]
    return [float(np.mean(sel < t)) for t in thresholds]


_REPORT_KEYS = (
    "epe2d_mean",
    "epe3d_mean",
    "acc_1px",
    "acc3d_05",
    "acc3d_10",
    "pixel_count",
    "curves",
)


@dataclass(frozen=True)
class MetricReport:
    """Scene-level evaluation summary with optional per-iteration curves."""

    epe2d_mean: float
    epe3d_mean: float
    acc_1px: float
    acc3d_05: float
    acc3d_10: float
    pixel_count: int
    curves: dict

    def __post_init__(self):
        for name in ("acc_1px", "acc3d_05", "acc3d_10"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a fraction in [0, 1], got {v}")
        for name in ("epe2d_mean", "epe3d_mean", "acc_1px", "acc3d_05", "acc3d_10"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in _REPORT_KEYS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**{k: d[k] for k in _REPORT_KEYS})

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls.from_dict(json.loads(text))

    def to_text(self) -> str:
        lines = [
            f"pixels evaluated   {self.pixel_count}",
            f"2d endpoint error  {self.epe2d_mean:.6f} px",
            f"3d endpoint error  {self.epe3d_mean:.6f}",
            f"2d error < 1px     {100.0 * self.acc_1px:.2f}%",
            f"3d error < 0.05    {100.0 * self.acc3d_05:.2f}%",
            f"3d error < 0.10    {100.0 * self.acc3d_10:.2f}%",
        ]
        return "\n".join(lines) + "\n"


def evaluate_field(T_pred: Se3, scene: Scene, mask=None, curves=None, max_flow=None) -> MetricReport:
    """Score a predicted field against a scene's ground truth.

    mask defaults to the scene's measured (non-occluded, in-frame) pixels.
    max_flow, when set, additionally excludes pixels whose true 2D motion
    magnitude is max_flow px or more. curves (dict of per-iteration lists)
    is carried through into the report.
    """
    from .fieldops import induced_flow

    mask = scene.meas_ok if mask is None else np.asarray(mask, dtype=bool)
    gt_flow = scene.gt_flow()
    if max_flow is not None:
        mag = np.sqrt(np.sum(gt_flow[..., :2] ** 2, axis=-1))
        mask = mask & (mag < max_flow)
    flow_pred, ok2 = induced_flow(T_pred, scene.invdepth1, scene.intrinsics)
    err3, ok3 = endpoint_error_3d(T_pred, scene)
    mask = _checked_mask(mask, err3.shape) & ok2 & ok3
    if not mask.any():
        raise EmptyMask("no valid pixels under mask")

    err2 = endpoint_error_2d(flow_pred, gt_flow)
    sel2 = err2[mask]
    sel3 = err3[mask]
    return MetricReport(
        epe2d_mean=float(np.mean(sel2)),
        epe3d_mean=float(np.mean(sel3)),
        acc_1px=float(np.mean(sel2 < 1.0)),
        acc3d_05=float(np.mean(sel3 < 0.05)),
        acc3d_10=float(np.mean(sel3 < 0.10)),
        pixel_count=int(mask.sum()),
        curves={} if curves is None else dict(curves),
    )
