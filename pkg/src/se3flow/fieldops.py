"""Operations on dense transform fields: flow induction, upsampling, solving.

The upsampler blends neighbouring coarse transforms as a convex combination
of their twist coordinates inside a 3x3 coarse window, then maps back through
the exponential. Convexity keeps the result on the manifold and makes
piecewise-constant fields upsample exactly; default weights reproduce clamped
bilinear interpolation.
"""

from dataclasses import dataclass, field

import numpy as np

from . import bilap, camera, se3, synth
from .camera import InverseDepthMap, PinholeIntrinsics
from .dense_se3 import Neighborhood, dense_se3_step
from .errors import NonConvexWeights
from .se3 import Se3
from .synth import OracleConfig, Scene


def twist_field(T: Se3) -> np.ndarray:
    """Per-pixel twist coordinates of the field (inverse of se3.exp)."""
    return se3.log(T)


def induced_flow(T: Se3, z1: InverseDepthMap, K: PinholeIntrinsics):
    """Augmented-coordinate motion (dx, dy, d2-d1) each pixel undergoes under T.

    Returns (flow (H,W,3), valid (H,W)); invalid pixels carry zero flow.
    """
    grid = camera.augmented_grid(z1)
    target, ok = camera.map_pixel_masked(grid, T, K)
    ok = ok & z1.valid
    return np.where(ok[..., None], target - grid, 0.0), ok


def _axis_weights(n_coarse, n_fine, factor):
    """Clamped bilinear 1-d weights: center index plus (n_fine, 3) slot weights."""
    xf = np.arange(n_fine)
    xc = (xf + 0.5) / factor - 0.5
    lo = np.floor(xc)
    frac = xc - lo
    center = np.clip(lo.astype(int), 0, n_coarse - 1)
    second = np.clip(lo.astype(int) + 1, 0, n_coarse - 1)
    slots = np.zeros((n_fine, 3))
    slots[:, 1] += 1.0 - frac
    np.add.at(slots, (xf, 1 + (second - center)), frac)
    return center, slots


def default_upsample_weights(shape_coarse, factor):
    """Bilinear-equivalent convex weights over the 3x3 coarse window."""
    hc, wc = shape_coarse
    cy, wys = _axis_weights(hc, hc * factor, factor)
    cx, wxs = _axis_weights(wc, wc * factor, factor)
    weights = wys[:, None, :, None] * wxs[None, :, None, :]
    return (cy, cx), weights


def upsample_se3(T: Se3, factor: int, weights=None) -> Se3:
    """Upsample a coarse transform field by an integer factor.

    weights, when given, must be (H*factor, W*factor, 3, 3), nonnegative and
    summing to 1 over the window: a convex blend of the clamped 3x3 coarse
    neighbourhood around each fine pixel's parent cell.
    """
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    hc, wc = T.shape
    (cy, cx), default = default_upsample_weights((hc, wc), factor)
    if weights is None:
        weights = default
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != default.shape:
            raise ValueError(f"weights must have shape {default.shape}, got {weights.shape}")
        if np.min(weights) < -1e-12:
            raise NonConvexWeights("negative blend weight")
        if np.max(np.abs(weights.sum(axis=(-2, -1)) - 1.0)) > 1e-8:
            raise NonConvexWeights("blend weights must sum to 1")

    xi = se3.log(T)
    out = np.zeros((hc * factor, wc * factor, 6))
    for dy in (-1, 0, 1):
        iy = np.clip(cy + dy, 0, hc - 1)
        for dx in (-1, 0, 1):
            ix = np.clip(cx + dx, 0, wc - 1)
            w = weights[:, :, dy + 1, dx + 1, None]
            out += w * xi[iy[:, None], ix[None, :]]
    return se3.exp(out)


@dataclass(frozen=True)
class SolveParams:
    """Driver settings for solving one scene."""

    iters: int = 16
    radius: int = 16
    stride: int = 1
    lam: float = 1e-4
    lam_abs: float = 1e-8
    smoothing: bool = False
    oracle: OracleConfig = field(default_factory=OracleConfig)


@dataclass(frozen=True)
class IterationStats:
    iteration: int
    objective: float
    step_max: float
    step_mean: float
    constrained_fraction: float
    failed_pixels: int


@dataclass(frozen=True, eq=False)
class SolveResult:
    field: Se3
    stats: tuple
    embeddings: np.ndarray
    fields: tuple = ()


def solve_scene(scene: Scene, params: SolveParams = SolveParams(), track_fields: bool = False) -> SolveResult:
    """Iterate the dense solver on a scene, oracle front end standing in for
    a network: embeddings (optionally smoothed along ground-truth edges) and
    per-iteration revision targets. track_fields keeps every iterate for
    convergence studies."""
    emb = synth.oracle_embeddings(scene, params.oracle)
    if params.smoothing:
        emb = bilap.smooth_forward(emb, synth.oracle_edge_weights(scene, params.oracle))
    nbhd = Neighborhood(params.radius, params.stride)
    T = Se3.identity(scene.shape)
    stats = []
    iterates = []
    for i in range(params.iters):
        rev = synth.oracle_revisions(scene, T, params.oracle, iteration=i)
        T, info = dense_se3_step(
            T, emb, rev, scene.invdepth1, scene.intrinsics, nbhd, params.lam, params.lam_abs
        )
        if track_fields:
            iterates.append(T)
        step = np.linalg.norm(info.delta, axis=-1)
        stats.append(
            IterationStats(
                iteration=i,
                objective=float(info.total_objective),
                step_max=float(step.max()),
                step_mean=float(step.mean()),
                constrained_fraction=float(1.0 - info.unconstrained.mean()),
                failed_pixels=int(info.failed.sum()),
            )
        )
    return SolveResult(T, tuple(stats), emb, tuple(iterates))


@dataclass(frozen=True)
class LossParams:
    gamma: float = 0.9
    revision_loss_weight: float = 0.0


def sequence_loss(
    fields,
    gt_flow,
    z1: InverseDepthMap,
    K: PinholeIntrinsics,
    valid=None,
    params: LossParams = LossParams(),
    revisions=None,
    revision_targets=None,
):
    """Exponentially weighted supervision over an iterate sequence.

    Per field: mean L1 gap between its induced augmented flow and gt_flow over
    valid pixels, weighted by gamma^(n-1-i) so late iterates dominate. The
    optional revision term compares supplied revision bundles against targets
    wherever both carry confidence. Returns (total, per_field_errors).
    """
    n = len(fields)
    if n == 0:
        raise ValueError("need at least one field")
    total = 0.0
    per_field = []
    for i, T in enumerate(fields):
        flow, ok = induced_flow(T, z1, K)
        m = ok if valid is None else (ok & valid)
        if not np.any(m):
            raise ValueError("no valid pixels to supervise")
        err = float(np.mean(np.abs(flow - gt_flow)[m]))
        per_field.append(err)
        total += params.gamma ** (n - 1 - i) * err
    if params.revision_loss_weight > 0.0 and revisions is not None and revision_targets is not None:
        for i, (rv, rt) in enumerate(zip(revisions, revision_targets)):
            m = (rv.w > 0) & (rt.w > 0)
            if np.any(m):
                gap = float(np.mean(np.abs(rv.r - rt.r)[m]))
                total += params.revision_loss_weight * params.gamma ** (n - 1 - i) * gap
    return total, per_field
