"""Per-pixel SE(3) Gauss-Newton step with embedding-weighted neighbourhoods.

Every pixel i owns a 6-dof twist update delta_i. Neighbours j vote on it with
weight a_ij * w_j, where a_ij comes from embedding distance and w_j are the
per-component revision confidences. The per-pixel 6x6 normal equations

    H_i = sum_j a_ij J_j^T W_j J_j      b_i = sum_j a_ij J_j^T W_j r_ij

are accumulated in place (no global Jacobian is ever materialized), solved
with relative + absolute diagonal damping, and applied by left retraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import camera, kernels, se3
from .camera import EPS_Z, InverseDepthMap, PinholeIntrinsics
from .errors import FactorizationFailure
from .se3 import Se3

# pixels whose accumulated confidence mass is below this are left untouched
EPS_W = 1e-8


@dataclass(frozen=True)
class Neighborhood:
    """Square window of `radius` pixels; stride > 1 subsamples the window."""

    radius: int = 16
    stride: int = 1

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    def offsets(self) -> np.ndarray:
        """Sorted 1-D offsets (multiples of stride, always including 0)."""
        pos = np.arange(0, self.radius + 1, self.stride, dtype=np.int64)
        return np.unique(np.concatenate([-pos, pos]))

    def size(self) -> int:
        return len(self.offsets()) ** 2


@dataclass
class RevisionBundle:
    """Per-pixel correspondence revisions and confidences.

    r: (H,W,3) update to the current reprojection estimate (dx, dy, dd)
    w: (H,W,3) non-negative per-component confidence weights
    """

    r: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.r = np.ascontiguousarray(self.r, dtype=np.float64)
        self.w = np.ascontiguousarray(self.w, dtype=np.float64)
        if self.r.shape != self.w.shape or self.r.shape[-1] != 3:
            raise ValueError("r and w must both be (H, W, 3)")
        if np.any(self.w < 0.0):
            raise ValueError("confidences must be >= 0")


@dataclass
class NormalSystem6:
    """Per-pixel normal equations plus accumulation diagnostics."""

    H: np.ndarray  # (H, W, 6, 6)
    b: np.ndarray  # (H, W, 6)
    weight: np.ndarray  # (H, W) accumulated confidence mass
    objective: np.ndarray  # (H, W) weighted squared residual at delta = 0


@dataclass
class StepInfo:
    delta: np.ndarray
    unconstrained: np.ndarray
    failed: np.ndarray
    weight: np.ndarray
    objective: np.ndarray

    @property
    def total_objective(self) -> float:
        return float(self.objective.sum())


def affinity(vi, vj) -> np.ndarray:
    """Embedding affinity 2*sigmoid(-||vi - vj||^2), in (0, 1], 1 iff vi == vj."""
    vi = np.asarray(vi, dtype=np.float64)
    vj = np.asarray(vj, dtype=np.float64)
    d2 = np.sum((vi - vj) ** 2, axis=-1)
    with np.errstate(over="ignore"):
        return 2.0 / (1.0 + np.exp(d2))


def residual(i, j, T: Se3, rev: RevisionBundle, z1: InverseDepthMap, K: PinholeIntrinsics):
    """Residual of pixel pair (i, j): where j's revised target sits relative to
    j's point carried by i's transform. Returns ((3,) residual, valid)."""
    iy, ix = i
    jy, jx = j
    if not z1.valid[jy, jx]:
        return np.zeros(3), False
    pix_j = np.array([float(jx), float(jy), z1.d[jy, jx]])
    Xj = camera.backproject(pix_j, K)
    tgt, ok_t = camera.project_masked(T[jy, jx].act(Xj), K)
    pred, ok_p = camera.project_masked(T[iy, ix].act(Xj), K)
    if not (ok_t and ok_p):
        return np.zeros(3), False
    return tgt + rev.r[jy, jx] - pred, True


def build_normal_equations(
    T: Se3,
    emb: np.ndarray,
    rev: RevisionBundle,
    z1: InverseDepthMap,
    K: PinholeIntrinsics,
    nbhd: Neighborhood = Neighborhood(),
    eps_z: float = EPS_Z,
) -> NormalSystem6:
    """Accumulate all per-pixel 6x6 systems in one sweep over the neighbourhood."""
    emb = np.ascontiguousarray(emb, dtype=np.float64)
    h, w = z1.shape
    if T.shape != (h, w) or emb.shape[:2] != (h, w) or rev.r.shape[:2] != (h, w):
        raise ValueError("field, embeddings, revisions and depth must share (H, W)")

    points, ok_pt = camera.backproject_masked(camera.augmented_grid(z1), K)
    ok_pt &= z1.valid
    ok = np.ascontiguousarray(ok_pt.astype(np.uint8))

    Hm, bv, wsum, obj = kernels.assemble_normal_equations(
        np.ascontiguousarray(T.rotation_matrix()),
        np.ascontiguousarray(T.t),
        np.ascontiguousarray(points),
        ok,
        rev.r,
        rev.w,
        emb,
        K.fx,
        K.fy,
        K.cx,
        K.cy,
        nbhd.offsets(),
        eps_z,
    )
    return NormalSystem6(Hm, bv, wsum, obj)


def _cholesky_solve_batch(A, b):
    """Batched SPD solve via hand-rolled Cholesky: (..., n, n), (..., n).

    Returns (x, ok); rows with a non-positive pivot get ok = False (x garbage,
    caller must mask). Deterministic, no LAPACK dispatch involved.
    """
    n = A.shape[-1]
    L = np.zeros_like(A)
    ok = np.ones(A.shape[:-2], dtype=bool)
    for k in range(n):
        d = A[..., k, k] - np.sum(L[..., k, :k] ** 2, axis=-1)
        ok &= d > 0.0
        piv = np.sqrt(np.where(d > 0.0, d, 1.0))
        L[..., k, k] = piv
        for i in range(k + 1, n):
            L[..., i, k] = (A[..., i, k] - np.sum(L[..., i, :k] * L[..., k, :k], axis=-1)) / piv
    y = np.zeros_like(b)
    for k in range(n):
        y[..., k] = (b[..., k] - np.sum(L[..., k, :k] * y[..., :k], axis=-1)) / L[..., k, k]
    x = np.zeros_like(b)
    for k in range(n - 1, -1, -1):
        x[..., k] = (y[..., k] - np.sum(L[..., k + 1 :, k] * x[..., k + 1 :], axis=-1)) / L[..., k, k]
    return x, ok


def solve_damped(sys: NormalSystem6, lam: float = 1e-4, lam_abs: float = 1e-8, eps_w: float = EPS_W):
    """Solve (H + lam diag(H) + lam_abs I) delta = b per pixel.

    Returns (delta, unconstrained, failed). Unconstrained pixels (confidence
    mass below eps_w) and failed factorizations get delta = 0.
    """
    damped = sys.H.copy()
    idx = np.arange(6)
    damped[..., idx, idx] += lam * sys.H[..., idx, idx] + lam_abs
    x, ok = _cholesky_solve_batch(damped, sys.b)
    unconstrained = sys.weight < eps_w
    failed = ~ok & ~unconstrained
    keep = ok & ~unconstrained
    delta = np.where(keep[..., None], x, 0.0)
    return delta, unconstrained, failed


def dense_se3_step(
    T: Se3,
    emb: np.ndarray,
    rev: RevisionBundle,
    z1: InverseDepthMap,
    K: PinholeIntrinsics,
    nbhd: Neighborhood = Neighborhood(),
    lam: float = 1e-4,
    lam_abs: float = 1e-8,
):
    """One Gauss-Newton sweep: assemble, solve, retract. Returns (T', StepInfo).

    Frozen pixels (unconstrained or failed) keep their transform bitwise:
    retraction by a zero twist is exact.
    """
    system = build_normal_equations(T, emb, rev, z1, K, nbhd)
    delta, unconstrained, failed = solve_damped(system, lam, lam_abs)
    T_new = se3.retract(delta, T)
    return T_new, StepInfo(delta, unconstrained, failed, system.weight, system.objective)


def linear_solve_adjoint(Hm: np.ndarray, u_star: np.ndarray, grad_u: np.ndarray):
    """Adjoint of the SPD solve u* = H^-1 b.

    Given dL/du*, returns (grad_b, grad_H) with grad_b = H^-1 grad_u and
    grad_H[m, n] = -grad_b[m] * u_star[n] (per-entry derivative of
    L(H, b) = <grad_u, H^-1 b>). Raises FactorizationFailure if H is not SPD.
    """
    Hm = np.asarray(Hm, dtype=np.float64)
    try:
        cf = scipy.linalg.cho_factor(Hm)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise FactorizationFailure(f"adjoint solve failed: {e}") from e
    grad_b = scipy.linalg.cho_solve(cf, np.asarray(grad_u, dtype=np.float64))
    grad_H = -np.outer(grad_b, np.asarray(u_star, dtype=np.float64))
    return grad_b, grad_H
