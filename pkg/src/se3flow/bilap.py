"""Edge-weighted quadratic smoothing of dense embedding fields.

Solves (I + Dx^T Wx Dx + Dy^T Wy Dy) u = v per channel, where Dx/Dy are
first-order forward differences on the pixel grid and Wx/Wy are nonnegative
per-edge weights. Zero-weight edges decouple their endpoints, so the layer
smooths within regions while leaving hard boundaries untouched; constant
fields are fixed points.

The backward pass reuses the factorization: with d = A^-1 grad_u,
grad_v = d and the per-edge weight gradients are -(D u) * (D d), summed over
channels. Both are exact adjoints of the linear solve, not approximations.
"""

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import NegativeWeight, NotPositiveDefinite


def forward_diff_x(field):
    """Differences between horizontal neighbours: (H, W, ...) -> (H, W-1, ...)."""
    return field[:, 1:] - field[:, :-1]


def forward_diff_y(field):
    """Differences between vertical neighbours: (H, W, ...) -> (H-1, W, ...)."""
    return field[1:, :] - field[:-1, :]


class EdgeWeights:
    """Nonnegative weights on the grid's horizontal and vertical edges.

    wx: (H, W-1) weight between (y, x) and (y, x+1)
    wy: (H-1, W) weight between (y, x) and (y+1, x)
    """

    __slots__ = ("wx", "wy")

    def __init__(self, wx, wy):
        wx = np.ascontiguousarray(wx, dtype=np.float64)
        wy = np.ascontiguousarray(wy, dtype=np.float64)
        if wx.ndim != 2 or wy.ndim != 2:
            raise ValueError("edge weights must be 2-d arrays")
        h, w = wx.shape[0], wy.shape[1]
        if wx.shape != (h, w - 1) or wy.shape != (h - 1, w):
            raise ValueError(f"inconsistent edge shapes {wx.shape} / {wy.shape}")
        if not (np.all(np.isfinite(wx)) and np.all(np.isfinite(wy))):
            raise ValueError("edge weights must be finite")
        if np.any(wx < 0.0) or np.any(wy < 0.0):
            raise NegativeWeight("edge weights must be nonnegative")
        self.wx = wx
        self.wy = wy

    @property
    def shape(self):
        return (self.wx.shape[0], self.wy.shape[1])


def _difference_operators(h, w):
    """Sparse Dx, Dy acting on row-major flattened (h*w,) fields."""
    def band(n):
        return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n))

    Dx = sp.kron(sp.identity(h), band(w), format="csr")
    Dy = sp.kron(band(h), sp.identity(w), format="csr")
    return Dx, Dy


class SmoothingSystem:
    """Factorized smoothing operator for one set of edge weights.

    Factorizes once; solve() then handles any number of channels in a single
    multi-RHS triangular sweep.
    """

    def __init__(self, weights: EdgeWeights):
        self.weights = weights
        h, w = weights.shape
        self._shape = (h, w)
        Dx, Dy = _difference_operators(h, w)
        A = (
            sp.identity(h * w)
            + Dx.T @ sp.diags(weights.wx.ravel()) @ Dx
            + Dy.T @ sp.diags(weights.wy.ravel()) @ Dy
        ).tocsc()
        self.matrix = A
        try:
            self._lu = splu(A)
        except RuntimeError as e:
            raise NotPositiveDefinite(f"smoothing operator factorization failed: {e}") from e

    def solve(self, v):
        """u = A^-1 v for v of shape (H, W) or (H, W, C)."""
        h, w = self._shape
        v = np.asarray(v, dtype=np.float64)
        if v.shape[:2] != (h, w):
            raise ValueError(f"field shape {v.shape} does not match grid {self._shape}")
        flat = v.reshape(h * w, -1)
        u = self._lu.solve(np.ascontiguousarray(flat))
        return u.reshape(v.shape)

    def backward(self, u_star, grad_u):
        """Adjoint of solve at solution u_star: (grad_v, grad_wx, grad_wy)."""
        d = self.solve(grad_u)
        gx = forward_diff_x(u_star) * forward_diff_x(d)
        gy = forward_diff_y(u_star) * forward_diff_y(d)
        if gx.ndim == 3:
            gx = gx.sum(axis=-1)
            gy = gy.sum(axis=-1)
        return d, -gx, -gy


def smooth_forward(v, weights: EdgeWeights):
    """One-shot solve; build a SmoothingSystem instead to reuse the factorization."""
    return SmoothingSystem(weights).solve(v)


def smooth_backward(weights: EdgeWeights, u_star, grad_u):
    """One-shot adjoint: returns (grad_v, grad_wx, grad_wy)."""
    return SmoothingSystem(weights).backward(u_star, grad_u)
