"""SE(3) primitives on numpy arrays.

Transforms are stored as unit quaternion (w, x, y, z) plus translation and
support arbitrary leading shape, so a single ``Se3`` instance is either one
transform (shape ``()``) or a whole field (shape ``(H, W)``).

Twists are plain ``(..., 6)`` arrays ordered ``(tau, phi)``: translational
part first, rotational part last.
"""

from __future__ import annotations

import numpy as np

# Branch switch for the small-angle series. At 1e-3 both the closed form and
# the series are accurate to ~1e-13; pushing the switch lower makes the
# closed form lose digits to the 1-cos(theta) cancellation.
SMALL_ANGLE = 1e-3

# Quaternions whose squared norm is within this of 1 are left untouched by
# composition, which keeps retract(0, T) == T bitwise.
_UNIT_TOL = 1e-13


def _quat_mul(q1, q2):
    w1, x1, y1, z1 = np.moveaxis(q1, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(q2, -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def _quat_conj(q):
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def _quat_rotate(q, v):
    # v + 2 cross(q_vec, cross(q_vec, v) + w v), exact for unit quaternions
    qv = q[..., 1:]
    w = q[..., :1]
    t = np.cross(qv, np.cross(qv, v) + w * v)
    return v + 2.0 * t


def _quat_to_matrix(q):
    w, x, y, z = np.moveaxis(q, -1, 0)
    row0 = np.stack([1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def _quat_from_rotvec(phi):
    theta2 = np.sum(phi * phi, axis=-1)
    theta = np.sqrt(theta2)
    half = 0.5 * theta
    small = theta < SMALL_ANGLE
    # sin(theta/2)/theta, series 1/2 - theta^2/48 + theta^4/3840
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 0.5 - theta2 / 48.0 + theta2 * theta2 / 3840.0, np.sin(half) / np.where(small, 1.0, theta))
    w = np.cos(half)
    return np.concatenate([w[..., None], k[..., None] * phi], axis=-1)


def _rotvec_from_quat(q):
    q = np.where(q[..., :1] < 0.0, -q, q)  # principal branch, theta in [0, pi]
    xyz = q[..., 1:]
    w = q[..., 0]
    s2 = np.sum(xyz * xyz, axis=-1)
    s = np.sqrt(s2)
    small = s < 1e-6
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(
            small,
            2.0 / np.maximum(w, 0.5) - 2.0 * s2 / (3.0 * np.maximum(w, 0.5) ** 3),
            2.0 * np.arctan2(s, w) / np.where(small, 1.0, s),
        )
    return k[..., None] * xyz


def hat(w) -> np.ndarray:
    """Skew matrix of ``w``: hat(w) @ u == cross(w, u). Shape (..., 3) -> (..., 3, 3)."""
    w = np.asarray(w, dtype=np.float64)
    w0, w1, w2 = np.moveaxis(w, -1, 0)
    zero = np.zeros_like(w0)
    return np.stack(
        [
            np.stack([zero, -w2, w1], axis=-1),
            np.stack([w2, zero, -w0], axis=-1),
            np.stack([-w1, w0, zero], axis=-1),
        ],
        axis=-2,
    )


def _rot_series_coeffs(theta2):
    """(1-cos)/t^2 and (t-sin)/t^3 with series fallback below SMALL_ANGLE."""
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta2)
    sh = np.sin(0.5 * theta)
    with np.errstate(invalid="ignore", divide="ignore"):
        # 1 - cos t == 2 sin^2(t/2), free of cancellation
        c1 = np.where(small, 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0, 2.0 * sh * sh / safe)
        c2 = np.where(small, 1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0, (theta - np.sin(theta)) / (safe * np.where(small, 1.0, theta)))
    return c1, c2


def _left_jacobian(phi):
    c1, c2 = _rot_series_coeffs(np.sum(phi * phi, axis=-1))
    ph = hat(phi)
    eye = np.broadcast_to(np.eye(3), ph.shape)
    return eye + c1[..., None, None] * ph + c2[..., None, None] * (ph @ ph)


def _left_jacobian_inv(phi):
    theta2 = np.sum(phi * phi, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    safe2 = np.where(small, 1.0, theta2)
    half = 0.5 * theta
    # (1 - h cot h)/t^2 with h = t/2: stable at pi, series near 0
    with np.errstate(invalid="ignore", divide="ignore"):
        c3 = np.where(
            small,
            1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0,
            (1.0 - half * np.cos(half) / np.where(small, 1.0, np.sin(half))) / safe2,
        )
    ph = hat(phi)
    eye = np.broadcast_to(np.eye(3), ph.shape)
    return eye - 0.5 * ph + c3[..., None, None] * (ph @ ph)


class Se3:
    """Rigid transform(s) with arbitrary leading shape.

    quat: (..., 4) unit quaternion, wxyz.  t: (..., 3) translation.
    """

    __slots__ = ("quat", "t")

    def __init__(self, quat, t):
        self.quat = np.asarray(quat, dtype=np.float64)
        self.t = np.asarray(t, dtype=np.float64)
        if self.quat.shape[-1] != 4 or self.t.shape[-1] != 3:
            raise ValueError("quat must be (...,4) and t (...,3)")
        if self.quat.shape[:-1] != self.t.shape[:-1]:
            raise ValueError("quat and t leading shapes differ")

    @classmethod
    def identity(cls, shape=()) -> "Se3":
        shape = tuple(shape) if not isinstance(shape, int) else (shape,)
        quat = np.zeros(shape + (4,))
        quat[..., 0] = 1.0
        return cls(quat, np.zeros(shape + (3,)))

    @property
    def shape(self):
        return self.quat.shape[:-1]

    def __getitem__(self, idx) -> "Se3":
        return Se3(self.quat[idx], self.t[idx])

    def copy(self) -> "Se3":
        return Se3(self.quat.copy(), self.t.copy())

    def compose(self, other: "Se3") -> "Se3":
        """self then applied after other: result.act(x) == self.act(other.act(x))."""
        q = _quat_mul(self.quat, other.quat)
        n2 = np.sum(q * q, axis=-1, keepdims=True)
        q = np.where(np.abs(n2 - 1.0) > _UNIT_TOL, q / np.sqrt(n2), q)
        return Se3(q, _quat_rotate(self.quat, other.t) + self.t)

    def inverse(self) -> "Se3":
        qc = _quat_conj(self.quat)
        return Se3(qc, -_quat_rotate(qc, self.t))

    def act(self, x) -> np.ndarray:
        """Apply to Euclidean points (..., 3); the homogeneous w = 1 is implicit."""
        return _quat_rotate(self.quat, np.asarray(x, dtype=np.float64)) + self.t

    def rotation_matrix(self) -> np.ndarray:
        return _quat_to_matrix(self.quat)

    def __repr__(self):
        return f"Se3(shape={self.shape})"


def exp(xi) -> Se3:
    """Exponential map. xi: (..., 6) twist (tau, phi) -> Se3 with leading shape of xi."""
    xi = np.asarray(xi, dtype=np.float64)
    tau, phi = xi[..., :3], xi[..., 3:]
    q = _quat_from_rotvec(phi)
    t = (_left_jacobian(phi) @ tau[..., None])[..., 0]
    return Se3(q, t)


def log(T: Se3) -> np.ndarray:
    """Logarithm map, principal branch (||phi|| <= pi). Inverse of exp."""
    phi = _rotvec_from_quat(T.quat)
    tau = (_left_jacobian_inv(phi) @ T.t[..., None])[..., 0]
    return np.concatenate([tau, phi], axis=-1)


def retract(delta, T: Se3) -> Se3:
    """Left-multiplicative update: exp(delta) composed onto T."""
    return exp(delta).compose(T)


def distance(Ta: Se3, Tb: Se3) -> np.ndarray:
    """Twist-norm metric ||log(Ta^-1 Tb)||, shape = leading shape."""
    return np.linalg.norm(log(Ta.inverse().compose(Tb)), axis=-1)
