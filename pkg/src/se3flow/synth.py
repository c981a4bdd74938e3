"""Synthetic piecewise-rigid scenes with machine-exact ground truth.

A scene is a stack of 3D planes: an infinite background plane plus blobby
foreground cutouts, each moving rigidly. Planes make the ground truth exact
everywhere: inverse depth is affine in pixel coordinates, so the rendered
second-frame depth grid reproduces the analytic values, and bilinear samples
of it are exact wherever the 2x2 footprint stays on a single layer.

The oracle functions stand in for a learned front end: they hand the solver
revision targets, embeddings and edge weights derived from the ground truth,
optionally corrupted with seeded noise. All randomness flows through
counter-based streams keyed by (seed, purpose, index), so scenes and noise
are reproducible across platforms and process restarts.
"""

import zlib
from dataclasses import dataclass

import numpy as np

from . import camera, se3
from .bilap import EdgeWeights
from .camera import EPS_Z, InverseDepthMap, PinholeIntrinsics
from .dense_se3 import RevisionBundle
from .errors import DegenerateScene
from .se3 import Se3

_RESAMPLE_LIMIT = 10
_MIN_PLANE_OFFSET = 0.05
_MIN_MOVED_DEPTH = 0.05


@dataclass(frozen=True)
class SceneSpec:
    """Scene layout parameters. num_objects counts the background as one."""

    height: int = 96
    width: int = 128
    fx: float = 110.0
    fy: float = 110.0
    cx: float = 63.5
    cy: float = 47.5
    num_objects: int = 3
    depth_range: tuple = (2.0, 6.0)
    motion_scale: float = 0.15
    min_object_pixels: int = 16

    def intrinsics(self) -> PinholeIntrinsics:
        return PinholeIntrinsics(self.fx, self.fy, self.cx, self.cy)


@dataclass(frozen=True)
class OracleConfig:
    """Noise levels and weights for the oracle front end."""

    flow_noise: float = 0.0
    depth_noise: float = 0.0
    embedding_noise: float = 0.0
    edge_interior_weight: float = 100.0


def scene_rng(seed, purpose, index=0):
    """Independent counter-based stream keyed by (seed, purpose, index)."""
    tag = np.uint64(zlib.crc32(purpose.encode("ascii"))) << np.uint64(16)
    key = np.array([np.uint64(seed), tag + np.uint64(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class _Blob:
    """Star-shaped region: radius around the centre modulated by harmonics."""

    __slots__ = ("cx", "cy", "r0", "orders", "amps", "phases")

    def __init__(self, cx, cy, r0, orders, amps, phases):
        self.cx, self.cy, self.r0 = cx, cy, r0
        self.orders, self.amps, self.phases = orders, amps, phases

    def contains(self, px, py):
        dx = px - self.cx
        dy = py - self.cy
        theta = np.arctan2(dy, dx)
        rho = np.ones_like(theta)
        for k, a, p in zip(self.orders, self.amps, self.phases):
            rho += a * np.cos(k * theta + p)
        return np.hypot(dx, dy) <= self.r0 * rho


def _sample_blob(rng, h, w):
    cx = rng.uniform(0.2 * w, 0.8 * w)
    cy = rng.uniform(0.2 * h, 0.8 * h)
    r0 = rng.uniform(0.10, 0.22) * min(h, w)
    orders = np.arange(2, 6)
    amps = rng.uniform(0.0, 0.45, size=4) / orders
    phases = rng.uniform(0.0, 2.0 * np.pi, size=4)
    return _Blob(cx, cy, r0, orders, amps, phases)


def _sample_plane(rng, spec, front):
    """Inverse-depth coefficients (a, b, g): d = a*xn + b*yn + g.

    Slopes and offset are budgeted so d stays inside the spec's inverse-depth
    range over the whole image; foreground planes draw from the near half.
    """
    z_near, z_far = min(spec.depth_range), max(spec.depth_range)
    d_lo, d_hi = 1.0 / z_far, 1.0 / z_near
    span = d_hi - d_lo
    mid = 0.5 * (d_lo + d_hi)
    if front:
        g = rng.uniform(mid, d_hi - 0.31 * span)
    else:
        g = rng.uniform(d_lo + 0.31 * span, mid)
    ext_x = max(spec.cx, spec.width - 1 - spec.cx) / spec.fx
    ext_y = max(spec.cy, spec.height - 1 - spec.cy) / spec.fy
    a = rng.uniform(-1.0, 1.0) * 0.15 * span / ext_x
    b = rng.uniform(-1.0, 1.0) * 0.15 * span / ext_y
    return np.array([a, b, g])


def _sample_twist(rng, scale):
    return rng.standard_normal(6) * scale * np.array([1.0, 1.0, 1.0, 0.35, 0.35, 0.35])


def _moved_plane(n, T):
    """Inverse-depth coefficients of a plane after moving it by T, or None."""
    Rn = T.rotation_matrix() @ n
    c = 1.0 + Rn @ T.t
    if c <= _MIN_PLANE_OFFSET:
        return None
    return Rn / c


@dataclass(frozen=True, eq=False)
class Scene:
    """A generated scene: layout, motions and rendered second frame.

    measured_target carries the analytic 2D reprojection target and a depth
    target sampled bilinearly from the rendered frame-2 grid; meas_ok marks
    where that sample is trustworthy (in frame, footprint on the source
    pixel's own layer, moved point in front of the camera).
    """

    spec: SceneSpec
    seed: int
    twists: np.ndarray
    transforms: Se3
    labels1: np.ndarray
    invdepth1: InverseDepthMap
    labels2: np.ndarray
    invdepth2: InverseDepthMap
    analytic_target: np.ndarray
    measured_target: np.ndarray
    meas_ok: np.ndarray
    occluded: np.ndarray

    @property
    def intrinsics(self) -> PinholeIntrinsics:
        return self.spec.intrinsics()

    @property
    def shape(self):
        return (self.spec.height, self.spec.width)

    def gt_field(self) -> Se3:
        """Per-pixel ground-truth transform (gather by layer label)."""
        return self.transforms[self.labels1]

    def gt_flow(self) -> np.ndarray:
        """Augmented-coordinate change (dx, dy, d2 - d1) of every pixel."""
        return self.analytic_target - camera.augmented_grid(self.invdepth1)


def _label_frame1(planes, blobs, xg, yg, xn, yn):
    h, w = xg.shape
    best = np.full((h, w), -np.inf)
    labels = np.full((h, w), -1, dtype=np.int32)
    for k, (n, blob) in enumerate(zip(planes, blobs)):
        d = n[0] * xn + n[1] * yn + n[2]
        m = d > 0.0
        if blob is not None:
            m &= blob.contains(xg, yg)
        upd = m & (d > best)
        best[upd] = d[upd]
        labels[upd] = k
    return labels, best


def _render_frame2(planes, blobs, transforms, K, xg, yg, xn, yn):
    """Closest-layer label and inverse depth on the frame-2 pixel grid.

    Each moved plane's inverse depth is affine in frame-2 pixel coordinates;
    membership is decided by unwarping the pixel back to frame 1 and testing
    the layer's outline there.
    """
    h, w = xg.shape
    best = np.full((h, w), -np.inf)
    labels = np.full((h, w), -1, dtype=np.int32)
    for k, (n, blob) in enumerate(zip(planes, blobs)):
        m = _moved_plane(n, transforms[k])
        if m is None:
            continue
        d2 = m[0] * xn + m[1] * yn + m[2]
        cand = d2 > EPS_Z
        if blob is not None:
            z2 = np.where(cand, 1.0 / np.where(cand, d2, 1.0), 0.0)
            Xp = np.stack([xn * z2, yn * z2, z2], axis=-1)
            Tk = transforms[k]
            Xb = (Xp - Tk.t) @ Tk.rotation_matrix()
            zb = Xb[..., 2] > EPS_Z
            zsafe = np.where(zb, Xb[..., 2], 1.0)
            p1x = K.fx * Xb[..., 0] / zsafe + K.cx
            p1y = K.fy * Xb[..., 1] / zsafe + K.cy
            cand &= zb & blob.contains(p1x, p1y)
        upd = cand & (d2 > best)
        best[upd] = d2[upd]
        labels[upd] = k
    valid = labels >= 0
    depth = np.where(valid, best, 0.0)
    return labels, InverseDepthMap(depth, valid)


def generate_scene(spec: SceneSpec, seed: int) -> Scene:
    """Sample a scene; raises DegenerateScene when the layout can't be met."""
    K_obj = spec.num_objects
    if K_obj < 1:
        raise ValueError("num_objects must be at least 1")
    K = spec.intrinsics()
    h, w = spec.height, spec.width
    xg, yg = camera.pixel_grid(h, w)
    xn = (xg - K.cx) / K.fx
    yn = (yg - K.cy) / K.fy

    layout_rng = scene_rng(seed, "layout")
    motion_rng = scene_rng(seed, "motion")

    planes = [_sample_plane(layout_rng, spec, front=False)]
    blobs = [None]
    for _ in range(K_obj - 1):
        planes.append(_sample_plane(layout_rng, spec, front=True))
        blobs.append(_sample_blob(layout_rng, h, w))

    labels1, d1 = _label_frame1(planes, blobs, xg, yg, xn, yn)
    for attempt in range(_RESAMPLE_LIMIT + 1):
        counts = np.bincount(labels1.ravel(), minlength=K_obj)
        small = [k for k in range(K_obj) if counts[k] < spec.min_object_pixels]
        if not small:
            break
        if 0 in small:
            raise DegenerateScene("background almost fully covered")
        if attempt == _RESAMPLE_LIMIT:
            raise DegenerateScene(
                f"could not fit {K_obj} components of >= {spec.min_object_pixels} px "
                f"on a {h}x{w} grid after {_RESAMPLE_LIMIT} resamples"
            )
        for k in small:
            planes[k] = _sample_plane(layout_rng, spec, front=True)
            blobs[k] = _sample_blob(layout_rng, h, w)
        labels1, d1 = _label_frame1(planes, blobs, xg, yg, xn, yn)

    invdepth1 = InverseDepthMap(d1)
    points = camera.backproject(camera.augmented_grid(invdepth1), K)

    twists = np.zeros((K_obj, 6))
    transforms = []
    for k in range(K_obj):
        region = labels1 == k
        Xk = points[region]
        for _ in range(_RESAMPLE_LIMIT):
            xi = _sample_twist(motion_rng, spec.motion_scale)
            T = se3.exp(xi)
            moved_z = T.act(Xk)[..., 2]
            if np.all(moved_z > _MIN_MOVED_DEPTH) and _moved_plane(planes[k], T) is not None:
                twists[k] = xi
                transforms.append(T)
                break
        else:
            raise DegenerateScene(f"no valid motion found for component {k}")

    field = Se3(
        np.stack([T.quat for T in transforms]),
        np.stack([T.t for T in transforms]),
    )

    labels2, invdepth2 = _render_frame2(planes, blobs, field, K, xg, yg, xn, yn)

    T_px = field[labels1]
    analytic_target, ok_t = camera.map_pixel_masked(camera.augmented_grid(invdepth1), T_px, K)

    # depth measurement: bilinear sample of the rendered grid, trusted only
    # where the whole 2x2 footprint lies on the source pixel's own layer
    d_meas = np.zeros((h, w))
    meas_ok = np.zeros((h, w), dtype=bool)
    px, py = analytic_target[..., 0], analytic_target[..., 1]
    for k in range(K_obj):
        vals, ok_k = camera.bilinear_sample(invdepth2.d, labels2 == k, px, py)
        mine = (labels1 == k) & ok_k
        d_meas[mine] = vals[mine]
        meas_ok |= mine
    meas_ok &= ok_t

    x0 = np.floor(px).astype(int)
    y0 = np.floor(py).astype(int)
    in_frame = (x0 >= 0) & (y0 >= 0) & (x0 + 1 <= w - 1) & (y0 + 1 <= h - 1)
    occluded = ok_t & in_frame & ~meas_ok

    measured_target = analytic_target.copy()
    measured_target[..., 2] = np.where(meas_ok, d_meas, 0.0)

    return Scene(
        spec=spec,
        seed=seed,
        twists=twists,
        transforms=field,
        labels1=labels1,
        invdepth1=invdepth1,
        labels2=labels2,
        invdepth2=invdepth2,
        analytic_target=analytic_target,
        measured_target=measured_target,
        meas_ok=meas_ok,
        occluded=occluded,
    )


def oracle_revisions(scene: Scene, T: Se3, config: OracleConfig = OracleConfig(), iteration: int = 0):
    """Revision bundle steering the solver toward the measured targets.

    r is the gap between the (optionally noisy) measured target and the
    current field's reprojection; confidence is 1 on trusted measurements and
    0 elsewhere. Noise draws are keyed by (scene seed, purpose, iteration).
    """
    h, w = scene.shape
    grid = camera.augmented_grid(scene.invdepth1)
    cur, ok_cur = camera.map_pixel_masked(grid, T, scene.intrinsics)
    target = scene.measured_target
    if config.flow_noise > 0.0:
        noise = scene_rng(scene.seed, "flow-noise", iteration).standard_normal((h, w, 2))
        target = target.copy()
        target[..., :2] += config.flow_noise * noise
    if config.depth_noise > 0.0:
        noise = scene_rng(scene.seed, "depth-noise", iteration).standard_normal((h, w))
        target = target.copy() if target is scene.measured_target else target
        target[..., 2] += config.depth_noise * noise
    mask = scene.meas_ok & ok_cur
    r = np.where(mask[..., None], target - cur, 0.0)
    wgt = np.where(mask[..., None], 1.0, 0.0) * np.ones((h, w, 3))
    return RevisionBundle(r, wgt)


def embedding_anchors(num_objects: int) -> np.ndarray:
    """Well-separated anchor vectors, one per component: +-4 along basis axes."""
    dim = max(1, (num_objects + 1) // 2)
    anchors = np.zeros((num_objects, dim))
    for k in range(num_objects):
        anchors[k, k // 2] = 4.0 if k % 2 == 0 else -4.0
    return anchors


def oracle_embeddings(scene: Scene, config: OracleConfig = OracleConfig()):
    """Per-pixel embeddings clustered at the layer anchors."""
    anchors = embedding_anchors(scene.spec.num_objects)
    emb = anchors[scene.labels1]
    if config.embedding_noise > 0.0:
        rng = scene_rng(scene.seed, "embedding-noise")
        emb = emb + config.embedding_noise * rng.standard_normal(emb.shape)
    return emb


def oracle_edge_weights(scene: Scene, config: OracleConfig = OracleConfig()) -> EdgeWeights:
    """Interior-weighted grid edges, cut to zero across layer boundaries."""
    lab = scene.labels1
    wx = np.where(lab[:, 1:] == lab[:, :-1], config.edge_interior_weight, 0.0)
    wy = np.where(lab[1:, :] == lab[:-1, :], config.edge_interior_weight, 0.0)
    return EdgeWeights(wx, wy)
