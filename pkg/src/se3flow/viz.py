"""Image rendering for flow and twist fields.

Flow is painted with the standard 55-color optical-flow wheel (hue encodes
direction, saturation encodes speed); zero motion sits at the wheel centre
and renders mid-gray, colors saturating as magnitude approaches the
normalization radius. Twist fields render as symmetric per-channel maps:
component zero is mid-gray, +/- full scale saturates the channel.
"""

import numpy as np

from . import se3
from .se3 import Se3

_SEGMENTS = ((15, 0, 1), (6, 1, 0), (4, 1, 2), (11, 2, 1), (13, 2, 0), (6, 0, 2))


def color_wheel() -> np.ndarray:
    """(55, 3) float wheel in [0, 1]: RY, YG, GC, CB, BM, MR transitions.

    Each segment holds one channel at 1 while ramping a second; ramp
    direction alternates so consecutive segments join continuously.
    """
    rows = []
    up = True
    for n, hold, ramp in _SEGMENTS:
        seg = np.zeros((n, 3))
        seg[:, hold] = 1.0
        t = np.arange(n) / n
        seg[:, ramp] = t if up else 1.0 - t
        rows.append(seg)
        up = not up
    return np.concatenate(rows, axis=0)


def flow_to_rgb(flow, max_mag=None) -> np.ndarray:
    """Render (H, W, 2+) flow as uint8 RGB; extra channels are ignored.

    max_mag fixes the saturation radius; default is the field's own maximum
    magnitude (a uniform field then renders fully saturated).
    """
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    rad = np.sqrt(u * u + v * v)
    if max_mag is None:
        # floor keeps numerical dust from auto-normalizing to full saturation
        max_mag = max(float(rad.max()), 1e-8)
    if max_mag <= 0.0:
        max_mag = 1.0
    rad = np.minimum(rad / max_mag, 1.0)
    rad[rad < 1e-6] = 0.0  # invisible motion renders as exact wheel-centre gray

    wheel = color_wheel()
    n = len(wheel)
    angle = np.arctan2(-v, -u) / np.pi  # [-1, 1]
    fk = (angle + 1.0) / 2.0 * (n - 1)
    k0 = np.floor(fk).astype(int) % n
    k1 = (k0 + 1) % n
    f = (fk - np.floor(fk))[..., None]
    col = (1.0 - f) * wheel[k0] + f * wheel[k1]
    # blend from mid-gray at zero motion toward the wheel color
    col = 0.5 + rad[..., None] * (col - 0.5)
    return np.round(255.0 * np.clip(col, 0.0, 1.0)).astype(np.uint8)


def vector_channels_to_rgb(field, scale=None) -> np.ndarray:
    """Symmetric 3-channel map: 0 -> mid-gray, +/-scale -> channel extremes."""
    field = np.asarray(field, dtype=np.float64)
    if field.shape[-1] != 3:
        raise ValueError("expected a trailing axis of 3 components")
    if scale is None:
        scale = float(np.abs(field).max())
    if scale <= 0.0:
        scale = 1.0
    col = 0.5 + 0.5 * field / scale
    return np.round(255.0 * np.clip(col, 0.0, 1.0)).astype(np.uint8)


def twist_images(T: Se3, scale=None):
    """(translation_rgb, rotation_rgb) renderings of a transform field."""
    xi = se3.log(T)
    return (
        vector_channels_to_rgb(xi[..., :3], scale),
        vector_channels_to_rgb(xi[..., 3:], scale),
    )
