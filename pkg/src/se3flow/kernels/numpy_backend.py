"""Vectorized fallback for the normal-equation assembly kernel.

Loops over neighbourhood offsets (ascending row-major, so every pixel sees its
neighbours in a fixed order) and processes all pixels of one offset at once.
Working memory is a fixed number of (H, W) temporaries per offset, independent
of neighbourhood size.

Targets are rebuilt here from the field itself, through the same expression
forms as the per-pair predictions: when T_i equals T_j the two projections
cancel bitwise, so a self-consistent field with zero revisions yields b == 0
exactly and the solver leaves it untouched.
"""

import numpy as np


def assemble_normal_equations(rot, trans, points, ok, revisions, weights, emb, fx, fy, cx, cy, offs, eps_z):
    """Accumulate per-pixel 6x6 Gauss-Newton systems.

    rot: (H,W,3,3) rotation of each pixel's current transform
    trans: (H,W,3); points: (H,W,3) backprojected frame-1 points
    ok: (H,W) uint8, source point valid
    revisions: (H,W,3) additive corrections to each pixel's reprojection
    weights: (H,W,3) per-component confidences
    emb: (H,W,C) embeddings; offs: sorted int offsets (both axes)

    Returns (H6 (H,W,6,6), b (H,W,6), wsum (H,W), obj (H,W)).
    """
    h, w, _ = emb.shape
    Hm = np.zeros((h, w, 6, 6))
    bv = np.zeros((h, w, 6))
    wsum = np.zeros((h, w))
    obj = np.zeros((h, w))

    Y = np.einsum("...mn,...n->...m", rot, points) + trans
    tz_ok = Y[..., 2] > eps_z
    dt = 1.0 / np.where(tz_ok, Y[..., 2], 1.0)
    ut = Y[..., 0] * dt
    vt = Y[..., 1] * dt
    targets = np.stack([fx * ut + cx, fy * vt + cy, dt], axis=-1) + revisions
    okb = ok.astype(bool) & tz_ok

    for dy in offs:
        iy0, iy1 = max(0, -dy), h - max(0, dy)
        if iy0 >= iy1:
            continue
        for dx in offs:
            ix0, ix1 = max(0, -dx), w - max(0, dx)
            if ix0 >= ix1:
                continue
            isl = (slice(iy0, iy1), slice(ix0, ix1))
            jsl = (slice(iy0 + dy, iy1 + dy), slice(ix0 + dx, ix1 + dx))

            diff = emb[isl] - emb[jsl]
            d2 = np.einsum("...c,...c->...", diff, diff)
            with np.errstate(over="ignore"):
                aff = 2.0 / (1.0 + np.exp(d2))

            Xj = points[jsl]
            Xp = np.einsum("...mn,...n->...m", rot[isl], Xj) + trans[isl]
            zok = Xp[..., 2] > eps_z
            m = okb[jsl] & zok

            d = 1.0 / np.where(zok, Xp[..., 2], 1.0)
            u = Xp[..., 0] * d
            v = Xp[..., 1] * d

            pred = np.stack([fx * u + cx, fy * v + cy, d], axis=-1)
            r = targets[jsl] - pred

            zero = np.zeros_like(d)
            J = np.stack(
                [
                    np.stack([fx * d, zero, -fx * (u * d), -fx * (u * v), fx * (1.0 + u * u), -fx * v], axis=-1),
                    np.stack([zero, fy * d, -fy * (v * d), -fy * (1.0 + v * v), fy * (u * v), fy * u], axis=-1),
                    np.stack([zero, zero, -(d * d), -(v * d), u * d, zero], axis=-1),
                ],
                axis=-2,
            )

            g = np.where(m[..., None], aff[..., None] * weights[jsl], 0.0)
            Hm[isl] += np.einsum("...km,...k,...kn->...mn", J, g, J)
            bv[isl] += np.einsum("...km,...k->...m", J, g * r)
            wsum[isl] += g.sum(axis=-1)
            obj[isl] += np.einsum("...k,...k->...", g, r * r)

    return Hm, bv, wsum, obj
