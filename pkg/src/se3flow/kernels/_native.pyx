# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Scalar assembly kernel for the per-pixel Gauss-Newton systems.

Same contract as kernels.numpy_backend.assemble_normal_equations; see there
for the argument layout. Neighbours are visited in ascending row-major offset
order so accumulation order is fixed. Targets are rebuilt in a prologue using
the same expression forms as the pair predictions, so a self-consistent field
with zero revisions cancels bitwise.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def assemble_normal_equations(
    double[:, :, :, ::1] rot,
    double[:, :, ::1] trans,
    double[:, :, ::1] points,
    unsigned char[:, ::1] ok,
    double[:, :, ::1] revisions,
    double[:, :, ::1] weights,
    double[:, :, ::1] emb,
    double fx, double fy, double cx, double cy,
    cnp.int64_t[::1] offs,
    double eps_z,
):
    cdef Py_ssize_t h = emb.shape[0]
    cdef Py_ssize_t w = emb.shape[1]
    cdef Py_ssize_t nc = emb.shape[2]
    cdef Py_ssize_t noff = offs.shape[0]

    Hm_np = np.zeros((h, w, 6, 6))
    bv_np = np.zeros((h, w, 6))
    wsum_np = np.zeros((h, w))
    obj_np = np.zeros((h, w))
    tgt_np = np.zeros((h, w, 3))
    tok_np = np.zeros((h, w), dtype=np.uint8)
    cdef double[:, :, :, ::1] Hm = Hm_np
    cdef double[:, :, ::1] bv = bv_np
    cdef double[:, ::1] wsum = wsum_np
    cdef double[:, ::1] obj = obj_np
    cdef double[:, :, ::1] tgt = tgt_np
    cdef unsigned char[:, ::1] tok = tok_np

    cdef Py_ssize_t iy, ix, jy, jx, oy, ox, c, m, n, k
    cdef double r00, r01, r02, r10, r11, r12, r20, r21, r22, t0, t1, t2
    cdef double d2, diff, aff, xp, yp, zp, d, u, v
    cdef double r0, r1, r2, g0, g1, g2, q0, q1, q2
    cdef double acc_h[21]
    cdef double acc_b[6]
    cdef double acc_w, acc_o
    cdef double J0[6]
    cdef double J1[6]
    cdef double J2[6]

    with nogil:
        for jy in range(h):
            for jx in range(w):
                if ok[jy, jx] == 0:
                    continue
                r00 = rot[jy, jx, 0, 0]; r01 = rot[jy, jx, 0, 1]; r02 = rot[jy, jx, 0, 2]
                r10 = rot[jy, jx, 1, 0]; r11 = rot[jy, jx, 1, 1]; r12 = rot[jy, jx, 1, 2]
                r20 = rot[jy, jx, 2, 0]; r21 = rot[jy, jx, 2, 1]; r22 = rot[jy, jx, 2, 2]
                t0 = trans[jy, jx, 0]; t1 = trans[jy, jx, 1]; t2 = trans[jy, jx, 2]
                xp = r00 * points[jy, jx, 0] + r01 * points[jy, jx, 1] + r02 * points[jy, jx, 2] + t0
                yp = r10 * points[jy, jx, 0] + r11 * points[jy, jx, 1] + r12 * points[jy, jx, 2] + t1
                zp = r20 * points[jy, jx, 0] + r21 * points[jy, jx, 1] + r22 * points[jy, jx, 2] + t2
                if zp <= eps_z:
                    continue
                d = 1.0 / zp
                u = xp * d
                v = yp * d
                tgt[jy, jx, 0] = (fx * u + cx) + revisions[jy, jx, 0]
                tgt[jy, jx, 1] = (fy * v + cy) + revisions[jy, jx, 1]
                tgt[jy, jx, 2] = d + revisions[jy, jx, 2]
                tok[jy, jx] = 1

        for iy in range(h):
            for ix in range(w):
                r00 = rot[iy, ix, 0, 0]; r01 = rot[iy, ix, 0, 1]; r02 = rot[iy, ix, 0, 2]
                r10 = rot[iy, ix, 1, 0]; r11 = rot[iy, ix, 1, 1]; r12 = rot[iy, ix, 1, 2]
                r20 = rot[iy, ix, 2, 0]; r21 = rot[iy, ix, 2, 1]; r22 = rot[iy, ix, 2, 2]
                t0 = trans[iy, ix, 0]; t1 = trans[iy, ix, 1]; t2 = trans[iy, ix, 2]

                for k in range(21):
                    acc_h[k] = 0.0
                for k in range(6):
                    acc_b[k] = 0.0
                acc_w = 0.0
                acc_o = 0.0

                for oy in range(noff):
                    jy = iy + offs[oy]
                    if jy < 0 or jy >= h:
                        continue
                    for ox in range(noff):
                        jx = ix + offs[ox]
                        if jx < 0 or jx >= w:
                            continue
                        if tok[jy, jx] == 0:
                            continue

                        d2 = 0.0
                        for c in range(nc):
                            diff = emb[iy, ix, c] - emb[jy, jx, c]
                            d2 += diff * diff
                        aff = 2.0 / (1.0 + exp(d2))

                        xp = r00 * points[jy, jx, 0] + r01 * points[jy, jx, 1] + r02 * points[jy, jx, 2] + t0
                        yp = r10 * points[jy, jx, 0] + r11 * points[jy, jx, 1] + r12 * points[jy, jx, 2] + t1
                        zp = r20 * points[jy, jx, 0] + r21 * points[jy, jx, 1] + r22 * points[jy, jx, 2] + t2
                        if zp <= eps_z:
                            continue

                        d = 1.0 / zp
                        u = xp * d
                        v = yp * d

                        r0 = tgt[jy, jx, 0] - (fx * u + cx)
                        r1 = tgt[jy, jx, 1] - (fy * v + cy)
                        r2 = tgt[jy, jx, 2] - d

                        J0[0] = fx * d; J0[1] = 0.0; J0[2] = -fx * (u * d)
                        J0[3] = -fx * (u * v); J0[4] = fx * (1.0 + u * u); J0[5] = -fx * v
                        J1[0] = 0.0; J1[1] = fy * d; J1[2] = -fy * (v * d)
                        J1[3] = -fy * (1.0 + v * v); J1[4] = fy * (u * v); J1[5] = fy * u
                        J2[0] = 0.0; J2[1] = 0.0; J2[2] = -(d * d)
                        J2[3] = -(v * d); J2[4] = u * d; J2[5] = 0.0

                        g0 = aff * weights[jy, jx, 0]
                        g1 = aff * weights[jy, jx, 1]
                        g2 = aff * weights[jy, jx, 2]

                        k = 0
                        for m in range(6):
                            for n in range(m, 6):
                                acc_h[k] += g0 * (J0[m] * J0[n]) + g1 * (J1[m] * J1[n]) + g2 * (J2[m] * J2[n])
                                k += 1
                        q0 = g0 * r0
                        q1 = g1 * r1
                        q2 = g2 * r2
                        for m in range(6):
                            acc_b[m] += q0 * J0[m] + q1 * J1[m] + q2 * J2[m]
                        acc_w += (g0 + g1) + g2
                        acc_o += g0 * (r0 * r0) + g1 * (r1 * r1) + g2 * (r2 * r2)

                k = 0
                for m in range(6):
                    for n in range(m, 6):
                        Hm[iy, ix, m, n] = acc_h[k]
                        Hm[iy, ix, n, m] = acc_h[k]
                        k += 1
                for m in range(6):
                    bv[iy, ix, m] = acc_b[m]
                wsum[iy, ix] = acc_w
                obj[iy, ix] = acc_o

    return Hm_np, bv_np, wsum_np, obj_np
