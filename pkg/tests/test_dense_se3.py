import numpy as np
import pytest

from se3flow import camera, dense_se3, se3
from se3flow.camera import EPS_Z, InverseDepthMap, PinholeIntrinsics
from se3flow.dense_se3 import (
    Neighborhood,
    NormalSystem6,
    RevisionBundle,
    affinity,
    build_normal_equations,
    dense_se3_step,
    linear_solve_adjoint,
    residual,
    solve_damped,
)
from se3flow.errors import FactorizationFailure
from conftest import random_twists


# ---------------------------------------------------------------------------
# Brute-force oracle: materialize each pixel's full stacked Jacobian and form
# H = J^T diag(w) J, b = J^T diag(w) r with dense products. Written before the
# kernel and kept dumb on purpose.
# ---------------------------------------------------------------------------

def oracle_normal_equations(T, emb, rev, z1, K, nbhd):
    h, w = z1.shape
    offs = nbhd.offsets()
    Hm = np.zeros((h, w, 6, 6))
    bv = np.zeros((h, w, 6))
    ws = np.zeros((h, w))
    obj = np.zeros((h, w))
    for iy in range(h):
        for ix in range(w):
            Ti = T[iy, ix]
            rows_J, rows_w, rows_r = [], [], []
            for dy in offs:
                jy = iy + dy
                if not 0 <= jy < h:
                    continue
                for dx in offs:
                    jx = ix + dx
                    if not 0 <= jx < w:
                        continue
                    if not z1.valid[jy, jx] or z1.d[jy, jx] <= 0.0:
                        continue
                    pix_j = np.array([float(jx), float(jy), z1.d[jy, jx]])
                    Xj = camera.backproject(pix_j, K)
                    Yj = T[jy, jx].act(Xj)
                    if Yj[2] <= EPS_Z:
                        continue
                    tgt = camera.project(Yj, K) + rev.r[jy, jx]
                    Xp = Ti.act(Xj)
                    if Xp[2] <= EPS_Z:
                        continue
                    pred = camera.project(Xp, K)
                    a = affinity(emb[iy, ix], emb[jy, jx])
                    J = camera.projection_jacobian(Xp, K) @ camera.transform_jacobian(Xp)
                    rows_J.append(J)
                    rows_w.append(a * rev.w[jy, jx])
                    rows_r.append(tgt - pred)
            if rows_J:
                J = np.concatenate(rows_J, axis=0)
                wv = np.concatenate(rows_w, axis=0)
                rv = np.concatenate(rows_r, axis=0)
                Hm[iy, ix] = J.T @ (wv[:, None] * J)
                bv[iy, ix] = J.T @ (wv * rv)
                ws[iy, ix] = wv.sum()
                obj[iy, ix] = float(wv @ (rv * rv))
    return Hm, bv, ws, obj


def random_problem(rng, h, w, nc=3, invalid_frac=0.05, zero_conf_frac=0.1):
    """Random field/embeddings/revisions/depths with sane normalized coords."""
    K = PinholeIntrinsics(
        rng.uniform(0.35, 0.6) * w, rng.uniform(0.35, 0.6) * h,
        (w - 1) / 2.0 + rng.uniform(-0.5, 0.5), (h - 1) / 2.0 + rng.uniform(-0.5, 0.5),
    )
    T = se3.exp(0.05 * rng.standard_normal((h, w, 6)))
    d = rng.uniform(0.5, 2.0, size=(h, w))
    valid = rng.uniform(size=(h, w)) > invalid_frac
    z1 = InverseDepthMap(d, valid)
    emb = rng.standard_normal((h, w, nc))
    r = 0.1 * rng.standard_normal((h, w, 3))
    wgt = rng.uniform(0.0, 1.0, size=(h, w, 3))
    wgt[rng.uniform(size=(h, w)) < zero_conf_frac] = 0.0
    rev = RevisionBundle(r, wgt)
    return T, emb, rev, z1, K


class TestAffinity:
    def test_identical_is_one_exactly(self, rng):
        v = rng.standard_normal(8)
        assert affinity(v, v) == 1.0

    def test_ln3_gap_is_half(self):
        vi = np.zeros(2)
        vj = np.array([np.sqrt(np.log(3.0)), 0.0])
        assert abs(affinity(vi, vj) - 0.5) < 1e-12

    def test_far_apart_underflows(self):
        vi = np.zeros(1)
        vj = np.array([np.sqrt(50.0)])
        a = affinity(vi, vj)
        assert 0.0 <= a < 1e-20

    def test_symmetric_and_bounded(self, rng):
        vi = rng.standard_normal((100, 4))
        vj = rng.standard_normal((100, 4))
        a = affinity(vi, vj)
        assert np.array_equal(a, affinity(vj, vi))
        assert np.all((a > 0.0) & (a <= 1.0))


class TestResidual:
    def test_same_transform_zero_revision(self, rng):
        T, emb, rev, z1, K = random_problem(rng, 4, 4, invalid_frac=0.0)
        uniform = se3.exp(np.broadcast_to(0.05 * rng.standard_normal(6), (4, 4, 6)).copy())
        rev0 = RevisionBundle(np.zeros((4, 4, 3)), np.ones((4, 4, 3)))
        r, ok = residual((1, 1), (2, 3), uniform, rev0, z1, K)
        assert ok
        assert np.max(np.abs(r)) < 1e-12

    def test_identity_vs_moved_equals_target_flow(self, rng):
        # T_i = identity, T_j = GT, r_j = 0: residual is where j's point went
        h, w = 4, 4
        _, emb, _, z1, K = random_problem(rng, h, w, invalid_frac=0.0)
        T_gt = se3.exp(np.broadcast_to(np.array([0.02, -0.01, 0.03, 0.01, 0.005, -0.02]), (h, w, 6)).copy())
        field = se3.Se3.identity((h, w))
        field.quat[2, 2] = T_gt.quat[2, 2]
        field.t[2, 2] = T_gt.t[2, 2]
        rev0 = RevisionBundle(np.zeros((h, w, 3)), np.ones((h, w, 3)))
        r, ok = residual((1, 1), (2, 2), field, rev0, z1, K)
        assert ok
        pix_j = np.array([2.0, 2.0, z1.d[2, 2]])
        expect = camera.map_pixel(pix_j, T_gt[2, 2], K) - pix_j
        assert np.allclose(r, expect, atol=1e-12)

    def test_invalid_depth_flagged(self, rng):
        T, emb, rev, z1, K = random_problem(rng, 4, 4)
        z1.valid[1, 2] = False
        _, ok = residual((0, 0), (1, 2), T, rev, z1, K)
        assert not ok


class TestNeighborhood:
    def test_offsets_stride_one(self):
        assert Neighborhood(2, 1).offsets().tolist() == [-2, -1, 0, 1, 2]

    def test_offsets_strided(self):
        assert Neighborhood(3, 2).offsets().tolist() == [-2, 0, 2]
        assert Neighborhood(1, 2).offsets().tolist() == [0]

    def test_validation(self):
        with pytest.raises(ValueError):
            Neighborhood(0)
        with pytest.raises(ValueError):
            Neighborhood(2, 0)


class TestBuildNormalEquations:
    @staticmethod
    def assert_oracle_match(sys, Ho, bo, wo, oo, tol=1e-10):
        for got, ref in ((sys.H, Ho), (sys.b, bo), (sys.weight, wo), (sys.objective, oo)):
            scale = max(1.0, np.max(np.abs(ref)))
            assert np.max(np.abs(got - ref)) / scale < tol

    def test_matches_brute_force_8x8(self, rng):
        T, emb, rev, z1, K = random_problem(rng, 8, 8)
        nbhd = Neighborhood(3)
        sys = build_normal_equations(T, emb, rev, z1, K, nbhd)
        self.assert_oracle_match(sys, *oracle_normal_equations(T, emb, rev, z1, K, nbhd))

    def test_matches_brute_force_16x16_strided(self, rng):
        T, emb, rev, z1, K = random_problem(rng, 16, 16, nc=4)
        nbhd = Neighborhood(4, 2)
        sys = build_normal_equations(T, emb, rev, z1, K, nbhd)
        self.assert_oracle_match(sys, *oracle_normal_equations(T, emb, rev, z1, K, nbhd))

    def test_matches_brute_force_full_coverage(self, rng):
        # radius larger than the grid: every pixel sees every other pixel
        T, emb, rev, z1, K = random_problem(rng, 8, 8, nc=2)
        nbhd = Neighborhood(10)
        sys = build_normal_equations(T, emb, rev, z1, K, nbhd)
        self.assert_oracle_match(sys, *oracle_normal_equations(T, emb, rev, z1, K, nbhd))

    def test_zero_confidence_gives_empty_system(self, rng):
        T, emb, rev, z1, K = random_problem(rng, 6, 6)
        rev = RevisionBundle(rev.r, np.zeros_like(rev.w))
        sys = build_normal_equations(T, emb, rev, z1, K, Neighborhood(2))
        assert np.array_equal(sys.H, np.zeros_like(sys.H))
        assert np.array_equal(sys.b, np.zeros_like(sys.b))
        assert np.array_equal(sys.weight, np.zeros_like(sys.weight))

    def test_self_only_neighborhood_is_single_term(self, rng):
        # offsets [0] so only j = i contributes, with a_ii = 1
        T, emb, rev, z1, K = random_problem(rng, 5, 5, invalid_frac=0.0, zero_conf_frac=0.0)
        sys = build_normal_equations(T, emb, rev, z1, K, Neighborhood(1, 2))
        iy, ix = 2, 3
        pix = np.array([float(ix), float(iy), z1.d[iy, ix]])
        Xp = T[iy, ix].act(camera.backproject(pix, K))
        J = camera.projection_jacobian(Xp, K) @ camera.transform_jacobian(Xp)
        wv = rev.w[iy, ix]
        H_ref = J.T @ (wv[:, None] * J)
        scale = max(1.0, np.max(np.abs(H_ref)))
        assert np.max(np.abs(sys.H[iy, ix] - H_ref)) / scale < 1e-12
        assert abs(sys.weight[iy, ix] - wv.sum()) < 1e-12

    def test_deterministic_rerun(self, rng):
        T, emb, rev, z1, K = random_problem(rng, 8, 8)
        s1 = build_normal_equations(T, emb, rev, z1, K, Neighborhood(3))
        s2 = build_normal_equations(T, emb, rev, z1, K, Neighborhood(3))
        assert np.array_equal(s1.H, s2.H)
        assert np.array_equal(s1.b, s2.b)
        assert np.array_equal(s1.weight, s2.weight)
        assert np.array_equal(s1.objective, s2.objective)

    def test_quadratic_model_decrease(self, rng):
        # the damped step never increases the local quadratic model
        T, emb, rev, z1, K = random_problem(rng, 6, 6, invalid_frac=0.0, zero_conf_frac=0.0)
        nbhd = Neighborhood(2)
        sys = build_normal_equations(T, emb, rev, z1, K, nbhd)
        delta, unconstrained, failed = solve_damped(sys)
        assert not failed.any()
        # evaluate || r - J delta ||^2_w per pixel via the oracle's stacked rows
        h, w = z1.shape
        offs = nbhd.offsets()
        for iy in range(h):
            for ix in range(w):
                rows_J, rows_w, rows_r = [], [], []
                Ti = T[iy, ix]
                for dy in offs:
                    jy = iy + dy
                    if not 0 <= jy < h:
                        continue
                    for dx in offs:
                        jx = ix + dx
                        if not 0 <= jx < w:
                            continue
                        pix_j = np.array([float(jx), float(jy), z1.d[jy, jx]])
                        Xj = camera.backproject(pix_j, K)
                        Yj = T[jy, jx].act(Xj)
                        Xp = Ti.act(Xj)
                        if Yj[2] <= EPS_Z or Xp[2] <= EPS_Z:
                            continue
                        tgt = camera.project(Yj, K) + rev.r[jy, jx]
                        a = affinity(emb[iy, ix], emb[jy, jx])
                        J = camera.projection_jacobian(Xp, K) @ camera.transform_jacobian(Xp)
                        rows_J.append(J)
                        rows_w.append(a * rev.w[jy, jx])
                        rows_r.append(tgt - camera.project(Xp, K))
                J = np.concatenate(rows_J, axis=0)
                wv = np.concatenate(rows_w, axis=0)
                rv = np.concatenate(rows_r, axis=0)
                before = wv @ (rv * rv)
                lin = rv - J @ delta[iy, ix]
                after = wv @ (lin * lin)
                assert after <= before + 1e-9 * max(1.0, before)


class TestSolveDamped:
    def random_spd(self, rng, n=6):
        Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        lam = rng.uniform(0.5, 3.0, size=n)
        return (Q * lam) @ Q.T

    def test_matches_explicit_inverse(self, rng):
        for _ in range(50):
            Hm = self.random_spd(rng)
            b = rng.standard_normal(6)
            sys = NormalSystem6(Hm, b, np.array(1.0), np.array(0.0))
            delta, unconstrained, failed = solve_damped(sys, lam=0.0, lam_abs=0.0)
            assert not unconstrained and not failed
            assert np.max(np.abs(delta - np.linalg.inv(Hm) @ b)) < 1e-10

    def test_damping_formula(self, rng):
        Hm = self.random_spd(rng)
        b = rng.standard_normal(6)
        lam, lam_abs = 0.05, 1e-3
        sys = NormalSystem6(Hm, b, np.array(1.0), np.array(0.0))
        delta, _, _ = solve_damped(sys, lam=lam, lam_abs=lam_abs)
        ref = np.linalg.solve(Hm + lam * np.diag(np.diag(Hm)) + lam_abs * np.eye(6), b)
        assert np.max(np.abs(delta - ref)) < 1e-12

    def test_large_damping_shrinks_step(self, rng):
        Hm = self.random_spd(rng)
        b = rng.standard_normal(6)
        sys = NormalSystem6(Hm, b, np.array(1.0), np.array(0.0))
        d0, _, _ = solve_damped(sys, lam=0.0, lam_abs=0.0)
        d9, _, _ = solve_damped(sys, lam=1e9, lam_abs=0.0)
        assert np.linalg.norm(d9) < 1e-6 * np.linalg.norm(d0)

    def test_unconstrained_flagged_and_zero(self):
        Hm = np.zeros((2, 6, 6))
        b = np.zeros((2, 6))
        sys = NormalSystem6(Hm, b, np.array([0.0, 0.0]), np.zeros(2))
        delta, unconstrained, failed = solve_damped(sys)
        assert unconstrained.all() and not failed.any()
        assert np.array_equal(delta, np.zeros((2, 6)))

    def test_batched_equals_loop(self, rng):
        Hm = np.stack([self.random_spd(rng) for _ in range(10)])
        b = rng.standard_normal((10, 6))
        sys = NormalSystem6(Hm, b, np.ones(10), np.zeros(10))
        batch, _, _ = solve_damped(sys, lam=0.01)
        for k in range(10):
            one, _, _ = solve_damped(NormalSystem6(Hm[k], b[k], np.array(1.0), np.array(0.0)), lam=0.01)
            assert np.array_equal(batch[k], one)


class TestDenseSe3Step:
    def test_uniform_field_zero_revision_fixed_point(self, rng):
        # consistent field, exact targets: b = 0 so the field is unchanged bitwise
        h, w = 6, 6
        _, emb, _, z1, K = random_problem(rng, h, w, invalid_frac=0.0)
        xi = 0.05 * rng.standard_normal(6)
        T = se3.exp(np.broadcast_to(xi, (h, w, 6)).copy())
        rev = RevisionBundle(np.zeros((h, w, 3)), np.ones((h, w, 3)))
        emb0 = np.zeros((h, w, 2))
        T2, info = dense_se3_step(T, emb0, rev, z1, K, Neighborhood(2))
        assert np.array_equal(T2.quat, T.quat)
        assert np.array_equal(T2.t, T.t)
        assert np.max(np.abs(info.delta)) == 0.0

    def test_all_zero_confidence_freezes_field(self, rng):
        h, w = 5, 5
        T, emb, rev, z1, K = random_problem(rng, h, w)
        rev = RevisionBundle(rev.r, np.zeros((h, w, 3)))
        T2, info = dense_se3_step(T, emb, rev, z1, K, Neighborhood(2))
        assert info.unconstrained.all()
        assert np.array_equal(T2.quat, T.quat)
        assert np.array_equal(T2.t, T.t)

    def test_two_object_recovery(self, rng):
        # two rigid regions with separated embeddings: 8 sweeps recover GT
        h, w = 24, 32
        K = PinholeIntrinsics(30.0, 30.0, (w - 1) / 2.0, (h - 1) / 2.0)
        x, y = camera.pixel_grid(h, w)
        d = 0.3 + 0.15 * (x / w) + 0.1 * (y / h)
        z1 = InverseDepthMap(d)
        labels = (x >= w // 2).astype(int)
        xi_a = np.array([0.02, -0.01, 0.03, 0.01, -0.02, 0.015])
        xi_b = np.array([-0.03, 0.02, 0.01, -0.01, 0.005, -0.02])
        xi_gt = np.where(labels[..., None] == 0, xi_a, xi_b)
        T_gt = se3.exp(xi_gt)
        emb = np.where(labels[..., None] == 0, 4.0, -4.0) * np.ones((h, w, 1))
        emb = np.concatenate([emb, np.zeros((h, w, 3))], axis=-1)

        pix = camera.augmented_grid(z1)
        gt_target = camera.map_pixel(pix, T_gt, K)

        # light damping so the near-degenerate planar-patch directions at the
        # image border converge at the Gauss-Newton rate too
        T = se3.Se3.identity((h, w))
        prev_obj = None
        for _ in range(8):
            cur, ok = camera.map_pixel_masked(pix, T, K)
            r = np.where(ok[..., None], gt_target - cur, 0.0)
            rev = RevisionBundle(r, np.where(ok[..., None], 1.0, 0.0) * np.ones((h, w, 3)))
            T, info = dense_se3_step(T, emb, rev, z1, K, Neighborhood(6), lam=1e-8, lam_abs=1e-12)
            if prev_obj is not None:
                # monotone until the objective bottoms out at rounding noise
                assert info.total_objective <= prev_obj * 1.0001 + 1e-18
            prev_obj = info.total_objective
        gap = se3.distance(T, T_gt)
        assert np.max(gap) < 1e-6
        # recovered twists are piecewise constant per region
        tw = se3.log(T)
        assert np.max(np.var(tw[labels == 0], axis=0)) < 1e-12
        assert np.max(np.var(tw[labels == 1], axis=0)) < 1e-12


class TestLinearSolveAdjoint:
    def test_matches_finite_differences(self, rng):
        n = 6
        A = rng.standard_normal((n, n))
        Hm = A @ A.T + n * np.eye(n)
        b = rng.standard_normal(n)
        g = rng.standard_normal(n)
        u_star = np.linalg.solve(Hm, b)
        grad_b, grad_H = linear_solve_adjoint(Hm, u_star, g)

        def loss(Hx, bx):
            return g @ np.linalg.solve(Hx, bx)

        eps = 1e-6
        for k in range(n):
            e = np.zeros(n)
            e[k] = eps
            fd = (loss(Hm, b + e) - loss(Hm, b - e)) / (2 * eps)
            assert abs(fd - grad_b[k]) < 1e-5 * max(1.0, abs(fd))
        for m in range(n):
            for nn in range(n):
                E = np.zeros((n, n))
                E[m, nn] = eps
                fd = (loss(Hm + E, b) - loss(Hm - E, b)) / (2 * eps)
                assert abs(fd - grad_H[m, nn]) < 1e-5 * max(1.0, abs(fd))

    def test_not_spd_raises(self):
        with pytest.raises(FactorizationFailure):
            linear_solve_adjoint(-np.eye(3), np.ones(3), np.ones(3))
