import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import orthonormal
from pudle.datagen import make_problem
from pudle.encoder import (EncoderConfig, LambdaSchedule, NonConverged, StepSizeWarning, encode,
                           hard_threshold, ista_step, kkt_residual, lasso_objective, soft_threshold,
                           solve_lasso)
from pudle.metrics import spectral_norm

finite = st.floats(-1e3, 1e3, allow_nan=False)


class TestThresholds:
    @pytest.mark.parametrize("v,b,out", [(1.2, 0.5, 0.7), (-0.3, 0.5, 0.0), (-1.0, 0.5, -0.5)])
    def test_soft(self, v, b, out):
        assert soft_threshold(v, b) == pytest.approx(out, abs=1e-15)

    @pytest.mark.parametrize("v,b,out", [(0.05, 0.05, 0.05), (-0.04, 0.05, 0.0), (3.0, 0.05, 3.0)])
    def test_hard(self, v, b, out):
        assert hard_threshold(v, b) == out

    def test_soft_tie_is_zero(self):
        assert soft_threshold(0.5, 0.5) == 0.0

    @given(v=finite, b=st.floats(0, 1e3), c=st.floats(1e-3, 1e3))
    def test_soft_scale_covariance(self, v, b, c):
        assert soft_threshold(c * v, c * b) == pytest.approx(c * soft_threshold(v, b),
                                                             rel=1e-12, abs=1e-9)

    @given(v=finite, b=st.floats(0, 1e3))
    def test_soft_shrinks(self, v, b):
        out = float(soft_threshold(v, b))
        assert abs(out) <= abs(v) and (out == 0 or np.sign(out) == np.sign(v))


class TestSchedule:
    def test_geometric_nu_one_is_fixed(self, small_problem):
        d = small_problem.d_star
        cfg = EncoderConfig(20, 0.2, schedule=LambdaSchedule.fixed(0.1))
        a = encode(small_problem.x, d, cfg)
        b = encode(small_problem.x, d, cfg.with_(schedule=LambdaSchedule.geometric(0.1, 1.0)))
        assert a.states.tobytes() == b.states.tobytes()

    def test_geometric_values(self):
        s = LambdaSchedule.geometric(0.2, 0.5)
        np.testing.assert_allclose(s.values(3, np.zeros((2, 4))), 0.2 * 0.125)

    def test_oracle_values(self):
        s = LambdaSchedule.oracle(a_gamma=0.1, mu=2.0)
        z_star = np.array([[1.0], [-2.0]])
        z = np.array([[0.5], [0.0]])
        np.testing.assert_allclose(s.values(1, z, z_star, m=4), 2.0 / 2.0 * 2.5 + 0.1)

    def test_oracle_requires_truth(self):
        with pytest.raises(ValueError):
            LambdaSchedule.oracle(0.1, 1.0).values(1, np.zeros((2, 1)))

    def test_oracle_lam0(self):
        s = LambdaSchedule.oracle(0.1, 1.0, lam0=0.7)
        np.testing.assert_allclose(s.values(0, np.zeros((2, 3))), 0.7)

    @pytest.mark.parametrize("kw", [dict(lam=-1.0), dict(nu=0.0), dict(nu=1.5)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            LambdaSchedule("geometric", **kw)


class TestIstaStep:
    def test_identity_dictionary(self, rng):
        x = rng.standard_normal(6)
        out = ista_step(np.zeros(6), np.eye(6), x, 1.0, 0.5)
        np.testing.assert_allclose(out, soft_threshold(x, 0.5))

    def test_fixed_point(self, small_problem):
        d = small_problem.d_star
        x = small_problem.x[:, 0]
        lam = 0.2
        z_hat = solve_lasso(x, d, lam, tol=1e-13)
        alpha = 0.9 / spectral_norm(d) ** 2
        np.testing.assert_allclose(ista_step(z_hat, d, x, alpha, lam), z_hat, atol=1e-10)

    def test_large_lambda_zero(self, small_problem):
        d, x = small_problem.d_star, small_problem.x[:, 0]
        lam = np.abs(d.T @ x).max()
        assert not np.any(ista_step(np.zeros(20), d, x, 1.0, lam))

    def test_hard_uses_raw_threshold(self):
        out = ista_step(np.zeros(2), np.eye(2), np.array([0.3, 0.1]), 0.5, 0.12, "hard")
        np.testing.assert_allclose(out, [0.15, 0.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ista_step(np.zeros(3), np.eye(2), np.ones(2), 0.1, 0.1)


class TestEncode:
    def test_orthonormal_one_step(self, rng):
        d = orthonormal(8, 1)
        x = rng.standard_normal((8, 5))
        traj = encode(x, d, EncoderConfig(6, 1.0, schedule=LambdaSchedule.fixed(0.3)), check_step=False)
        z1 = soft_threshold(d.T @ x, 0.3)
        for t in range(1, 7):
            np.testing.assert_allclose(traj.states[t], z1, atol=1e-14)

    def test_t1_is_one_step(self, small_problem):
        d, x = small_problem.d_star, small_problem.x
        cfg = EncoderConfig(1, 0.2, schedule=LambdaSchedule.fixed(0.2))
        np.testing.assert_array_equal(encode(x, d, cfg).z_T, ista_step(np.zeros((20, 30)), d, x, 0.2, 0.2))

    def test_trajectory_fields(self, small_problem):
        cfg = EncoderConfig(5, 0.2, schedule=LambdaSchedule.fixed(0.2))
        traj = encode(small_problem.x, small_problem.d_star, cfg)
        assert traj.states.shape == (6, 20, 30) and traj.T == 5
        assert not np.any(traj.states[0])
        for t, s in enumerate(traj.supports(sample=3)):
            np.testing.assert_array_equal(s, np.flatnonzero(traj.states[t][:, 3]))
        np.testing.assert_array_equal(traj.masks[2], traj.states[3] != 0)
        assert np.all(traj.margins >= 0)
        np.testing.assert_allclose(traj.thresholds, 0.2 * 0.2)

    def test_z0(self, small_problem):
        z0 = np.ones(20)
        cfg = EncoderConfig(2, 0.2, schedule=LambdaSchedule.fixed(0.2), z0=z0)
        traj = encode(small_problem.x[:, 0], small_problem.d_star, cfg)
        np.testing.assert_array_equal(traj.states[0][:, 0], z0)
        assert traj.z_T.shape == (20,)

    def test_batch_equals_sequential(self, small_problem):
        cfg = EncoderConfig(30, 0.2, schedule=LambdaSchedule.fixed(0.2))
        d = small_problem.d_star
        full = encode(small_problem.x, d, cfg)
        for i in (0, 7, 29):
            one = encode(small_problem.x[:, i], d, cfg)
            np.testing.assert_allclose(one.z_T, full.z_T[:, i], rtol=1e-13, atol=1e-15)

    def test_step_size_warning_and_strict(self, small_problem):
        d = small_problem.d_star
        cfg = EncoderConfig(2, 10.0, schedule=LambdaSchedule.fixed(0.2))
        with pytest.warns(StepSizeWarning):
            encode(small_problem.x, d, cfg)
        with pytest.raises(ValueError):
            encode(small_problem.x, d, cfg.with_(strict=True))

    def test_non_finite_names_layer(self):
        d = np.array([[1e200, 0.0], [0.0, 1.0]])
        cfg = EncoderConfig(5, 1.0, schedule=LambdaSchedule.fixed(0.0))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(FloatingPointError, match="layer"):
                encode(np.array([1e200, 1.0]), d, cfg)

    def test_majorization_descent(self):
        pr = make_problem(50, 100, 40, 5, seed=3)
        lam = 0.2
        cfg = EncoderConfig(200, 0.2, schedule=LambdaSchedule.fixed(lam))
        traj = encode(pr.x, pr.d_star, cfg)
        f = np.array([lasso_objective(pr.x, pr.d_star, traj.states[t], lam) for t in range(201)])
        assert np.all(np.diff(f, axis=0) <= 1e-12 * np.abs(f[:-1]))

    def test_monotone_after_support_selection(self):
        pr = make_problem(50, 100, 20, 5, seed=4)
        d = pr.d_star
        z_hat = solve_lasso(pr.x, d, 0.2, tol=1e-12)
        traj = encode(pr.x, d, EncoderConfig(200, 0.2, schedule=LambdaSchedule.fixed(0.2)),
                      check_step=False)
        err = np.linalg.norm(traj.states - z_hat[None], axis=1)
        supp = traj.states != 0
        for i in range(20):
            same = np.all(supp[:, :, i] == supp[-1, :, i], axis=1)
            B = int(np.flatnonzero(~same)[-1] + 1) if (~same).any() else 0
            tail = err[B:, i]
            tail = tail[tail > 1e-13]
            assert np.all(np.diff(tail) <= 1e-12)
            if tail.size > 2:
                assert np.max(tail[1:] / tail[:-1]) < 1


class TestLasso:
    def test_orthonormal_closed_form(self, rng):
        d = orthonormal(10, 2)
        x = rng.standard_normal((10, 4))
        np.testing.assert_allclose(solve_lasso(x, d, 0.3, tol=1e-12), soft_threshold(d.T @ x, 0.3),
                                   atol=1e-12)

    def test_large_lambda(self, small_problem):
        x = small_problem.x[:, 0]
        lam = np.abs(small_problem.d_star.T @ x).max()
        assert not np.any(solve_lasso(x, small_problem.d_star, lam))

    def test_kkt(self, small_problem):
        z = solve_lasso(small_problem.x, small_problem.d_star, 0.1, tol=1e-11)
        assert np.all(kkt_residual(z, small_problem.x, small_problem.d_star, 0.1) <= 1e-11)

    def test_random_probe_minimality(self):
        rng = np.random.default_rng(5)
        d = rng.standard_normal((10, 20))
        x = rng.standard_normal(10)
        lam = 0.3
        z_hat = solve_lasso(x, d, lam, tol=1e-12)
        f_hat = lasso_objective(x, d, z_hat, lam)
        cands = np.zeros((20, 10_000))
        for k in range(10_000):
            idx = rng.choice(20, rng.integers(1, 6), replace=False)
            cands[idx, k] = rng.standard_normal(idx.size)
        cands[:, :5000] += z_hat[:, None]
        assert np.all(f_hat <= lasso_objective(x, d, cands, lam) + 1e-10)

    def test_non_converged(self, small_problem):
        with pytest.raises(NonConverged) as exc:
            solve_lasso(small_problem.x, small_problem.d_star, 0.01, tol=1e-16, max_iter=50)
        assert exc.value.residual > 0

    def test_bad_tol(self):
        with pytest.raises(ValueError):
            solve_lasso(np.ones(2), np.eye(2), 0.1, tol=0)


class TestKKT:
    def test_exact_orthonormal(self, rng):
        d = orthonormal(6, 3)
        x = rng.standard_normal(6)
        z = soft_threshold(d.T @ x, 0.2)
        assert kkt_residual(z, x, d, 0.2) <= 1e-12

    def test_zero_large_lambda(self, rng):
        d = rng.standard_normal((5, 7))
        x = rng.standard_normal(5)
        assert kkt_residual(np.zeros(7), x, d, np.abs(d.T @ x).max()) == 0.0

    def test_perturbed(self, small_problem):
        x, d = small_problem.x[:, 0], small_problem.d_star
        z = solve_lasso(x, d, 0.2, tol=1e-13)
        zp = z.copy()
        zp[np.flatnonzero(z)[0]] += 1e-3
        assert kkt_residual(zp, x, d, 0.2) > 1e-5


class TestObjective:
    def test_zero_code(self, rng):
        x = rng.standard_normal(4)
        assert lasso_objective(x, np.eye(4), np.zeros(4), 1.0) == pytest.approx(0.5 * x @ x)

    def test_exact_fit(self, rng):
        d = rng.standard_normal((4, 6))
        z = rng.standard_normal(6)
        assert lasso_objective(d @ z, d, z, 0.0) == pytest.approx(0.0, abs=1e-20)
