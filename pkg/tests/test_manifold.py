import numpy as np
import pytest

from quantlio.manifold import (
    BA, BG, ERROR_DIM, GRAV, POS, THETA, VEL,
    ImuSample, NavState, NoiseParams,
    boxminus, boxplus, propagate, quat_to_rot, rot_to_quat,
    so3_exp, so3_log, step_jacobians,
)


def exp_series(omega, terms=20):
    """Truncated matrix-exponential series, the independent rotation oracle."""
    from quantlio.manifold import skew
    w = skew(omega)
    out = np.eye(3)
    acc = np.eye(3)
    for n in range(1, terms):
        acc = acc @ w / n
        out = out + acc
    return out


def random_state(rng):
    x = NavState()
    x.rotation = so3_exp(rng.uniform(-2, 2, 3))
    x.position = rng.uniform(-5, 5, 3)
    x.velocity = rng.uniform(-2, 2, 3)
    x.bias_gyro = rng.uniform(-0.01, 0.01, 3)
    x.bias_accel = rng.uniform(-0.1, 0.1, 3)
    x.gravity = np.array([0.0, 0.0, -9.81]) + rng.uniform(-0.05, 0.05, 3)
    return x


class TestSo3:
    def test_exp_identity(self):
        np.testing.assert_allclose(so3_exp(np.zeros(3)), np.eye(3))

    def test_exp_quarter_turn(self):
        rot = so3_exp([0.0, 0.0, np.pi / 2])
        np.testing.assert_allclose(rot @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-12)

    def test_exp_matches_series_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            omega = axis * rng.uniform(1e-3, np.pi - 1e-3)
            np.testing.assert_allclose(so3_exp(omega), exp_series(omega), atol=1e-12)

    def test_exp_orthonormal(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            rot = so3_exp(rng.uniform(-np.pi, np.pi, 3))
            np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(rot) > 0.0

    def test_log_identity(self):
        np.testing.assert_allclose(so3_log(np.eye(3)), np.zeros(3))

    def test_log_round_trip(self):
        np.testing.assert_allclose(so3_log(so3_exp([0.1, -0.2, 0.3])),
                                   [0.1, -0.2, 0.3], atol=1e-10)

    def test_log_near_pi_branch(self):
        omega = np.array([0.0, 0.0, np.pi])
        rot = exp_series(omega, terms=30)
        recovered = so3_log(rot)
        assert abs(np.linalg.norm(recovered) - np.pi) < 1e-9
        np.testing.assert_allclose(so3_exp(recovered), rot, atol=1e-9)

    def test_log_principal_branch(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            rot = so3_exp(rng.uniform(-np.pi, np.pi, 3))
            assert np.linalg.norm(so3_log(rot)) <= np.pi + 1e-12
            np.testing.assert_allclose(so3_exp(so3_log(rot)), rot, atol=1e-9)

    def test_log_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            so3_log(np.eye(3) * 1.5)

    def test_quat_round_trip(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            rot = so3_exp(rng.uniform(-np.pi, np.pi, 3))
            np.testing.assert_allclose(quat_to_rot(rot_to_quat(rot)), rot, atol=1e-12)


class TestRetraction:
    def test_boxplus_zero(self):
        rng = np.random.default_rng(11)
        x = random_state(rng)
        y = boxplus(x, np.zeros(ERROR_DIM))
        np.testing.assert_allclose(boxminus(y, x), np.zeros(ERROR_DIM), atol=1e-12)

    def test_retraction_pair(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            x, y = random_state(rng), random_state(rng)
            np.testing.assert_allclose(boxminus(boxplus(x, boxminus(y, x)), y),
                                       np.zeros(ERROR_DIM), atol=1e-9)
            dx = rng.uniform(-0.5, 0.5, ERROR_DIM)
            np.testing.assert_allclose(boxminus(boxplus(x, dx), x), dx, atol=1e-9)

    def test_pure_translation(self):
        rng = np.random.default_rng(13)
        x = random_state(rng)
        dx = np.zeros(ERROR_DIM)
        dx[POS] = [1.0, 0.0, 0.0]
        y = boxplus(x, dx)
        np.testing.assert_allclose(y.position, x.position + [1.0, 0.0, 0.0])
        np.testing.assert_allclose(y.rotation, x.rotation)
        np.testing.assert_allclose(y.velocity, x.velocity)

    def test_boxminus_self_zero(self):
        rng = np.random.default_rng(14)
        x = random_state(rng)
        assert boxminus(x, x).shape == (ERROR_DIM,)
        np.testing.assert_allclose(boxminus(x, x), np.zeros(ERROR_DIM))


def make_stream(duration, rate, gyro_fn, accel_fn):
    dt = 1.0 / rate
    n = int(round(duration * rate)) + 1
    return [ImuSample(t_us=int(round(i * dt * 1e6)),
                      gyro=np.asarray(gyro_fn(i * dt), dtype=float),
                      accel=np.asarray(accel_fn(i * dt), dtype=float))
            for i in range(n)]


class TestPropagate:
    def test_stationary_hover(self):
        x = NavState()
        p = np.eye(ERROR_DIM) * 1e-4
        stream = make_stream(1.0, 200, lambda t: np.zeros(3),
                             lambda t: np.array([0.0, 0.0, 9.81]))
        out, _ = propagate(x, p, stream, NoiseParams())
        np.testing.assert_allclose(out.position, np.zeros(3), atol=1e-9)
        np.testing.assert_allclose(out.velocity, np.zeros(3), atol=1e-9)

    def test_free_fall(self):
        x = NavState()
        p = np.eye(ERROR_DIM) * 1e-4
        stream = make_stream(0.1, 200, lambda t: np.zeros(3), lambda t: np.zeros(3))
        out, _ = propagate(x, p, stream, NoiseParams())
        np.testing.assert_allclose(out.velocity, x.gravity * 0.1, atol=1e-12)

    def test_sinusoidal_against_fine_integrator(self):
        # Gentle whole-period sinusoids over 1 s; the oracle integrates the
        # same zero-order-held inputs at 10 kHz. Amplitudes are sized so the
        # per-sample Euler truncation stays well inside the 1e-5 m budget.
        rate = 200.0
        gyro_fn = lambda t: np.array([0.0, 0.0, 0.05 * np.sin(2 * np.pi * t)])
        accel_fn = lambda t: np.array([0.1 * np.sin(2 * np.pi * t),
                                       0.1 * np.cos(4 * np.pi * t),
                                       9.81 + 0.1 * np.sin(2 * np.pi * t)])
        stream = make_stream(1.0, rate, gyro_fn, accel_fn)

        x0 = NavState()
        p0 = np.eye(ERROR_DIM) * 1e-6
        coarse, _ = propagate(x0, p0, stream, NoiseParams())

        # Oracle: Euler at 10 kHz holding each 200 Hz sample over its interval.
        sub = 50
        rot = x0.rotation.copy()
        pos = x0.position.copy()
        vel = x0.velocity.copy()
        h = 1.0 / rate / sub
        for i in range(len(stream) - 1):
            gyro, accel = stream[i].gyro, stream[i].accel
            for _ in range(sub):
                pos = pos + vel * h
                vel = vel + (rot @ accel + x0.gravity) * h
                rot = rot @ so3_exp(gyro * h)
        assert np.linalg.norm(coarse.position - pos) < 1e-5

    def test_covariance_psd_over_random_steps(self):
        rng = np.random.default_rng(15)
        x = random_state(rng)
        p = np.eye(ERROR_DIM) * 1e-3
        noise = NoiseParams()
        t = 0
        for _ in range(1000):
            gyro = rng.uniform(-0.5, 0.5, 3)
            accel = rng.uniform(-1, 1, 3) + np.array([0, 0, 9.81])
            samples = [ImuSample(t, gyro, accel), ImuSample(t + 5000, gyro, accel)]
            x, p = propagate(x, p, samples, noise)
            t += 5000
        np.testing.assert_allclose(p, p.T, atol=1e-9)
        assert np.linalg.eigvalsh(p).min() >= -1e-9

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(16)
        noise = NoiseParams()
        dt = 0.005
        for _ in range(10):
            x = random_state(rng)
            gyro = rng.uniform(-0.5, 0.5, 3)
            accel = rng.uniform(-1, 1, 3)
            fx, _ = step_jacobians(x, gyro, accel, dt)

            def mean_map(state):
                samples = [ImuSample(0, gyro, accel), ImuSample(int(dt * 1e6), gyro, accel)]
                out, _ = propagate(state, np.eye(ERROR_DIM), samples, noise)
                return out

            base = mean_map(x)
            eps = 1e-6
            fd = np.zeros((ERROR_DIM, ERROR_DIM))
            for j in range(ERROR_DIM):
                dv = np.zeros(ERROR_DIM)
                dv[j] = eps
                fd[:, j] = (boxminus(mean_map(boxplus(x, dv)), base)
                            - boxminus(mean_map(boxplus(x, -dv)), base)) / (2 * eps)
            scale = max(1.0, np.abs(fx).max())
            assert np.abs(fd - fx).max() / scale < 1e-4

    def test_errors(self):
        x = NavState()
        p = np.eye(ERROR_DIM)
        with pytest.raises(ValueError):
            propagate(x, p, [], NoiseParams())
        bad = [ImuSample(0, np.zeros(3), np.zeros(3)),
               ImuSample(0, np.zeros(3), np.zeros(3))]
        with pytest.raises(ValueError):
            propagate(x, p, bad, NoiseParams())
        sparse = [ImuSample(0, np.zeros(3), np.zeros(3)),
                  ImuSample(200_000, np.zeros(3), np.zeros(3))]
        with pytest.raises(ValueError):
            propagate(x, p, sparse, NoiseParams())
