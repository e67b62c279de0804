import numpy as np
import pytest
from scipy.integrate import quad

from quantlio.coprocessor import associate, build_groups
from quantlio.estimator import (
    Host, QuantInterval, VacuousInterval, effective_measurement,
    gaussian_tail, interval_moments, jacobian_point_plane,
    point_plane_rows, qmap_update, residual_value, standard_update,
)
from quantlio.manifold import (
    ERROR_DIM, ImuSample, NavState, NoiseParams, boxplus, so3_exp,
)
from quantlio.quantizer import Codebook
from quantlio.simworld import LidarModel, build_scene, synth_scan, synth_trajectory
from quantlio.voxelmap import VoxelMap
from quantlio.wire import (
    FrameType, ProtocolOrderError, SessionConfig, WireFrame,
    decode_frame, decode_pose_resp, encode_frame, encode_pose_req,
    pack_groups,
)

IDENTITY = (np.eye(3), np.zeros(3))


def phi(x):
    return np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)


class TestGaussianTail:
    def test_symmetry_at_zero(self):
        assert gaussian_tail(0.0) == pytest.approx(0.5, abs=1e-15)

    def test_reflection(self):
        rng = np.random.default_rng(0)
        for x in rng.uniform(-6, 6, 100):
            assert gaussian_tail(-x) == pytest.approx(1.0 - gaussian_tail(x), abs=1e-15)

    def test_against_quadrature_oracle(self):
        value, _ = quad(phi, 1.959964, 12.0)
        assert gaussian_tail(1.959964) == pytest.approx(0.025, abs=1e-7)
        assert gaussian_tail(1.959964) == pytest.approx(value, abs=1e-12)

    def test_limits(self):
        assert gaussian_tail(np.inf) == 0.0
        assert gaussian_tail(-np.inf) == 1.0

    def test_deep_tail_stable(self):
        v = gaussian_tail(20.0)
        assert 0.0 < v < 1e-80


class TestEffectiveMeasurement:
    def test_symmetric_interval_zero_residual(self):
        z, r = effective_measurement(QuantInterval(-0.01, 0.01, 0.02))
        assert z == pytest.approx(0.0, abs=1e-15)
        assert r > 0.0

    def test_fine_interval_limit(self):
        sigma = 0.02
        c = 0.007
        w = 1e-6 * sigma
        z, r = effective_measurement(QuantInterval(c - w / 2, c + w / 2, sigma))
        assert abs(z - c) < 1e-4 * sigma
        assert abs(r - sigma ** 2) / sigma ** 2 < 1e-3

    def test_one_sided_against_quadrature(self):
        # Interval [0, inf) with sigma 1: standardized bounds (-inf, 0].
        lam, omega, _ = interval_moments(-np.inf, 0.0)
        mass, _ = quad(phi, -12.0, 0.0)
        m1, _ = quad(lambda x: x * phi(x), -12.0, 0.0)
        m2, _ = quad(lambda x: x * x * phi(x), -12.0, 0.0)
        mean = m1 / mass
        var = m2 / mass - mean ** 2
        assert lam == pytest.approx(mean, abs=1e-9)
        assert omega == pytest.approx(1.0 - var, abs=1e-9)

    def test_two_sided_against_quadrature(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = rng.uniform(-3, 1)
            b = a + rng.uniform(0.05, 2.0)
            lam, omega, logp = interval_moments(a, b)
            mass, _ = quad(phi, a, b)
            m1, _ = quad(lambda x: x * phi(x), a, b)
            m2, _ = quad(lambda x: x * x * phi(x), a, b)
            mean = m1 / mass
            var = m2 / mass - mean ** 2
            assert np.exp(logp) == pytest.approx(mass, rel=1e-9)
            assert lam == pytest.approx(mean, abs=1e-9)
            assert omega == pytest.approx(1.0 - var, abs=1e-9)

    def test_vacuous_interval_rejected(self):
        with pytest.raises(VacuousInterval):
            effective_measurement(QuantInterval(0.9, 0.90001, 0.01))

    def test_validation(self):
        with pytest.raises(ValueError):
            QuantInterval(0.2, 0.1, 1.0)
        with pytest.raises(ValueError):
            QuantInterval(0.0, 0.1, 0.0)

    def surrogate_fd_errors(self, lo, hi, sigma, eps=1e-3):
        z_eff, r_eff = effective_measurement(QuantInterval(lo, hi, sigma))

        def nll(shift):
            lam, omega, logp = interval_moments((-hi - shift) / sigma,
                                                (-lo - shift) / sigma)
            return -logp

        step = eps * sigma
        grad_fd = (nll(step) - nll(-step)) / (2 * step)
        curv_fd = (nll(step) - 2 * nll(0.0) + nll(-step)) / step ** 2
        grad = z_eff / r_eff
        curv = 1.0 / r_eff
        return (abs(grad_fd - grad) / max(abs(grad), abs(curv) * sigma),
                abs(curv_fd - curv) / abs(curv))

    def test_surrogate_consistency_random_intervals(self):
        rng = np.random.default_rng(2)
        sigma = 0.02
        r_thr = 0.04
        worst = 0.0
        for _ in range(2000):
            l_z = int(rng.integers(1, 9))
            step = r_thr / 2 ** l_z
            idx = int(rng.integers(0, 2 ** l_z))
            ge, ce = self.surrogate_fd_errors(idx * step, (idx + 1) * step, sigma)
            worst = max(worst, ge, ce)
        assert worst < 1e-5

    def test_omega_positive_including_one_sided(self):
        rng = np.random.default_rng(3)
        for _ in range(5000):
            a = rng.uniform(-8, 7.5)
            b = a + rng.uniform(1e-4, 4.0)
            _, omega, _ = interval_moments(a, b)
            assert omega > 0.0
        for _ in range(500):
            a = rng.uniform(-8, 8)
            _, omega_up, _ = interval_moments(a, np.inf)
            _, omega_dn, _ = interval_moments(-np.inf, a)
            assert omega_up > 0.0 and omega_dn > 0.0


class TestJacobian:
    def test_translation_block_is_normal(self):
        state = NavState()
        u = np.array([0.0, 0.0, 1.0])
        row = jacobian_point_plane(state, [1.0, 2.0, 3.0], u, IDENTITY)
        np.testing.assert_array_equal(row[3:6], u)
        assert np.count_nonzero(row[6:]) == 0

    def test_axis_aligned_lever_arm_vanishes(self):
        state = NavState()
        row = jacobian_point_plane(state, [0.0, 0.0, 2.0], [0.0, 0.0, 1.0], IDENTITY)
        np.testing.assert_allclose(row[0:3], 0.0, atol=1e-15)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            state = NavState()
            state.rotation = so3_exp(rng.uniform(-1, 1, 3))
            state.position = rng.uniform(-3, 3, 3)
            extrinsic = (so3_exp(rng.uniform(-0.3, 0.3, 3)), rng.uniform(-0.1, 0.1, 3))
            p = rng.uniform(-5, 5, 3)
            u = rng.standard_normal(3)
            u /= np.linalg.norm(u)
            d = rng.uniform(-2, 2)
            row = jacobian_point_plane(state, p, u, extrinsic)

            eps = 1e-6
            fd = np.zeros(ERROR_DIM)
            for j in range(ERROR_DIM):
                dv = np.zeros(ERROR_DIM)
                dv[j] = eps
                hi = residual_value(boxplus(state, dv), p, u, d, extrinsic)
                lo = residual_value(boxplus(state, -dv), p, u, d, extrinsic)
                fd[j] = (hi - lo) / (2 * eps)
            assert np.abs(fd - row).max() / max(1.0, np.abs(row).max()) < 1e-5


def static_observations(sigma_r=0.0, seed=0):
    """Observations from a static box-room scan against a prebuilt map."""
    scene = build_scene("box-room")
    gt = synth_trajectory("static", 2.0)
    lidar = LidarModel(range_noise=sigma_r, n_azimuth=32, n_elevation=10)
    vmap = VoxelMap(edge=0.5, cell_cap=64)
    map_pts, _ = synth_scan(scene, gt, lidar, t_k=0.5, seed=seed + 100)
    vmap.insert(map_pts)  # static at the origin: sensor frame == world frame
    pts, _ = synth_scan(scene, gt, lidar, t_k=1.0, seed=seed)
    cb = Codebook(l_p=16, l_n=16, l_z=16, r_max=40.0)
    obs, _ = associate(pts, pts, vmap, cb)
    return obs, cb


class TestQmapUpdate:
    def test_empty_groups_no_change(self):
        state = NavState()
        cov = np.eye(ERROR_DIM) * 0.01
        out, pout, info = qmap_update(state, cov, [], Codebook(), 0.02, IDENTITY)
        assert not info["updated"]
        np.testing.assert_array_equal(pout, cov)
        np.testing.assert_array_equal(out.position, state.position)

    def test_high_bit_matches_standard_oracle_on_identical_inputs(self):
        # The oracle is the standard point-likelihood update fed the same
        # dequantized direction and point reconstructions, so the comparison
        # isolates the interval-likelihood machinery, which must converge to
        # the standard update as the z grid refines.
        from quantlio.coprocessor import PlaneObservation
        from quantlio.quantizer import (
            dequantize_point, quantize_point, quantize_residual_vector,
        )

        obs, cb = static_observations(sigma_r=0.01, seed=1)
        assert len(obs) >= 100
        state = NavState()
        cov = np.eye(ERROR_DIM) * 1e-3
        sigma = 0.02

        groups = build_groups(obs, cb)
        q_state, q_cov, info = qmap_update(state, cov, groups, cb, sigma, IDENTITY)

        oracle_obs = []
        for o in obs:
            _, n_center = quantize_residual_vector(o.residual_vector, cb)
            u = n_center / np.linalg.norm(n_center)
            _, p_recon = quantize_point(o.point_lidar, cb)
            oracle_obs.append(PlaneObservation(
                point_world=o.point_world, point_lidar=p_recon, normal=u,
                plane_offset=o.plane_offset, residual_vector=o.residual * u,
                residual=o.residual))
        s_state, s_cov = standard_update(state, cov, oracle_obs, sigma, IDENTITY)

        assert info["updated"]
        assert np.linalg.norm(q_state.position - s_state.position) < 1e-6
        assert np.abs(q_cov - s_cov).max() < 1e-8

    def _floor_observation(self):
        from quantlio.coprocessor import PlaneObservation
        return PlaneObservation(
            point_world=np.array([0.0, 0.0, -1.5]),
            point_lidar=np.array([0.0, 0.0, -1.5]),
            normal=np.array([0.0, 0.0, 1.0]),
            plane_offset=1.5,
            residual_vector=np.array([0.0, 0.0, 0.01]),
            residual=0.01)

    def test_floor_plane_shrinks_only_height_variance(self):
        # Exact-direction path: a single height observation touches only the
        # z position variance.
        state = NavState()
        cov = np.eye(ERROR_DIM) * 1e-2
        _, post = standard_update(state, cov, [self._floor_observation()], 0.02, IDENTITY)
        assert post[5, 5] < cov[5, 5]
        assert abs(post[3, 3] - cov[3, 3]) < 1e-12
        assert abs(post[4, 4] - cov[4, 4]) < 1e-12

    def test_floor_plane_qmap_within_direction_budget(self):
        # Through the wire the direction is the residual-cell center, which
        # is never exactly axis-aligned; the x/y leakage stays bounded by the
        # squared quantization angle while z still contracts.
        state = NavState()
        cov = np.eye(ERROR_DIM) * 1e-2
        cb = Codebook(l_p=12, l_n=8, l_z=8, r_max=10.0)
        obs = self._floor_observation()
        groups = build_groups([obs], cb)
        _, post, info = qmap_update(state, cov, groups, cb, 0.02, IDENTITY)
        assert info["updated"]
        assert post[5, 5] < cov[5, 5]
        angle = (cb.residual_step / 2.0) / obs.residual
        budget = 4.0 * angle ** 2 * (cov[5, 5] - post[5, 5])
        assert abs(post[3, 3] - cov[3, 3]) < budget
        assert abs(post[4, 4] - cov[4, 4]) < budget

    def test_covariance_contraction_psd(self):
        obs, cb = static_observations(sigma_r=0.02, seed=2)
        state = NavState()
        cov = np.eye(ERROR_DIM) * 1e-3
        groups = build_groups(obs, cb)
        _, post, _ = qmap_update(state, cov, groups, cb, 0.02, IDENTITY)
        assert np.linalg.eigvalsh(post).min() >= -1e-9
        assert np.linalg.eigvalsh(cov - post).min() >= -1e-9

    def test_non_psd_prior_reported(self):
        cov = np.eye(ERROR_DIM)
        cov[0, 0] = -1.0
        with pytest.raises(ValueError):
            qmap_update(NavState(), cov, [], Codebook(), 0.02, IDENTITY)


def make_host(sigma=0.02):
    imu = [ImuSample(t_us=i * 5000, gyro=np.zeros(3), accel=np.array([0, 0, 9.81]))
           for i in range(401)]
    cfg = SessionConfig(codebook=Codebook(), ds_0=0.5, alpha=0.01, sigma=sigma,
                        extrinsic_rotation=np.eye(3), extrinsic_translation=np.zeros(3))
    return Host(state=NavState(), cov=np.eye(ERROR_DIM) * 1e-4,
                config=cfg, noise=NoiseParams(), imu=imu)


class TestHost:
    def pose_req(self, t_prev, t_k):
        return decode_frame(encode_frame(
            FrameType.POSE_REQ, int(t_k * 1e6),
            encode_pose_req(int(t_prev * 1e6), int(t_k * 1e6))))

    def test_static_pose_resp_identity_delta(self):
        host = make_host()
        reply = decode_frame(host.handle_frame(self.pose_req(0.0, 0.1)))
        assert reply.frame_type == FrameType.POSE_RESP
        (dr, dt), (pr, pt) = decode_pose_resp(reply.payload)
        np.testing.assert_allclose(dr, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(dt, 0.0, atol=1e-9)
        np.testing.assert_allclose(pt, 0.0, atol=1e-12)

    def test_dead_reckoning_when_obs_never_arrive(self):
        host = make_host()
        for k in range(1, 6):
            host.handle_frame(self.pose_req((k - 1) * 0.1, k * 0.1))
        assert host.skipped_scans == 4
        assert host.time == pytest.approx(0.5)
        np.testing.assert_allclose(host.state.position, 0.0, atol=1e-9)

    def test_duplicate_pose_req_rejected(self):
        host = make_host()
        host.handle_frame(self.pose_req(0.0, 0.1))
        with pytest.raises(ProtocolOrderError):
            host.handle_frame(self.pose_req(0.0, 0.1))

    def test_window_mismatch_rejected(self):
        host = make_host()
        host.handle_frame(self.pose_req(0.0, 0.1))
        with pytest.raises(ProtocolOrderError):
            host.handle_frame(self.pose_req(0.3, 0.4))

    def test_obs_groups_produce_state_update(self):
        host = make_host()
        host.handle_frame(self.pose_req(0.0, 0.1))
        payload = pack_groups([], host.config.codebook)
        reply = decode_frame(host.handle_frame(
            decode_frame(encode_frame(FrameType.OBS_GROUPS, 100000, payload))))
        assert reply.frame_type == FrameType.STATE_UPDATE
        assert len(host.logs) == 1
        assert host.logs[0].psd_ok and host.logs[0].contraction_ok

    def test_obs_without_pending_scan_rejected(self):
        host = make_host()
        payload = pack_groups([], host.config.codebook)
        with pytest.raises(ProtocolOrderError):
            host.handle_frame(decode_frame(
                encode_frame(FrameType.OBS_GROUPS, 100000, payload)))

    def test_no_imu_coverage_refused(self):
        host = make_host()
        with pytest.raises(ValueError):
            host.handle_frame(self.pose_req(0.0, 10.0))
