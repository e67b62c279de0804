"""Host-side quantized-MAP update.

Each transmitted measurement tells the host only that a nonnegative scalar
residual fell inside a known quantization interval. The exact per-interval
negative log-likelihood under Gaussian noise is replaced by the quadratic
surrogate whose gradient and curvature at the linearization point match it;
the surrogate's effective residual z' and variance R' then feed a standard
information-form Kalman update, executed in a single pass.

For a standardized interval [alpha, beta] (alpha = -hi/sigma,
beta = -lo/sigma) with mass P = Phi(beta) - Phi(alpha):

    lambda = (phi(alpha) - phi(beta)) / P
    omega  = lambda^2 + (beta phi(beta) - alpha phi(alpha)) / P
    R'     = sigma^2 / omega
    z'     = -sigma * lambda / omega

omega equals one minus the truncated-normal variance, so it stays in (0, 1]
for every interval with positive mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr

from .manifold import (
    BG, ERROR_DIM, POS, THETA,
    NavState, NoiseParams, boxplus, propagate, skew,
)
from .quantizer import Codebook, dequantize_point, dequantize_residual_key, dequantize_z
from .wire import (
    FrameType, ProtocolOrderError, SessionConfig, WireFrame,
    decode_pose_req, encode_config, encode_frame, encode_pose_resp,
    encode_state_update, unpack_groups,
)

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG_VACUOUS = math.log(1e-300)


class VacuousInterval(ValueError):
    """Interval probability too small to carry information."""


def gaussian_tail(x: float) -> float:
    """P[N(0,1) > x]; exact limits at plus and minus infinity."""
    return float(np.exp(log_ndtr(-np.asarray(x, dtype=float))))


def _log_phi(x):
    return -0.5 * x * x - _LOG_SQRT_2PI


def interval_moments(alpha, beta):
    """(lambda, omega, log mass) for standardized intervals, vectorized.

    Bounds may be infinite. The mass is evaluated in whichever tail keeps
    the log-domain difference well conditioned.
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if np.any(alpha >= beta):
        raise ValueError("interval requires alpha < beta")

    log_lo = log_ndtr(alpha)   # log Phi(alpha)
    log_hi = log_ndtr(beta)
    log_qlo = log_ndtr(-alpha)  # log Q(alpha)
    log_qhi = log_ndtr(-beta)

    # Phi-difference is stable when the interval sits left of the mode,
    # Q-difference when it sits right; either works in between.
    use_upper = alpha + beta > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio_low = np.exp(np.minimum(log_lo - log_hi, 0.0))
        ratio_up = np.exp(np.minimum(log_qhi - log_qlo, 0.0))
        log_p = np.where(use_upper,
                         log_qlo + np.log1p(-ratio_up),
                         log_hi + np.log1p(-ratio_low))

    with np.errstate(over="ignore", invalid="ignore"):
        haz_a = np.where(np.isfinite(alpha), np.exp(_log_phi(alpha) - log_p), 0.0)
        haz_b = np.where(np.isfinite(beta), np.exp(_log_phi(beta) - log_p), 0.0)
        a_term = np.where(np.isfinite(alpha), alpha * haz_a, 0.0)
        b_term = np.where(np.isfinite(beta), beta * haz_b, 0.0)
    lam = haz_a - haz_b
    omega = lam * lam + b_term - a_term
    return lam, omega, log_p


@dataclass
class QuantInterval:
    """Residual bounds in meters plus the measurement noise scale."""

    lo: float
    hi: float
    sigma: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("interval requires lo < hi")
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")


def effective_measurement(iv: QuantInterval) -> tuple[float, float]:
    """Effective residual z' and variance R' for one interval."""
    alpha = -iv.hi / iv.sigma
    beta = -iv.lo / iv.sigma
    lam, omega, log_p = interval_moments(alpha, beta)
    if log_p < _LOG_VACUOUS or not np.isfinite(log_p) or omega <= 0.0:
        raise VacuousInterval(f"interval [{iv.lo}, {iv.hi}] carries no mass")
    r_eff = iv.sigma ** 2 / float(omega)
    z_eff = -iv.sigma * float(lam) / float(omega)
    return z_eff, r_eff


@dataclass
class EffectiveMeasurement:
    """Surrogate residual, variance and measurement row."""

    z_eff: float
    r_eff: float
    h_row: np.ndarray


def point_plane_rows(state: NavState, lidar_points, normals, extrinsic) -> np.ndarray:
    """Measurement Jacobian rows over the error state, one per observation.

    Only the attitude and position blocks are nonzero: the position block is
    the plane normal, the attitude block reflects the lever arm of the
    IMU-frame point under a right (body-frame) rotation perturbation.
    """
    lidar_points = np.atleast_2d(np.asarray(lidar_points, dtype=float))
    normals = np.atleast_2d(np.asarray(normals, dtype=float))
    r_il, t_il = extrinsic
    imu_pts = lidar_points @ r_il.T + t_il
    rows = np.zeros((len(lidar_points), ERROR_DIM))
    rows[:, POS] = normals
    # -u^T R [q]x, written as cross(q, R^T u) per row.
    rt_u = normals @ state.rotation
    rows[:, THETA] = np.cross(imu_pts, rt_u)
    return rows


def jacobian_point_plane(state: NavState, p_lidar, u, extrinsic) -> np.ndarray:
    """Single measurement row; see point_plane_rows."""
    return point_plane_rows(state, p_lidar, u, extrinsic)[0]


def residual_value(state: NavState, p_lidar, u, d: float, extrinsic) -> float:
    """Signed plane distance of a LiDAR point placed with the given state."""
    r_il, t_il = extrinsic
    world = state.rotation @ (r_il @ np.asarray(p_lidar, dtype=float) + t_il) + state.position
    return float(np.dot(u, world) + d)


def _information_update(state: NavState, cov: np.ndarray, rows: np.ndarray,
                        z: np.ndarray, r_diag: np.ndarray):
    """Information-form Kalman step shared by both update flavors."""
    p_inv = np.linalg.inv(cov)
    ht_rinv = rows.T / r_diag
    s = ht_rinv @ rows + p_inv
    s = 0.5 * (s + s.T)
    post_cov = np.linalg.inv(s)
    post_cov = 0.5 * (post_cov + post_cov.T)
    delta = -post_cov @ (ht_rinv @ z)
    return boxplus(state, delta), post_cov


def qmap_update(state: NavState, cov: np.ndarray, groups, cb: Codebook,
                sigma: float, extrinsic):
    """Single-pass quantized-MAP update from decoded observation groups.

    Per member the z interval comes from its z index, the direction from the
    group's dequantized residual-vector center (normalized), and the point
    from its reconstructed indices. Returns (state, covariance, info dict).
    """
    eig_min = float(np.linalg.eigvalsh(cov).min())
    if eig_min < -1e-9:
        raise ValueError(f"prior covariance is not PSD (min eigenvalue {eig_min:.2e})")

    # Only 2^l_z distinct intervals exist, so the surrogate per z index is
    # computed once per update.
    cell_cache: dict[int, tuple | None] = {}

    def cell_effective(z_index: int):
        if z_index not in cell_cache:
            _, (lo, hi) = dequantize_z(z_index, cb)
            try:
                cell_cache[z_index] = effective_measurement(QuantInterval(lo, hi, sigma))
            except VacuousInterval:
                cell_cache[z_index] = None
        return cell_cache[z_index]

    z_eff, r_eff, pts, us = [], [], [], []
    vacuous = 0
    for group in groups:
        center = dequantize_residual_key(group.rq_key, cb)
        norm = np.linalg.norm(center)
        u = center / norm
        for z_index, p_idx in group.members:
            eff = cell_effective(z_index)
            if eff is None:
                vacuous += 1
                continue
            z_eff.append(eff[0])
            r_eff.append(eff[1])
            pts.append(dequantize_point(np.asarray(p_idx), cb))
            us.append(u)

    info = {"measurements": len(z_eff), "vacuous": vacuous, "updated": bool(z_eff)}
    if not z_eff:
        return state.copy(), np.array(cov, copy=True), info

    rows = point_plane_rows(state, np.array(pts), np.array(us), extrinsic)
    out_state, out_cov = _information_update(
        state, cov, rows, np.array(z_eff), np.array(r_eff))
    return out_state, out_cov, info


def standard_update(state: NavState, cov: np.ndarray, observations,
                    sigma: float, extrinsic):
    """Unquantized point-to-plane update used by the float baseline.

    observations carry exact residuals (z_i) and normals; every measurement
    weighs in with variance sigma^2.
    """
    if not observations:
        return state.copy(), np.array(cov, copy=True)
    rows = point_plane_rows(
        state,
        np.array([o.point_lidar for o in observations]),
        np.array([o.normal for o in observations]),
        extrinsic)
    z = np.array([o.residual for o in observations])
    r_diag = np.full(len(observations), sigma ** 2)
    return _information_update(state, cov, rows, z, r_diag)


@dataclass
class HostLog:
    """Per-scan record emitted by the host."""

    t: float
    position: np.ndarray
    quaternion: np.ndarray
    trace_cov: float
    measurements: int
    payload_bits: int
    contraction_ok: bool
    psd_ok: bool


@dataclass
class Host:
    """Owns the filter state and answers coprocessor frames in order."""

    state: NavState
    cov: np.ndarray
    config: SessionConfig
    noise: NoiseParams
    imu: list
    time: float = 0.0
    logs: list = field(default_factory=list)
    awaiting_obs: bool = False
    pending_t: float = 0.0
    skipped_scans: int = 0

    def config_frame(self) -> bytes:
        return encode_frame(FrameType.CONFIG, int(self.time * 1e6),
                            encode_config(self.config))

    def handle_frame(self, frame: WireFrame) -> bytes:
        if frame.frame_type == FrameType.POSE_REQ:
            return self._on_pose_req(frame)
        if frame.frame_type == FrameType.OBS_GROUPS:
            return self._on_obs_groups(frame)
        raise ProtocolOrderError(f"host cannot accept {FrameType(frame.frame_type).name}")

    def _on_pose_req(self, frame: WireFrame) -> bytes:
        t_prev_us, t_k_us = decode_pose_req(frame.payload)
        t_prev, t_k = t_prev_us * 1e-6, t_k_us * 1e-6
        if self.awaiting_obs:
            if t_k <= self.pending_t:
                raise ProtocolOrderError("pose request repeats or precedes the pending scan")
            # The coprocessor dropped the scan; continue dead reckoning.
            self.skipped_scans += 1
            self.awaiting_obs = False
        if t_k <= self.time:
            raise ProtocolOrderError("pose request timestamp does not advance")
        if abs(t_prev - self.time) > 1e-6:
            raise ProtocolOrderError(
                f"pose request window starts at {t_prev:.6f}, host is at {self.time:.6f}")

        pose_prev = (self.state.rotation.copy(), self.state.position.copy())
        self.state, self.cov = propagate(self.state, self.cov, self.imu, self.noise,
                                         t_start=self.time, t_end=t_k)
        self._prior_cov = self.cov.copy()
        pose_k = (self.state.rotation, self.state.position)
        # Transform taking scan-start IMU coordinates into the end frame.
        delta_rot = pose_k[0].T @ pose_prev[0]
        delta_trans = pose_k[0].T @ (pose_prev[1] - pose_k[1])
        self.time = t_k
        self.awaiting_obs = True
        self.pending_t = t_k
        return encode_frame(FrameType.POSE_RESP, t_k_us,
                            encode_pose_resp((delta_rot, delta_trans), pose_prev))

    def _on_obs_groups(self, frame: WireFrame) -> bytes:
        if not self.awaiting_obs:
            raise ProtocolOrderError("observation groups arrived with no pending scan")
        groups = unpack_groups(frame.payload, self.config.codebook)
        extrinsic = (self.config.extrinsic_rotation, self.config.extrinsic_translation)
        prior_cov = self.cov
        self.state, self.cov, info = qmap_update(
            self.state, self.cov, groups, self.config.codebook,
            self.config.sigma, extrinsic)
        self._log_scan(prior_cov, info["measurements"], 8 * len(frame.payload))
        self.awaiting_obs = False
        return encode_frame(FrameType.STATE_UPDATE, frame.timestamp_us,
                            encode_state_update((self.state.rotation, self.state.position)))

    def apply_float_observations(self, t_k: float, observations) -> None:
        """Baseline path: exact residuals, no wire codec in between."""
        if not self.awaiting_obs:
            raise ProtocolOrderError("observations arrived with no pending scan")
        extrinsic = (self.config.extrinsic_rotation, self.config.extrinsic_translation)
        prior_cov = self.cov
        self.state, self.cov = standard_update(self.state, self.cov, observations,
                                               self.config.sigma, extrinsic)
        # 28 bytes per float32 observation: residual, vector, point.
        self._log_scan(prior_cov, len(observations), 224 * len(observations))
        self.awaiting_obs = False

    def _log_scan(self, prior_cov: np.ndarray, measurements: int, bits: int) -> None:
        from .manifold import rot_to_quat
        gap_eigs = np.linalg.eigvalsh(prior_cov - self.cov)
        post_eigs = np.linalg.eigvalsh(self.cov)
        self.logs.append(HostLog(
            t=self.time,
            position=self.state.position.copy(),
            quaternion=rot_to_quat(self.state.rotation),
            trace_cov=float(np.trace(self.cov)),
            measurements=measurements,
            payload_bits=bits,
            contraction_ok=bool(gap_eigs.min() >= -1e-9),
            psd_ok=bool(post_eigs.min() >= -1e-9),
        ))
