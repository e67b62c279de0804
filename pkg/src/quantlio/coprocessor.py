"""LiDAR-side processing: undistortion, point-plane association, residual
vector resampling and observation-group assembly.

Pose convention used throughout: a rigid transform (R, t) maps coordinates
with p' = R @ p + t. The scan delta handed over by the host is the transform
taking scan-start IMU coordinates into the scan-end IMU frame, so applying
the interpolated fraction of its twist to a point captured mid-scan moves it
into the end-of-scan frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .manifold import skew, so3_exp, so3_log
from .quantizer import (
    Codebook, quantize_points, quantize_residual_vectors, quantize_zs,
)
from .voxelmap import VoxelMap, plane_fit_batch


def se3_log(rot, trans):
    """Twist (rho, theta) with exp recovering (rot, trans)."""
    theta = so3_log(rot)
    angle = np.linalg.norm(theta)
    w = skew(theta)
    if angle < 1e-8:
        v_inv = np.eye(3) - 0.5 * w + (w @ w) / 12.0
    else:
        a2 = angle * angle
        coeff = (1.0 - 0.5 * angle * np.sin(angle) / (1.0 - np.cos(angle))) / a2
        v_inv = np.eye(3) - 0.5 * w + coeff * (w @ w)
    return v_inv @ np.asarray(trans, dtype=float), theta


def se3_exp(rho, theta):
    """Rigid transform from a twist (rho, theta)."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta)
    w = skew(theta)
    if angle < 1e-8:
        v = np.eye(3) + 0.5 * w + (w @ w) / 6.0
    else:
        a2 = angle * angle
        v = (np.eye(3) + (1.0 - np.cos(angle)) / a2 * w
             + (angle - np.sin(angle)) / (a2 * angle) * (w @ w))
    return so3_exp(theta), v @ np.asarray(rho, dtype=float)


def compose(a, b):
    """(R, t) composition: apply b first, then a."""
    ra, ta = a
    rb, tb = b
    return ra @ rb, ra @ tb + ta


def invert(t):
    r, tr = t
    return r.T, -(r.T @ tr)


def apply_transform(t, points):
    r, tr = t
    return np.asarray(points) @ r.T + tr


def undistort(points, times, t_prev: float, t_k: float, scan_delta, extrinsic):
    """Map per-point-timestamped LiDAR points into the end-of-scan frame.

    scan_delta is the IMU-frame transform over the scan (start coordinates
    into the end frame); each point gets the constant-twist fraction
    (t_k - t_j) / (t_k - t_prev) of it, sandwiched through the LiDAR-IMU
    extrinsic. Point count is preserved.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    times = np.asarray(times, dtype=float)
    if len(points) == 0:
        return points.copy()
    if np.any(times < t_prev - 1e-9) or np.any(times > t_k + 1e-9):
        raise ValueError("point timestamps fall outside the scan window")
    span = t_k - t_prev
    if span <= 0.0:
        raise ValueError("scan window must have positive duration")

    rho, theta = se3_log(*scan_delta)
    if np.linalg.norm(rho) < 1e-15 and np.linalg.norm(theta) < 1e-15:
        return points.copy()

    r_il, t_il = extrinsic
    fractions = (t_k - times) / span
    out = np.empty_like(points)
    # Columns of a scan share timestamps; interpolate one pose per fraction.
    uniq, inverse = np.unique(fractions, return_inverse=True)
    imu_pts = points @ r_il.T + t_il
    for i, s in enumerate(uniq):
        rot_j, trans_j = se3_exp(s * rho, s * theta)
        sel = inverse == i
        moved = imu_pts[sel] @ rot_j.T + trans_j
        out[sel] = (moved - t_il) @ r_il
    return out


def voxel_downsample(points, edge: float) -> np.ndarray:
    """Indices of one representative per occupied voxel: the member nearest
    the voxel center, ties broken by lexicographic coordinates."""
    from .voxelmap import pack_cells

    points = np.atleast_2d(np.asarray(points, dtype=float))
    if len(points) == 0:
        return np.empty(0, dtype=np.int64)
    cells = np.floor(points / edge).astype(np.int64)
    centers = (cells + 0.5) * edge
    diff = points - centers
    dist = np.einsum("ij,ij->i", diff, diff)
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0], dist))
    _, first = np.unique(pack_cells(cells[order]), return_index=True)
    return np.sort(order[first])


@dataclass
class PlaneObservation:
    """One associated point-to-plane measurement."""

    point_world: np.ndarray
    point_lidar: np.ndarray
    normal: np.ndarray
    plane_offset: float
    residual_vector: np.ndarray
    residual: float


@dataclass
class Bucket:
    """Observations sharing one quantized residual-vector key."""

    rq_key: int
    observations: list = field(default_factory=list)
    cell_size: float = 0.0


def associate(world_points, lidar_points, vmap: VoxelMap, cb: Codebook,
              plane_threshold: float = 0.1):
    """Point-plane association against the map.

    For each world point: 5 nearest map points, a plane fit, then the signed
    plane distance folded nonnegative (the normal flips with it). Points
    whose residual reaches r_thr are dropped. Returns (observations,
    skipped count).
    """
    world_points = np.atleast_2d(np.asarray(world_points, dtype=float))
    lidar_points = np.atleast_2d(np.asarray(lidar_points, dtype=float))
    if len(world_points) != len(lidar_points):
        raise ValueError("world and LiDAR point counts differ")
    if len(world_points) == 0:
        return [], 0

    neighbors = vmap.knn_batch(world_points, 5)
    have5 = np.array([len(nb) == 5 for nb in neighbors])
    if not np.any(have5):
        return [], len(world_points)
    stacks = np.stack([nb for nb, ok in zip(neighbors, have5) if ok])
    normals, offsets, _, fit_ok = plane_fit_batch(stacks, max_residual=plane_threshold)

    observations = []
    skipped = int(np.count_nonzero(~have5))
    rows = np.flatnonzero(have5)
    signed = np.einsum("mj,mj->m", world_points[rows], normals) + offsets
    for local, row in enumerate(rows):
        if not fit_ok[local]:
            skipped += 1
            continue
        z = float(signed[local])
        u = normals[local]
        d = float(offsets[local])
        if z < 0.0:
            z, u, d = -z, -u, -d
        if z >= cb.r_thr:
            skipped += 1
            continue
        observations.append(PlaneObservation(
            point_world=world_points[row],
            point_lidar=lidar_points[row],
            normal=u,
            plane_offset=d,
            residual_vector=z * u,
            residual=z,
        ))
    return observations, skipped


def rq_resample(observations, cb: Codebook, ds_0: float, alpha: float):
    """Adaptive per-bucket downsampling keyed by quantized residual vectors.

    Observations are partitioned by rq key; each bucket gets a voxel size
    ds_0 + alpha * mean sensor range of its members and keeps one member per
    voxel (the one nearest the voxel center). Bucket counts never grow and a
    nonempty bucket keeps at least one member.
    """
    if not observations:
        return [], []
    vectors = np.array([o.residual_vector for o in observations])
    keys, _ = quantize_residual_vectors(vectors, cb)
    lidar_pts = np.array([o.point_lidar for o in observations])
    ranges = np.linalg.norm(lidar_pts, axis=1)

    kept = []
    buckets = []
    for key in np.unique(keys):
        members = np.flatnonzero(keys == key)
        ds_k = ds_0 + alpha * float(ranges[members].mean())
        local_keep = voxel_downsample(lidar_pts[members], ds_k)
        chosen = members[local_keep]
        buckets.append(Bucket(
            rq_key=int(key),
            observations=[observations[i] for i in chosen],
            cell_size=ds_k,
        ))
        kept.extend(int(i) for i in chosen)
    kept.sort()
    return [observations[i] for i in kept], buckets


@dataclass
class ObservationGroup:
    """Shared rq key plus member (z index, point index triple) tuples."""

    rq_key: int
    members: list


def build_groups(observations, cb: Codebook) -> list[ObservationGroup]:
    """Quantize observations and group them under shared rq keys.

    Groups are ordered by ascending key; members within a group by ascending
    point indices (then z index), so the encoding is deterministic.
    """
    if not observations:
        return []
    vectors = np.array([o.residual_vector for o in observations])
    keys, _ = quantize_residual_vectors(vectors, cb)
    pts = np.array([o.point_lidar for o in observations])
    p_idx, _ = quantize_points(pts, cb)
    zs = np.array([o.residual for o in observations])
    z_idx, _, _, _ = quantize_zs(zs, cb)

    grouped: dict[int, list] = {}
    for key, pi, zi in zip(keys, p_idx, z_idx):
        member = (int(zi), (int(pi[0]), int(pi[1]), int(pi[2])))
        grouped.setdefault(int(key), []).append(member)
    out = []
    for key in sorted(grouped):
        members = sorted(grouped[key], key=lambda m: (m[1], m[0]))
        out.append(ObservationGroup(rq_key=key, members=members))
    return out


class Coprocessor:
    """Owns the map and turns raw scans into observation groups.

    Transport-agnostic: the caller feeds it the pose response data and the
    posterior pose, and ships the returned groups itself.
    """

    def __init__(self, cb: Codebook, extrinsic, ds_0: float = 0.5, alpha: float = 0.01,
                 plane_threshold: float = 0.1, map_edge: float = 0.5,
                 map_cell_cap: int = 32, resample: bool = True):
        self.cb = cb
        self.extrinsic = extrinsic
        self.ds_0 = ds_0
        self.alpha = alpha
        self.plane_threshold = plane_threshold
        self.resample = resample
        self.vmap = VoxelMap(edge=map_edge, cell_cap=map_cell_cap)
        self._pending_lidar_points = None

    def process_scan(self, points, times, t_prev: float, t_k: float,
                     scan_delta, pose_prev):
        """Undistort, downsample, associate and group one scan.

        pose_prev is the world-from-IMU pose at the previous scan end;
        combined with scan_delta it yields the end-of-scan world pose used
        to place points for association. Returns (groups, observations,
        stats dict).
        """
        lidar_end = undistort(points, times, t_prev, t_k, scan_delta, self.extrinsic)
        keep = voxel_downsample(lidar_end, self.ds_0)
        lidar_end = lidar_end[keep]
        # Codebook range gate: whatever the quantizer cannot represent is
        # dropped before association.
        in_range = np.all(np.abs(lidar_end) < self.cb.r_max, axis=1)
        lidar_end = lidar_end[in_range]

        pose_k = compose(pose_prev, invert(scan_delta))
        world_from_lidar = compose(pose_k, self.extrinsic)
        world = apply_transform(world_from_lidar, lidar_end)

        observations, skipped = associate(world, lidar_end, self.vmap, self.cb,
                                          self.plane_threshold)
        raw_count = len(observations)
        if self.resample:
            observations, _ = rq_resample(observations, self.cb, self.ds_0, self.alpha)
        groups = build_groups(observations, self.cb)
        self._pending_lidar_points = lidar_end
        stats = {
            "points_in": len(points),
            "points_assoc_input": int(np.count_nonzero(in_range)),
            "observations_raw": raw_count,
            "observations_sent": len(observations),
            "skipped": skipped,
        }
        return groups, observations, stats

    def integrate_posterior(self, pose_k) -> None:
        """Insert the pending scan into the map at the posterior pose."""
        if self._pending_lidar_points is None:
            return
        world_from_lidar = compose(pose_k, self.extrinsic)
        self.vmap.insert(apply_transform(world_from_lidar, self._pending_lidar_points))
        self._pending_lidar_points = None
