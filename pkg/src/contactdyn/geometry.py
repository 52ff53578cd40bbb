"""SE(3) poses, pose increments, point clouds and the ADD-S metric.

Poses are stored as a translation ``p`` (..., 3) and rotation matrix
``R`` (..., 3, 3); any leading axes are batch/sequence axes. Axis-angle only
appears at the increment interface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

ORTHO_TOL = 1e-9
SMALL_ANGLE = 1e-8


class InvalidPoseError(ValueError):
    pass


@dataclass(frozen=True)
class Pose:
    p: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.float64))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64))
        if self.p.shape[-1:] != (3,) or self.R.shape[-2:] != (3, 3) or self.p.shape[:-1] != self.R.shape[:-2]:
            raise InvalidPoseError(f"inconsistent pose shapes p{self.p.shape} R{self.R.shape}")

    def __len__(self) -> int:
        return self.p.shape[0]

    def __getitem__(self, idx) -> "Pose":
        return Pose(self.p[idx], self.R[idx])

    @classmethod
    def identity(cls, n: int | None = None) -> "Pose":
        if n is None:
            return cls(np.zeros(3), np.eye(3))
        return cls(np.zeros((n, 3)), np.broadcast_to(np.eye(3), (n, 3, 3)).copy())

    @classmethod
    def planar(cls, x, y, theta) -> "Pose":
        """Pose on the table plane: z = 0 and rotation about +z only."""
        x, y, theta = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (x, y, theta)))
        c, s = np.cos(theta), np.sin(theta)
        p = np.stack([x, y, np.zeros_like(x)], axis=-1)
        R = np.zeros(x.shape + (3, 3))
        R[..., 0, 0], R[..., 0, 1] = c, -s
        R[..., 1, 0], R[..., 1, 1] = s, c
        R[..., 2, 2] = 1.0
        return cls(p, R)

    @classmethod
    def stack(cls, poses) -> "Pose":
        poses = list(poses)
        return cls(np.stack([q.p for q in poses]), np.stack([q.R for q in poses]))

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        return bool(np.all(np.isfinite(self.p))) and is_rotation(self.R, tol)


def is_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if not np.all(np.isfinite(R)):
        return False
    eye = np.eye(3)
    ortho = np.abs(np.swapaxes(R, -1, -2) @ R - eye).max() <= tol
    return bool(ortho and np.abs(np.linalg.det(R) - 1.0).max() <= tol)


def hat(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    W = np.zeros(w.shape[:-1] + (3, 3))
    W[..., 0, 1], W[..., 0, 2] = -w[..., 2], w[..., 1]
    W[..., 1, 0], W[..., 1, 2] = w[..., 2], -w[..., 0]
    W[..., 2, 0], W[..., 2, 1] = -w[..., 1], w[..., 0]
    return W


def exp_map(w: np.ndarray) -> np.ndarray:
    """Axis-angle vector(s) to rotation matrices (Rodrigues).

    Below ``SMALL_ANGLE`` the second-order Taylor expansion
    ``I + W + W^2 / 2`` is used.
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("exp_map: non-finite axis-angle input")
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    W = hat(w)
    W2 = W @ W
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / (safe * safe))
    return np.eye(3) + a * W + b * W2


def log_map(R: np.ndarray) -> np.ndarray:
    """Rotation matrices to axis-angle vectors on the principal branch.

    The angle comes from ``atan2(sin, cos)`` so it stays accurate near pi;
    there the axis is read from the symmetric part ``(R + R^T) / 2`` using
    its largest diagonal entry, with the sign fixed by the skew part.
    """
    R = np.asarray(R, dtype=np.float64)
    if not is_rotation(R, 1e-6):
        raise InvalidPoseError("log_map: input is not a rotation matrix")
    batch = R.shape[:-2]
    Rf = R.reshape(-1, 3, 3)
    vee = np.stack([Rf[:, 2, 1] - Rf[:, 1, 2], Rf[:, 0, 2] - Rf[:, 2, 0], Rf[:, 1, 0] - Rf[:, 0, 1]], axis=1)
    cos_t = (np.trace(Rf, axis1=1, axis2=2) - 1.0) / 2.0
    sin_t = np.linalg.norm(vee, axis=1) / 2.0
    theta = np.arctan2(sin_t, cos_t)
    out = np.empty((Rf.shape[0], 3))
    small = theta < 1e-6
    near_pi = theta > np.pi - 1e-4
    gen = ~small & ~near_pi
    out[gen] = (theta[gen] / (2.0 * sin_t[gen]))[:, None] * vee[gen]
    # theta / sin(theta) ~ 1 + theta^2 / 6
    out[small] = 0.5 * vee[small] * (1.0 + theta[small, None] ** 2 / 6.0)
    for i in np.flatnonzero(near_pi):
        th = theta[i]
        kk = ((Rf[i] + Rf[i].T) / 2.0 - cos_t[i] * np.eye(3)) / (1.0 - cos_t[i])
        j = int(np.argmax(np.diag(kk)))
        axis = kk[:, j] / np.sqrt(kk[j, j])
        if np.dot(axis, vee[i]) < 0.0:
            axis = -axis
        out[i] = th * axis / np.linalg.norm(axis)
    return out.reshape(batch + (3,))


def _quat_log(R: np.ndarray) -> np.ndarray:
    """Independent log map via Shepperd quaternion extraction (test oracle)."""
    m = R
    tr = np.trace(m)
    cands = [tr, m[0, 0], m[1, 1], m[2, 2]]
    k = int(np.argmax(cands))
    if k == 0:
        qw = np.sqrt(1.0 + tr) / 2.0
        q = np.array([qw, (m[2, 1] - m[1, 2]) / (4 * qw), (m[0, 2] - m[2, 0]) / (4 * qw), (m[1, 0] - m[0, 1]) / (4 * qw)])
    elif k == 1:
        qx = np.sqrt(1.0 + 2 * m[0, 0] - tr) / 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / (4 * qx), qx, (m[0, 1] + m[1, 0]) / (4 * qx), (m[0, 2] + m[2, 0]) / (4 * qx)])
    elif k == 2:
        qy = np.sqrt(1.0 + 2 * m[1, 1] - tr) / 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / (4 * qy), (m[0, 1] + m[1, 0]) / (4 * qy), qy, (m[1, 2] + m[2, 1]) / (4 * qy)])
    else:
        qz = np.sqrt(1.0 + 2 * m[2, 2] - tr) / 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / (4 * qz), (m[0, 2] + m[2, 0]) / (4 * qz), (m[1, 2] + m[2, 1]) / (4 * qz), qz])
    if q[0] < 0:
        q = -q
    v = q[1:]
    n = np.linalg.norm(v)
    if n < 1e-15:
        return np.zeros(3)
    return 2.0 * np.arctan2(n, q[0]) * v / n


def encode_increments(poses: Pose) -> np.ndarray:
    """(H+1) poses -> (H, 6) increments ``[p_k - p_{k-1}, log(R_k R_{k-1}^T)]``.

    Extra leading axes are allowed: ``poses.p`` of shape (..., H+1, 3) gives
    (..., H, 6).
    """
    if not poses.is_valid(1e-6):
        raise InvalidPoseError("encode_increments: invalid pose in sequence")
    dp = poses.p[..., 1:, :] - poses.p[..., :-1, :]
    rel = poses.R[..., 1:, :, :] @ np.swapaxes(poses.R[..., :-1, :, :], -1, -2)
    return np.concatenate([dp, log_map(rel)], axis=-1)


def apply_increments(anchor: Pose, incs: np.ndarray) -> Pose:
    """Compose increments onto ``anchor``: returns the H resulting poses.

    ``anchor`` may be batched (..., 3) with ``incs`` (..., H, 6).
    """
    incs = np.asarray(incs, dtype=np.float64)
    if not anchor.is_valid(1e-6):
        raise InvalidPoseError("apply_increments: invalid anchor pose")
    if np.any(np.linalg.norm(incs[..., 3:], axis=-1) >= np.pi):
        raise InvalidPoseError("apply_increments: rotation increment magnitude >= pi")
    H = incs.shape[-2]
    p = anchor.p[..., None, :] + np.cumsum(incs[..., :3], axis=-2)
    Rs = exp_map(incs[..., 3:])
    out = np.empty(incs.shape[:-1] + (3, 3))
    R = anchor.R
    for k in range(H):
        R = Rs[..., k, :, :] @ R
        out[..., k, :, :] = R
    return Pose(p, out)


def transform_cloud(cloud: np.ndarray, pose: Pose) -> np.ndarray:
    """Map object-frame points (N, 3) into the world: ``R q + p``.

    A batched pose (..., 3) yields clouds of shape (..., N, 3).
    """
    if not pose.is_valid(1e-6):
        raise InvalidPoseError("transform_cloud: invalid pose")
    cloud = np.asarray(cloud, dtype=np.float64)
    return cloud @ np.swapaxes(pose.R, -1, -2) + pose.p[..., None, :]


def add_s(pred: Pose, gt: Pose, cloud: np.ndarray) -> np.ndarray:
    """Per-frame ADD-S: mean over ground-truth-posed points of the distance
    to the closest predicted-posed point."""
    if len(pred) != len(gt):
        raise ValueError("add_s: sequences differ in length")
    if len(gt) == 0:
        raise ValueError("add_s: empty sequences")
    pts_pred = transform_cloud(cloud, pred)
    pts_gt = transform_cloud(cloud, gt)
    out = np.empty(len(gt))
    for i in range(len(gt)):
        dist, _ = cKDTree(pts_pred[i]).query(pts_gt[i], k=1)
        out[i] = dist.mean()
    return out


def add_s_curve(errors: np.ndarray, d_max: float, n_thresholds: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of frames with ADD-S below each of ``n_thresholds`` evenly
    spaced thresholds in (0, d_max]."""
    thresholds = d_max * np.arange(1, n_thresholds + 1) / n_thresholds
    frac = (np.asarray(errors)[None, :] < thresholds[:, None]).mean(axis=1)
    return thresholds, frac


def auc_from_errors(errors: np.ndarray, d_max: float) -> float:
    """Area under the fraction-below-threshold curve on [0, d_max], in percent.

    Computed in closed form: each frame contributes ``max(0, 1 - e / d_max)``,
    the exact area of its step function.
    """
    if d_max <= 0:
        raise ValueError("d_max must be positive")
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("no frames to score")
    return float(100.0 * np.clip(1.0 - errors / d_max, 0.0, 1.0).mean())


def add_s_auc(pred: Pose, gt: Pose, cloud: np.ndarray, d_max: float) -> tuple[float, np.ndarray]:
    if d_max <= 0:
        raise ValueError("d_max must be positive")
    errors = add_s(pred, gt, cloud)
    return auc_from_errors(errors, d_max), errors


def box_cloud(half_extents, height: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the surface of an axis-aligned box centred at 0."""
    hx, hy = float(half_extents[0]), float(half_extents[1])
    hz = height / 2.0
    ext = np.array([hx, hy, hz])
    areas = np.array([hy * hz, hx * hz, hx * hy])  # faces normal to x, y, z
    face_axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * ext
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    pts[np.arange(n), face_axis] = sign * ext[face_axis]
    return pts
