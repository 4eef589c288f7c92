"""Rigid and similarity transforms, pinhole projection and dense warping.

Conventions used throughout the package:

* A keyframe pose ``G`` maps world coordinates to camera coordinates.
* The relative pose ``G_ij = G_j * G_i^-1`` maps camera-i coordinates to
  camera-j coordinates.
* Twists are ordered ``[translation; rotation]`` and increments are applied on
  the left, ``G <- exp(delta) * G``.
* Quaternions are stored ``(w, x, y, z)`` and renormalized after every
  composition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DegenerateAlignmentError, LogSingularityError, NonpositiveDisparityError

Z_MIN = 1e-3
_SMALL_ANGLE = 1e-6


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix, batched over leading axes."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the quaternion with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class SE3Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        q = q / np.linalg.norm(q)
        object.__setattr__(self, "rotation", _frozen(q))
        object.__setattr__(self, "translation", _frozen(self.translation))

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls()

    @classmethod
    def from_rt(cls, R: np.ndarray, t) -> "SE3Pose":
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "SE3Pose":
        T = np.asarray(T)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @cached_property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        """``self * other``: apply ``other`` first."""
        q = quat_multiply(self.rotation, other.rotation)
        t = self.R @ other.translation + self.translation
        return SE3Pose(q, t)

    __matmul__ = compose

    def inverse(self) -> "SE3Pose":
        w, x, y, z = self.rotation
        q_inv = np.array([w, -x, -y, -z])
        return SE3Pose(q_inv, -(self.R.T @ self.translation))

    def act(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.R.T + self.translation

    def center(self) -> np.ndarray:
        """Camera centre in world coordinates, for a world-to-camera pose."""
        return -(self.R.T @ self.translation)

    def adjoint(self) -> np.ndarray:
        """6x6 adjoint for ``[translation; rotation]`` twists."""
        A = np.zeros((6, 6))
        A[:3, :3] = self.R
        A[:3, 3:] = hat(self.translation) @ self.R
        A[3:, 3:] = self.R
        return A

    def __eq__(self, other):
        if not isinstance(other, SE3Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation)

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


@dataclass(frozen=True)
class Sim3Transform:
    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"Sim3 scale must be positive, got {self.scale}")
        q = np.asarray(self.rotation, dtype=np.float64)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", _frozen(q / np.linalg.norm(q)))
        object.__setattr__(self, "translation", _frozen(self.translation))

    @cached_property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points) @ self.R.T) + self.translation

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        q = quat_multiply(self.rotation, other.rotation)
        t = self.scale * (self.R @ other.translation) + self.translation
        return Sim3Transform(self.scale * other.scale, q, t)

    def inverse(self) -> "Sim3Transform":
        w, x, y, z = self.rotation
        s_inv = 1.0 / self.scale
        return Sim3Transform(s_inv, np.array([w, -x, -y, -z]), -s_inv * (self.R.T @ self.translation))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the grid")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @cached_property
    def grid(self) -> np.ndarray:
        """(H, W, 2) pixel coordinates ``(u, v)``; pixel centres sit on integers."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        g = np.stack([u, v], axis=-1)
        g.setflags(write=False)
        return g

    @cached_property
    def rays(self) -> np.ndarray:
        """(H*W, 3) normalized rays ``((u-cx)/fx, (v-cy)/fy, 1)`` in row-major order."""
        g = self.grid.reshape(-1, 2)
        r = np.stack([(g[:, 0] - self.cx) / self.fx, (g[:, 1] - self.cy) / self.fy, np.ones(len(g))], axis=-1)
        r.setflags(write=False)
        return r

    def in_bounds(self, pixels: np.ndarray) -> np.ndarray:
        u, v = pixels[..., 0], pixels[..., 1]
        return (u >= 0) & (u <= self.width - 1) & (v >= 0) & (v <= self.height - 1)


def se3_exp(xi) -> SE3Pose:
    xi = np.asarray(xi, dtype=np.float64)
    rho, phi = xi[:3], xi[3:]
    theta = np.linalg.norm(phi)
    if theta < _SMALL_ANGLE:
        half_sinc = 0.5 - theta**2 / 48.0
        q = np.concatenate([[np.cos(theta / 2)], half_sinc * phi])
        V = np.eye(3) + 0.5 * hat(phi) + hat(phi) @ hat(phi) / 6.0
    else:
        q = np.concatenate([[np.cos(theta / 2)], np.sin(theta / 2) / theta * phi])
        P = hat(phi)
        V = np.eye(3) + (1 - np.cos(theta)) / theta**2 * P + (theta - np.sin(theta)) / theta**3 * (P @ P)
    return SE3Pose(q, V @ rho)


def so3_log_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q[0] < 0:
        q = -q
    w, v = q[0], q[1:]
    s = np.linalg.norm(v)
    theta = 2.0 * np.arctan2(s, w)
    if theta > np.pi - 1e-6:
        raise LogSingularityError(f"rotation angle {theta:.9f} too close to pi")
    if s < 1e-12:
        return 2.0 * v / w * (1.0 - (s / w) ** 2 / 3.0)
    return theta / s * v


def se3_log(pose: SE3Pose) -> np.ndarray:
    phi = so3_log_quat(pose.rotation)
    theta = np.linalg.norm(phi)
    P = hat(phi)
    if theta < _SMALL_ANGLE:
        coef = 1.0 / 12.0 + theta**2 / 720.0
    else:
        coef = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta**2
    V_inv = np.eye(3) - 0.5 * P + coef * (P @ P)
    return np.concatenate([V_inv @ pose.translation, phi])


def relative_pose(Gi: SE3Pose, Gj: SE3Pose) -> SE3Pose:
    """Transform taking camera-i coordinates to camera-j coordinates."""
    return Gj.compose(Gi.inverse())


def se3_interpolate(Ga: SE3Pose, Gb: SE3Pose, t: float) -> SE3Pose:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolation fraction {t} outside [0, 1]")
    if t == 0.0:
        return Ga
    if t == 1.0:
        return Gb
    delta = se3_log(Ga.inverse().compose(Gb))
    return Ga.compose(se3_exp(t * delta))


def project(points: np.ndarray, K: CameraIntrinsics, z_min: float = Z_MIN):
    """Pinhole projection. Returns ``(pixels, valid)``; ``valid`` is ``z > z_min``."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    valid = z > z_min
    zs = np.where(valid, z, 1.0)
    u = K.fx * points[..., 0] / zs + K.cx
    v = K.fy * points[..., 1] / zs + K.cy
    return np.stack([u, v], axis=-1), valid


def backproject(pixels: np.ndarray, inv_depth, K: CameraIntrinsics) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    d = np.asarray(inv_depth, dtype=np.float64)
    if np.any(d <= 0):
        raise NonpositiveDisparityError("inverse depth must be > 0")
    x = (pixels[..., 0] - K.cx) / K.fx
    y = (pixels[..., 1] - K.cy) / K.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1) / d[..., None]


def warp_rays(R: np.ndarray, t: np.ndarray, d: np.ndarray, rays: np.ndarray, K: CameraIntrinsics):
    """Batched rigid warp in scaled coordinates.

    ``R`` (..., 3, 3), ``t`` (..., 3), ``d`` (..., n), ``rays`` (n, 3).
    Returns ``Y = R @ ray + d * t`` (..., n, 3), which is the target-camera
    point multiplied by ``d``, together with pixels and the validity mask
    (positive depth above ``Z_MIN`` and inside the grid).
    """
    Y = rays @ np.swapaxes(R, -1, -2) + d[..., None] * t[..., None, :]
    z = Y[..., 2]
    valid = z > Z_MIN * d
    zs = np.where(valid, z, 1.0)
    u = K.fx * Y[..., 0] / zs + K.cx
    v = K.fy * Y[..., 1] / zs + K.cy
    pix = np.stack([u, v], axis=-1)
    valid &= K.in_bounds(pix)
    return Y, pix, valid


def warp_jacobians(Y: np.ndarray, d: np.ndarray, R: np.ndarray, t: np.ndarray, K: CameraIntrinsics):
    """Jacobians of warped pixels w.r.t. left increments on both poses and on ``d``.

    Shapes: ``Y`` (..., n, 3), ``d`` (..., n), ``R`` (..., 3, 3), ``t`` (..., 3).
    Returns ``J_i`` and ``J_j`` of shape (..., n, 2, 6) and ``J_d`` of shape (..., n, 2).
    """
    X, Yc, Z = Y[..., 0], Y[..., 1], Y[..., 2]
    Z = np.where(np.abs(Z) > 1e-12, Z, 1e-12)
    iz = 1.0 / Z
    x, y = X * iz, Yc * iz
    # d(pixel)/dY @ [d*I, -[Y]x], written out per entry
    Jj = np.empty(Y.shape[:-1] + (2, 6))
    Jj[..., 0, 0] = K.fx * d * iz
    Jj[..., 0, 1] = 0.0
    Jj[..., 0, 2] = -K.fx * d * x * iz
    Jj[..., 0, 3] = -K.fx * x * y
    Jj[..., 0, 4] = K.fx * (1.0 + x * x)
    Jj[..., 0, 5] = -K.fx * y
    Jj[..., 1, 0] = 0.0
    Jj[..., 1, 1] = K.fy * d * iz
    Jj[..., 1, 2] = -K.fy * d * y * iz
    Jj[..., 1, 3] = -K.fy * (1.0 + y * y)
    Jj[..., 1, 4] = K.fy * x * y
    Jj[..., 1, 5] = K.fy * x
    # G_ij * exp(-delta_i) = exp(-Ad(G_ij) delta_i) * G_ij
    Ad = np.zeros(R.shape[:-2] + (6, 6))
    Ad[..., :3, :3] = R
    Ad[..., :3, 3:] = hat(t) @ R
    Ad[..., 3:, 3:] = R
    lead = Y.shape[:-2]
    n = Y.shape[-2]
    Ji = -(Jj.reshape(lead + (2 * n, 6)) @ Ad).reshape(Jj.shape)
    tx, ty, tz = t[..., 0, None], t[..., 1, None], t[..., 2, None]
    Jd = np.stack([K.fx * iz * (tx - x * tz), K.fy * iz * (ty - y * tz)], axis=-1)
    return Ji, Jj, Jd


def rigid_correspondence(Gij: SE3Pose, d_i: np.ndarray, K: CameraIntrinsics):
    """Pixels of frame i warped into frame j using camera motion and depth only.

    Returns ``(p_ij, valid)`` with shapes (H, W, 2) and (H, W).
    """
    d = np.asarray(d_i, dtype=np.float64).reshape(-1)
    _, pix, valid = warp_rays(Gij.R, Gij.translation, d, K.rays, K)
    return pix.reshape(K.height, K.width, 2), valid.reshape(K.shape)


def correspondence_jacobians(Gij: SE3Pose, d_i: np.ndarray, K: CameraIntrinsics):
    """Per-pixel ``(J_xi_i, J_xi_j, J_d)`` of the rigid correspondence."""
    d = np.asarray(d_i, dtype=np.float64).reshape(-1)
    Y, _, _ = warp_rays(Gij.R, Gij.translation, d, K.rays, K)
    Ji, Jj, Jd = warp_jacobians(Y, d, Gij.R, Gij.translation, K)
    H, W = K.shape
    return Ji.reshape(H, W, 2, 6), Jj.reshape(H, W, 2, 6), Jd.reshape(H, W, 2)


def umeyama_sim3(est, gt) -> Sim3Transform:
    """Least-squares similarity transform with ``s R est + t ~ gt``."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[1] != 3:
        raise DegenerateAlignmentError(f"shape mismatch {est.shape} vs {gt.shape}")
    n = len(est)
    if n < 3:
        raise DegenerateAlignmentError(f"need at least 3 point pairs, got {n}")
    mu_e = est.mean(axis=0)
    mu_g = gt.mean(axis=0)
    X = est - mu_e
    Y = gt - mu_g
    var_e = np.mean(np.sum(X * X, axis=1))
    cov = Y.T @ X / n
    U, D, Vt = np.linalg.svd(cov)
    if var_e <= 0 or D[0] <= 0 or D[1] <= 1e-12 * D[0]:
        raise DegenerateAlignmentError("rank-deficient covariance (collinear or coincident points)")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = np.trace(np.diag(D) @ S) / var_e
    t = mu_g - s * (R @ mu_e)
    return Sim3Transform(s, matrix_to_quat(R), t)
