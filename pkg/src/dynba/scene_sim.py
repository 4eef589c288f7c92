"""Synthetic dynamic scenes standing in for real video plus learned front-ends.

A scene is a box-shaped room (one wall carries a smooth height-field bump)
with rigid movers (boxes and spheres) travelling at constant body velocity.
Each frame is ray cast analytically at the working grid resolution. The
module also produces the noisy correspondence, confidence and depth-prior
observations that a learned front-end would otherwise predict.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .errors import DegenerateSceneError
from .features import FeatureNoiseSpec
from .frame_graph import EdgeObservation
from .geometry import Z_MIN, CameraIntrinsics, SE3Pose, project, se3_exp

CAMERA_PATHS = ("orbit", "forward", "lateral", "random-smooth", "forward-lateral")
CONF_MODES = ("ideal", "noisy-informative", "uninformative")


@dataclass
class MoverSpec:
    shape: str = "box"
    size: float = 0.8  # cube edge length or sphere diameter, metres
    position: tuple = (0.0, 0.0, 3.0)
    rotation: tuple = (0.0, 0.0, 0.0)  # rotation vector, radians
    velocity: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)  # body twist [v; w] per second

    def initial_pose(self) -> SE3Pose:
        """Body-to-world pose at time zero."""
        return SE3Pose(se3_exp(np.r_[0.0, 0.0, 0.0, self.rotation]).rotation, self.position)


@dataclass
class WorldSpec:
    half_width: float = 3.0
    floor: float = 1.2
    ceiling: float = 1.8
    back: float = 6.0
    front: float = -3.0
    bump_amplitude: float = 0.15
    bump_frequency: float = 1.3


@dataclass
class ObservationNoise:
    corr_sigma: float = 0.25
    outlier_frac: float = 0.0
    outlier_sigma: float = 8.0
    conf_mode: str = "ideal"
    depth_prior_sigma: float = 0.005
    depth_prior_scale_jitter: float = 0.0


@dataclass
class SceneConfig:
    n_frames: int = 60
    fps: float = 10.0
    height: int = 30
    width: int = 40
    focal: float = 32.0
    camera_path: str = "forward-lateral"
    path_magnitude: float = 1.0
    world: WorldSpec = field(default_factory=WorldSpec)
    movers: list = field(default_factory=list)
    noise: ObservationNoise = field(default_factory=ObservationNoise)
    features: FeatureNoiseSpec = field(default_factory=FeatureNoiseSpec)
    feature_channels: int = 16
    seed: int = 0

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            self.focal, self.focal, (self.width - 1) / 2.0, (self.height - 1) / 2.0, self.width, self.height
        )


def standard_movers() -> list:
    """Two movers that together cover roughly 20% of the default view."""
    return [
        MoverSpec("box", 1.2, (-1.3, 0.3, 4.2), (0.0, 0.3, 0.0), (0.125, 0.0, 0.0, 0.0, 0.02, 0.0)),
        MoverSpec("sphere", 1.1, (0.9, -0.3, 3.6), (0.0, 0.0, 0.0), (-0.075, 0.0, 0.0, 0.2, 0.0, 0.0)),
    ]


def standard_dynamic_config(seed: int = 0, **overrides) -> SceneConfig:
    cfg = SceneConfig(movers=standard_movers(), seed=seed)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def static_config(seed: int = 0, **overrides) -> SceneConfig:
    cfg = SceneConfig(movers=[], seed=seed)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


@dataclass
class SyntheticSequence:
    config: SceneConfig
    intrinsics: CameraIntrinsics
    timestamps: np.ndarray
    gt_poses: list
    gt_inv_depth: np.ndarray  # (F, H, W)
    dynamic_mask: np.ndarray  # (F, H, W) bool
    object_id: np.ndarray  # (F, H, W) int, -1 for static world
    mover_poses: list  # mover_poses[frame][m]: body-to-world SE3Pose

    @property
    def n_frames(self) -> int:
        return len(self.gt_poses)

    def camera_points(self, frame: int) -> np.ndarray:
        K = self.intrinsics
        return (K.rays / self.gt_inv_depth[frame].reshape(-1, 1)).reshape(K.height, K.width, 3)

    def world_points(self, frame: int) -> np.ndarray:
        return self.gt_poses[frame].inverse().act(self.camera_points(frame))

    def body_points(self, frame: int) -> np.ndarray:
        """Points in the coordinates of the object each pixel observes (world for static pixels)."""
        Xw = self.world_points(frame)
        out = Xw.copy()
        ids = self.object_id[frame]
        for m, T in enumerate(self.mover_poses[frame]):
            sel = ids == m
            out[sel] = T.inverse().act(Xw[sel])
        return out


def _look_rotation(yaw: float, pitch: float) -> np.ndarray:
    """Camera-to-world rotation for a camera with y down and z forward."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp_ = np.cos(pitch), np.sin(pitch)
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cp, -sp_], [0, sp_, cp]])
    return Ry @ Rx


def camera_trajectory(config: SceneConfig) -> list:
    """World-to-camera poses along the configured path."""
    n = config.n_frames
    m = config.path_magnitude
    s = np.linspace(0.0, 1.0, n)
    zeros = np.zeros(n)
    if config.camera_path == "forward":
        c = np.stack([zeros, zeros, m * s], -1)
        yaw, pitch = zeros, zeros
    elif config.camera_path == "lateral":
        c = np.stack([m * (s - 0.5), zeros, zeros], -1)
        yaw, pitch = zeros, zeros
    elif config.camera_path == "orbit":
        radius = 3.0
        ang = m / radius * (s - 0.5)
        c = np.stack([-radius * np.sin(ang), zeros, radius - radius * np.cos(ang)], -1)
        yaw, pitch = ang, zeros
    elif config.camera_path == "forward-lateral":
        c = np.stack([0.8 * m * np.sin(np.pi * s), -0.1 * m * np.sin(2 * np.pi * s), 1.0 * m * s], -1)
        yaw = 0.45 * m * np.sin(2 * np.pi * s)
        pitch = 0.2 * m * (np.cos(2 * np.pi * s) - 1.0)
    elif config.camera_path == "random-smooth":
        g = rng_mod.stream(config.seed, "scene", 1)
        amp = g.normal(size=(5, 3)) * m * 0.3
        ph = g.uniform(0, 2 * np.pi, size=(5, 3))
        freq = np.arange(1, 4)
        basis = np.sin(np.pi * freq[None, :, None] * s[:, None, None] + ph[None, :3, :]) - np.sin(ph[None, :3, :])
        c = np.einsum("nfk,fk->nk", basis, amp[:3])
        yaw = 0.2 * m * np.sin(2 * np.pi * s + ph[3, 0]) - 0.2 * m * np.sin(ph[3, 0])
        pitch = 0.05 * m * np.sin(2 * np.pi * s + ph[4, 0]) - 0.05 * m * np.sin(ph[4, 0])
    else:
        raise ValueError(f"unknown camera path {config.camera_path!r}")
    poses = []
    for k in range(n):
        R_cw = _look_rotation(yaw[k], pitch[k])
        poses.append(SE3Pose.from_rt(R_cw.T, -(R_cw.T @ c[k])))
    return poses


def mover_trajectory(mover: MoverSpec, timestamps: np.ndarray) -> list:
    T0 = mover.initial_pose()
    xi = np.asarray(mover.velocity, dtype=np.float64)
    return [T0.compose(se3_exp(t * xi)) for t in timestamps]


def _bump_params(config: SceneConfig):
    g = rng_mod.stream(config.seed, "scene", 0)
    return g.uniform(0, 2 * np.pi, size=2)


def bump_height(x, y, world: WorldSpec, phases):
    f = world.bump_frequency
    return world.bump_amplitude * np.sin(f * x + phases[0]) * np.sin(f * y + phases[1])


def _cast_room(c, dirs, world: WorldSpec, phases):
    """Nearest forward hit against the room box; the back wall is bumped."""
    t_best = np.full(len(dirs), np.inf)
    planes = [(0, -world.half_width), (0, world.half_width), (1, world.floor), (1, -world.ceiling), (2, world.front)]
    with np.errstate(divide="ignore", invalid="ignore"):
        for axis, val in planes:
            t = (val - c[axis]) / dirs[:, axis]
            t = np.where(t > Z_MIN, t, np.inf)
            t_best = np.minimum(t_best, t)
        # back wall z = back + h(x, y), solved by Newton from the flat hit
        t = (world.back - c[2]) / dirs[:, 2]
        f = world.bump_frequency
        for _ in range(12):
            x = c[0] + t * dirs[:, 0]
            y = c[1] + t * dirs[:, 1]
            h = bump_height(x, y, world, phases)
            hx = world.bump_amplitude * f * np.cos(f * x + phases[0]) * np.sin(f * y + phases[1])
            hy = world.bump_amplitude * f * np.sin(f * x + phases[0]) * np.cos(f * y + phases[1])
            g = c[2] + t * dirs[:, 2] - world.back - h
            dg = dirs[:, 2] - hx * dirs[:, 0] - hy * dirs[:, 1]
            t = t - g / dg
        t = np.where(t > Z_MIN, t, np.inf)
    return np.minimum(t_best, t)


def _cast_mover(mover: MoverSpec, T: SE3Pose, c, dirs):
    Tinv = T.inverse()
    o = Tinv.act(c)
    d = dirs @ Tinv.R.T
    half = 0.5 * mover.size
    with np.errstate(divide="ignore", invalid="ignore"):
        if mover.shape == "sphere":
            a = np.sum(d * d, axis=1)
            b = 2.0 * d @ o
            cc = o @ o - half * half
            disc = b * b - 4 * a * cc
            t = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2 * a)
            hit = (disc >= 0) & (t > Z_MIN)
        elif mover.shape == "box":
            t1 = (-half - o) / d
            t2 = (half - o) / d
            tmin = np.max(np.minimum(t1, t2), axis=1)
            tmax = np.min(np.maximum(t1, t2), axis=1)
            t = tmin
            hit = (tmax >= tmin) & (tmin > Z_MIN)
        else:
            raise ValueError(f"unknown mover shape {mover.shape!r}")
    return np.where(hit, t, np.inf)


def _inside_mover(mover: MoverSpec, T: SE3Pose, c) -> bool:
    p = T.inverse().act(c)
    half = 0.5 * mover.size
    if mover.shape == "sphere":
        return float(p @ p) <= half * half
    return bool(np.all(np.abs(p) <= half))


def validate_config(config: SceneConfig):
    """Raise ``ValueError`` naming the first offending key."""
    if config.n_frames < 2:
        raise ValueError("n_frames")
    if config.fps <= 0:
        raise ValueError("fps")
    if config.height < 2 or config.width < 2:
        raise ValueError("height" if config.height < 2 else "width")
    if config.focal <= 0:
        raise ValueError("focal")
    if config.camera_path not in CAMERA_PATHS:
        raise ValueError("camera_path")
    if config.feature_channels < 2:
        raise ValueError("feature_channels")
    for k, m in enumerate(config.movers):
        if m.shape not in ("box", "sphere"):
            raise ValueError(f"movers[{k}].shape")
        if not m.size > 0:
            raise ValueError(f"movers[{k}].size")
        if len(m.position) != 3:
            raise ValueError(f"movers[{k}].position")
        if len(m.rotation) != 3:
            raise ValueError(f"movers[{k}].rotation")
        if len(m.velocity) != 6:
            raise ValueError(f"movers[{k}].velocity")
    n = config.noise
    if n.corr_sigma < 0:
        raise ValueError("noise.corr_sigma")
    if not 0 <= n.outlier_frac < 1:
        raise ValueError("noise.outlier_frac")
    if n.outlier_sigma < 0:
        raise ValueError("noise.outlier_sigma")
    if n.conf_mode not in CONF_MODES:
        raise ValueError("noise.conf_mode")
    if n.depth_prior_sigma < 0:
        raise ValueError("noise.depth_prior_sigma")
    if n.depth_prior_scale_jitter <= -1:
        raise ValueError("noise.depth_prior_scale_jitter")
    f = config.features
    if f.static_noise_sigma < 0:
        raise ValueError("features.static_noise_sigma")
    if f.dynamic_mode not in ("decorrelated", "drifting"):
        raise ValueError("features.dynamic_mode")
    if f.drift_rate < 0:
        raise ValueError("features.drift_rate")


def generate_scene(config: SceneConfig) -> SyntheticSequence:
    """Ray cast every frame; deterministic in ``config`` (including its seed)."""
    validate_config(config)
    K = config.intrinsics
    timestamps = np.arange(config.n_frames) / config.fps
    poses = camera_trajectory(config)
    movers = [mover_trajectory(m, timestamps) for m in config.movers]
    phases = _bump_params(config)
    w = config.world
    H, W = K.shape
    depth = np.empty((config.n_frames, H, W))
    oid = np.empty((config.n_frames, H, W), dtype=np.int64)
    for k, G in enumerate(poses):
        c = G.center()
        if not (abs(c[0]) < w.half_width and -w.ceiling < c[1] < w.floor and w.front < c[2] < w.back - w.bump_amplitude):
            raise DegenerateSceneError(f"camera outside the room at frame {k}")
        for m, mover in enumerate(config.movers):
            if _inside_mover(mover, movers[m][k], c):
                raise DegenerateSceneError(f"camera inside mover {m} at frame {k}")
        dirs = K.rays @ G.R  # camera rays rotated to world; parameter equals camera depth
        t = _cast_room(c, dirs, w, phases)
        ids = np.full(len(dirs), -1, dtype=np.int64)
        for m, mover in enumerate(config.movers):
            tm = _cast_mover(mover, movers[m][k], c, dirs)
            closer = tm < t
            t = np.where(closer, tm, t)
            ids[closer] = m
        if not np.all(np.isfinite(t)):
            raise DegenerateSceneError(f"ray escaped the room at frame {k}")
        depth[k] = (1.0 / t).reshape(H, W)
        oid[k] = ids.reshape(H, W)
    mover_poses = [[movers[m][k] for m in range(len(config.movers))] for k in range(config.n_frames)]
    return SyntheticSequence(config, K, timestamps, poses, depth, oid >= 0, oid, mover_poses)


def true_correspondence(scene: SyntheticSequence, i: int, j: int):
    """Where each pixel of frame i truly appears in frame j (following mover motion).

    Returns ``(pixels, valid, rigid_pixels)``; ``rigid_pixels`` is the
    camera-motion-only warp of the same points.
    """
    K = scene.intrinsics
    Xw = scene.world_points(i).reshape(-1, 3)
    target = Xw.copy()
    ids = scene.object_id[i].reshape(-1)
    for m in range(len(scene.config.movers)):
        sel = ids == m
        if sel.any():
            Tb = scene.mover_poses[i][m].inverse().act(Xw[sel])
            target[sel] = scene.mover_poses[j][m].act(Tb)
    Gj = scene.gt_poses[j]
    pix, valid = project(Gj.act(target), K)
    valid &= K.in_bounds(pix)
    rigid, _ = project(Gj.act(Xw), K)
    H, W = K.shape
    return pix.reshape(H, W, 2), valid.reshape(H, W), rigid.reshape(H, W, 2)


def observe_correspondence(scene: SyntheticSequence, i: int, j: int, noise: ObservationNoise,
                           seed: int) -> EdgeObservation:
    """Noisy correspondence/confidence for edge (i, j), as a learned matcher would predict."""
    if i == j:
        raise ValueError("observation needs two distinct frames")
    truth, valid, _ = true_correspondence(scene, i, j)
    H, W = scene.intrinsics.shape
    g = rng_mod.stream(seed, "observation", i, j)
    eps = g.normal(size=(H, W, 2)) * noise.corr_sigma
    outlier = g.random(size=(H, W)) < noise.outlier_frac
    eps_out = g.normal(size=(H, W, 2)) * noise.outlier_sigma
    jitter = g.normal(size=(H, W, 2))
    eps = np.where(outlier[..., None], eps_out, eps)
    corr = truth + eps
    sigma_eff = np.where(outlier, noise.outlier_sigma, noise.corr_sigma)[..., None] * np.ones(2)
    if noise.conf_mode == "uninformative":
        conf = np.ones((H, W, 2))
    else:
        conf = 1.0 / (1.0 + sigma_eff**2)
        if noise.conf_mode == "noisy-informative":
            conf = conf * np.exp(0.3 * jitter)
        conf = np.where(valid[..., None], conf, 0.0)
    return EdgeObservation(i, j, corr, conf)


def depth_prior(scene: SyntheticSequence, frame: int, noise: ObservationNoise, seed: int) -> np.ndarray:
    """Monocular inverse-depth prior: scaled ground truth plus Gaussian noise, kept positive."""
    g = rng_mod.stream(seed, "depth_prior", frame)
    gt = scene.gt_inv_depth[frame]
    d = gt * (1.0 + noise.depth_prior_scale_jitter) + g.normal(size=gt.shape) * noise.depth_prior_sigma
    return np.maximum(d, 1e-3)
