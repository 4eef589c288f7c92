"""The full tracking system: initialization, sliding-window frontend with
interleaved pose/depth and uncertainty optimization, global BA with the
uncertainty head frozen, and full-trajectory recovery by interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .ba_solver import BAConfig, ba_iterate
from .errors import ExtrapolationUnsupportedError, InitUnderflowError
from .features import SyntheticFeatureProvider
from .frame_graph import FrameGraph, KeyframeState, add_keyframe, build_global_graph, build_window_graph
from .geometry import SE3Pose, se3_exp, se3_interpolate, se3_log
from .metrics import Trajectory
from .scene_sim import ObservationNoise, depth_prior, observe_correspondence
from .uncertainty import (
    AffineUncertaintyModel,
    UncertaintyProblem,
    direct_field_step,
    gradient_step,
    map_uncertainty,
)

ABLATIONS = ("no_uba", "no_depth_prior", "coupled_similarity", "no_affine_map", "no_weight_decay", "no_prior_term")


@dataclass
class AblationFlags:
    no_uba: bool = False
    no_depth_prior: bool = False
    coupled_similarity: bool = False
    no_affine_map: bool = False
    no_weight_decay: bool = False
    no_prior_term: bool = False

    @classmethod
    def from_names(cls, names) -> "AblationFlags":
        names = list(names)
        bad = [n for n in names if n not in ABLATIONS]
        if bad:
            raise ValueError(f"unknown ablation {bad[0]!r}")
        return cls(**{n: True for n in names})

    def names(self) -> list[str]:
        return [n for n in ABLATIONS if getattr(self, n)]

    def label(self) -> str:
        return "+".join(self.names()) or "full"


@dataclass
class UncertaintyConfig:
    gamma_prior: float = 0.3
    lr: float = 2.0
    weight_decay: float = 1.25e-4  # per step; 32 steps decay as much as 4 steps at 1e-3
    direct_lr: float = 0.05  # per-pixel step size of the no_affine_map ablation
    reset_per_window: bool = False


@dataclass
class PipelineConfig:
    init_keyframes: int = 12
    window_size: int = 8
    anchor_keyframes: int = 2
    window_radius: int = 3
    motion_threshold: float = 2.4
    gn_steps_per_phase: int = 2
    gd_steps_per_phase: int = 32
    interleave_rounds: int = 4
    init_rounds: int = 8
    global_radius: int = 2
    global_max_flow: float = 8.0
    global_iters: int = 6
    ba: BAConfig = field(default_factory=BAConfig)
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if self.init_keyframes < 2:
            raise ValueError("init_keyframes must be >= 2")
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")
        for name in ("anchor_keyframes", "gn_steps_per_phase", "gd_steps_per_phase", "interleave_rounds",
                     "init_rounds", "global_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class FrameInput:
    index: int
    timestamp: float
    features: np.ndarray
    depth_prior: np.ndarray | None


class SyntheticSource:
    """Frames and pairwise observations of a simulated sequence.

    ``features`` and ``depth_priors`` may be callables ``frame -> array``
    (e.g. file readers); by default both are synthesized from the scene.
    Correspondence observations are seeded per edge, so they do not depend
    on the order in which edges are requested.
    """

    def __init__(self, scene, noise: ObservationNoise | None = None, seed: int = 0, features=None,
                 depth_priors=None):
        self.scene = scene
        self.noise = noise if noise is not None else scene.config.noise
        self.seed = seed
        self.features = features or SyntheticFeatureProvider(
            scene, scene.config.feature_channels, scene.config.features, seed
        )
        self.depth_priors = depth_priors or (lambda f: depth_prior(scene, f, self.noise, seed))
        self._cache = {}

    @property
    def intrinsics(self):
        return self.scene.intrinsics

    @property
    def timestamps(self) -> np.ndarray:
        return self.scene.timestamps

    def __len__(self):
        return self.scene.n_frames

    def frame(self, k: int) -> FrameInput:
        return FrameInput(k, float(self.timestamps[k]), np.asarray(self.features(k), dtype=np.float64),
                          np.asarray(self.depth_priors(k), dtype=np.float64))

    def observe(self, i: int, j: int, cache: bool = True):
        if (i, j) in self._cache:
            return self._cache[(i, j)]
        obs = observe_correspondence(self.scene, i, j, self.noise, self.seed)
        if cache:
            self._cache[(i, j)] = obs
        return obs


@dataclass
class TraceRecord:
    stage: str  # init, frontend, global
    keyframe: int  # newest keyframe when the record was made
    round: int
    phase: str  # ba or uncertainty
    step: int
    energy: float


@dataclass
class SessionResult:
    keyframe_ids: list
    keyframe_trajectory: Trajectory
    full_trajectory: Trajectory
    uncertainty: dict  # keyframe id -> (H, W) field
    trace: list
    theta: np.ndarray
    config: PipelineConfig
    theta_history: list = field(default_factory=list)  # (stage, keyframe, round, step, theta)


def observed_motion(obs) -> float:
    """Mean displacement of the observed correspondence over confident pixels."""
    H, W = obs.corr.shape[:2]
    grid = np.stack(np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64)), axis=-1)
    disp = np.linalg.norm(obs.corr - grid, axis=-1)
    ok = (obs.confidence.sum(axis=-1) > 0) & np.isfinite(disp)
    if not ok.any():
        return np.inf
    return float(disp[ok].mean())


class Session:
    """Single-threaded state machine over one frame graph."""

    def __init__(self, source, config: PipelineConfig):
        self.source = source
        self.config = config
        self.flags = config.ablation
        self.graph = FrameGraph(source.intrinsics)
        self.model = None
        self.trace: list[TraceRecord] = []
        self.next_frame = 0
        self.theta_history: list = []
        self._stage = "init"
        self._round = 0
        self._phase = "idle"
        self._window_started = set()

    def progress(self) -> str:
        """Where the session currently is, for error messages."""
        latest = self.graph.latest()
        kf = latest.id if latest is not None else -1
        return f"stage={self._stage} keyframe={kf} round={self._round} phase={self._phase}"

    # -- helpers ---------------------------------------------------------
    def _make_model(self, channels: int):
        u = self.config.uncertainty
        self.model = AffineUncertaintyModel.zeros(
            channels,
            gamma_prior=0.0 if self.flags.no_prior_term else u.gamma_prior,
            lr=u.lr,
            weight_decay=0.0 if self.flags.no_weight_decay else u.weight_decay,
        )

    def _ba_config(self, iters: int, fixed_poses=(), fixed_depths=()) -> BAConfig:
        first = self.graph.ids[0]
        return replace(
            self.config.ba,
            iters=max(iters, 1),
            gamma_d=0.0 if self.flags.no_depth_prior else self.config.ba.gamma_d,
            fixed_poses=frozenset(fixed_poses) | {first},
            fixed_depths=frozenset(fixed_depths),
        )

    def _set_edges(self, pairs):
        self.graph.set_edges(self.source.observe(i, j) for i, j in pairs)

    def _refresh_uncertainty(self, ids):
        if self.flags.no_uba or self.flags.no_affine_map:
            return
        for f in ids:
            kf = self.graph.keyframes[f]
            kf.uncertainty = map_uncertainty(self.model, kf.features)

    def _record(self, rnd, phase, energies):
        kf = self.graph.latest().id
        for s, e in enumerate(energies):
            self.trace.append(TraceRecord(self._stage, kf, rnd, phase, s, float(e)))

    def _new_keyframe(self, fr: FrameInput, pose: SE3Pose, force: bool, motion: float) -> bool:
        if self.model is None:
            self._make_model(fr.features.shape[-1])
        prior = None if self.flags.no_depth_prior else fr.depth_prior
        H, W = self.graph.intrinsics.shape
        kf = KeyframeState(fr.index, fr.timestamp, pose, np.ones((H, W)), np.full((H, W), np.log(2.0)),
                           features=fr.features, depth_prior=prior)
        if not add_keyframe(self.graph, kf, self.config.motion_threshold, np.inf if force else motion):
            return False
        if prior is None and len(self.graph) > 1:
            prev = self.graph.keyframes[self.graph.ids[-2]]
            kf.inv_depth = np.full((H, W), float(np.median(prev.inv_depth)))
        if not (self.flags.no_uba or self.flags.no_affine_map):
            kf.uncertainty = map_uncertainty(self.model, kf.features)
        return True

    def _motion_to_latest(self, k: int) -> float:
        latest = self.graph.latest()
        if latest is None:
            return np.inf
        return observed_motion(self.source.observe(latest.id, k, cache=False))

    def _extrapolated_pose(self, timestamp: float) -> SE3Pose:
        ids = self.graph.ids
        last = self.graph.keyframes[ids[-1]]
        if len(ids) < 2:
            return last.pose
        prev = self.graph.keyframes[ids[-2]]
        xi = se3_log(last.pose.compose(prev.pose.inverse()))
        scale = (timestamp - last.timestamp) / (last.timestamp - prev.timestamp)
        return se3_exp(scale * xi).compose(last.pose)

    # -- phases ----------------------------------------------------------
    def interleaved_optimize(self, window, fixed=(), rounds: int | None = None):
        """Alternate BA phases and uncertainty phases over the keyframes in ``window``.

        ``fixed`` keyframes take part in the edges but keep poses and depths.
        """
        cfg = self.config
        rounds = cfg.interleave_rounds if rounds is None else rounds
        if rounds == 0:
            return
        ids = sorted(set(window) | set(fixed))
        self._set_edges(build_window_graph(self.graph, ids, cfg.window_radius))
        if not self.graph.edges:
            return
        if self.flags.no_uba:
            if cfg.gn_steps_per_phase > 0:
                rep = ba_iterate(self.graph, self._ba_config(rounds * cfg.gn_steps_per_phase, fixed, fixed))
                self._record(0, "ba", rep.energies)
            return
        ba_cfg = self._ba_config(cfg.gn_steps_per_phase, fixed, fixed)
        for r in range(rounds):
            self._round = r
            self._refresh_uncertainty(ids)
            self._phase = "ba"
            if cfg.gn_steps_per_phase > 0:
                rep = ba_iterate(self.graph, ba_cfg, uncertainty_on=True)
                self._record(r, "ba", rep.energies)
            self._phase = "uncertainty"
            self._uncertainty_phase(r)
        self._phase = "idle"
        self._refresh_uncertainty(ids)

    def _uncertainty_phase(self, rnd: int):
        steps = self.config.gd_steps_per_phase
        if steps == 0:
            return
        prob = UncertaintyProblem(self.graph)
        coupled = self.flags.coupled_similarity
        energies = []
        if self.flags.no_affine_map:
            for _ in range(steps):
                direct_field_step(self.graph, self.config.uncertainty.direct_lr, self.model.gamma_prior, coupled,
                                  problem=prob)
            u = np.stack([self.graph.keyframes[f].uncertainty.reshape(-1) for f in prob.frame_ids])
            energies.append(prob.energy(u, self.model.gamma_prior, coupled))
        else:
            # the energy is a sum over every pixel of the window, so the step
            # is taken on its per-pixel mean to keep lr independent of size
            n_pixels = prob.features.shape[0] * prob.n
            kf = self.graph.latest().id
            for step in range(steps):
                _, g = prob.theta_gradient(self.model, coupled)
                gradient_step(self.model, g / n_pixels)
                self.theta_history.append((self._stage, kf, rnd, step, self.model.theta.copy()))
            energies.append(prob.energy(prob.fields(self.model), self.model.gamma_prior, coupled))
        self._record(rnd, "uncertainty", energies)

    def initialize(self) -> FrameGraph:
        cfg = self.config
        n = len(self.source)
        k = self.next_frame
        while len(self.graph) < cfg.init_keyframes:
            if k >= n:
                raise InitUnderflowError(
                    f"stream ended after {len(self.graph)} keyframes, {cfg.init_keyframes} needed"
                )
            fr = self.source.frame(k)
            latest = self.graph.latest()
            pose = SE3Pose.identity() if latest is None else latest.pose
            self._new_keyframe(fr, pose, force=False, motion=self._motion_to_latest(k))
            k += 1
        self.next_frame = k
        self._stage = "init"
        self.interleaved_optimize(self.graph.ids, rounds=cfg.init_rounds)
        self._stage = "frontend"
        return self.graph

    def frontend_step(self, k: int, force: bool = False) -> bool:
        """Offer frame ``k``; on acceptance run one windowed interleaved optimization."""
        cfg = self.config
        fr = self.source.frame(k)
        motion = 0.0 if force else self._motion_to_latest(k)
        if not force and motion < cfg.motion_threshold:
            return False
        pose = self._extrapolated_pose(fr.timestamp)
        if not self._new_keyframe(fr, pose, force=force, motion=motion):
            return False
        ids = self.graph.ids
        window = ids[-cfg.window_size:]
        start = len(ids) - len(window)
        anchors = ids[max(0, start - cfg.anchor_keyframes):start]
        if cfg.uncertainty.reset_per_window and window[0] not in self._window_started and self.model is not None:
            self._window_started.add(window[0])
            if not self.model.frozen:
                self.model.theta = np.zeros_like(self.model.theta)
        self._stage = "frontend"
        self.interleaved_optimize(window, fixed=anchors)
        return True

    def global_ba(self):
        cfg = self.config
        self._stage = "global"
        self._phase = "ba"
        if self.model is not None:
            self.model.frozen = True
        self._set_edges(build_global_graph(self.graph, cfg.global_radius, cfg.global_max_flow))
        self._refresh_uncertainty(self.graph.ids)
        if cfg.global_iters == 0 or not self.graph.edges:
            return None
        rep = ba_iterate(self.graph, self._ba_config(cfg.global_iters), uncertainty_on=not self.flags.no_uba)
        self._record(0, "ba", rep.energies)
        return rep

    def run(self, global_ba: bool = True) -> SessionResult:
        self.initialize()
        n = len(self.source)
        last_kf = self.graph.latest().id
        for k in range(self.next_frame, n):
            self.frontend_step(k, force=(k == n - 1 and last_kf != n - 1))
        self.next_frame = n
        if global_ba:
            self.global_ba()
        return self.result()

    def result(self) -> SessionResult:
        ids = self.graph.ids
        kf_traj = Trajectory(
            [self.graph.keyframes[f].timestamp for f in ids], [self.graph.keyframes[f].pose.inverse() for f in ids]
        )
        full = recover_full_trajectory(self.graph, self.source.timestamps)
        unc = {f: np.array(self.graph.keyframes[f].uncertainty) for f in ids}
        theta = self.model.theta.copy() if self.model is not None else np.zeros(0)
        return SessionResult(ids, kf_traj, full, unc, list(self.trace), theta, self.config, list(self.theta_history))


def recover_full_trajectory(graph: FrameGraph, timestamps) -> Trajectory:
    """Camera-to-world poses at ``timestamps``, SE(3)-interpolated between bracketing keyframes."""
    kfs = list(graph.keyframes.values())
    kt = np.array([kf.timestamp for kf in kfs])
    timestamps = np.asarray(timestamps, dtype=np.float64)
    if len(kfs) == 0 or np.any(timestamps < kt[0]) or np.any(timestamps > kt[-1]):
        raise ExtrapolationUnsupportedError("timestamps outside the keyframe time range")
    poses = []
    for t in timestamps:
        b = int(np.searchsorted(kt, t, side="left"))
        if kt[b] == t:
            poses.append(kfs[b].pose.inverse())
            continue
        a = b - 1
        s = (t - kt[a]) / (kt[b] - kt[a])
        poses.append(se3_interpolate(kfs[a].pose, kfs[b].pose, s).inverse())
    return Trajectory(timestamps, poses)


def run_pipeline(source, config: PipelineConfig | None = None, global_ba: bool = True) -> SessionResult:
    return Session(source, config or PipelineConfig()).run(global_ba)
