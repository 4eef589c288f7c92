"""Keyframes and the directed co-visibility graph."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import FormatError, NoOverlapError
from .geometry import CameraIntrinsics, SE3Pose, relative_pose, rigid_correspondence

DEFAULT_MOTION_THRESHOLD = 2.4
DEFAULT_RADIUS = 3


def _arr_eq(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


@dataclass(eq=False)
class KeyframeState:
    id: int
    timestamp: float
    pose: SE3Pose
    inv_depth: np.ndarray
    uncertainty: np.ndarray
    features: np.ndarray | None = None
    depth_prior: np.ndarray | None = None

    def __eq__(self, other):
        if not isinstance(other, KeyframeState):
            return NotImplemented
        return (
            self.id == other.id
            and self.timestamp == other.timestamp
            and self.pose == other.pose
            and _arr_eq(self.inv_depth, other.inv_depth)
            and _arr_eq(self.uncertainty, other.uncertainty)
            and _arr_eq(self.features, other.features)
            and _arr_eq(self.depth_prior, other.depth_prior)
        )


@dataclass(eq=False)
class EdgeObservation:
    source: int
    target: int
    corr: np.ndarray  # (H, W, 2) predicted correspondence in the target frame
    confidence: np.ndarray  # (H, W, 2), per-component, >= 0

    def __post_init__(self):
        if self.source == self.target:
            raise ValueError("self-edge")
        if np.any(self.confidence < 0):
            raise ValueError("negative confidence")

    def __eq__(self, other):
        if not isinstance(other, EdgeObservation):
            return NotImplemented
        return (
            self.source == other.source
            and self.target == other.target
            and np.array_equal(self.corr, other.corr)
            and np.array_equal(self.confidence, other.confidence)
        )


class FrameGraph:
    """Ordered keyframes plus directed edges keyed by ``(source, target)``."""

    def __init__(self, intrinsics: CameraIntrinsics):
        self.intrinsics = intrinsics
        self.keyframes: dict[int, KeyframeState] = {}
        self.edges: dict[tuple[int, int], EdgeObservation] = {}

    def __len__(self):
        return len(self.keyframes)

    def __eq__(self, other):
        if not isinstance(other, FrameGraph):
            return NotImplemented
        return (
            self.intrinsics == other.intrinsics
            and list(self.keyframes) == list(other.keyframes)
            and all(self.keyframes[k] == other.keyframes[k] for k in self.keyframes)
            and set(self.edges) == set(other.edges)
            and all(self.edges[e] == other.edges[e] for e in self.edges)
        )

    def copy(self) -> "FrameGraph":
        return copy.deepcopy(self)

    @property
    def ids(self) -> list[int]:
        return list(self.keyframes)

    def latest(self) -> KeyframeState | None:
        if not self.keyframes:
            return None
        return self.keyframes[next(reversed(self.keyframes))]

    def append(self, frame: KeyframeState):
        last = self.latest()
        if last is not None and (frame.id <= last.id or frame.timestamp <= last.timestamp):
            raise ValueError("keyframe ids and timestamps must strictly increase")
        if frame.inv_depth.shape != self.intrinsics.shape:
            raise ValueError("inverse depth grid does not match intrinsics")
        self.keyframes[frame.id] = frame

    def add_edge(self, obs: EdgeObservation):
        if obs.source not in self.keyframes or obs.target not in self.keyframes:
            raise KeyError(f"edge ({obs.source}, {obs.target}) references a missing keyframe")
        self.edges[(obs.source, obs.target)] = obs

    def set_edges(self, observations: Iterable[EdgeObservation]):
        self.edges = {}
        for obs in observations:
            self.add_edge(obs)

    def to_text(self) -> str:
        lines = []
        for kf in self.keyframes.values():
            t = kf.pose.translation
            w, x, y, z = kf.pose.rotation
            lines.append(
                f"KF {kf.id} {kf.timestamp:.9g} {t[0]:.9g} {t[1]:.9g} {t[2]:.9g} {x:.9g} {y:.9g} {z:.9g} {w:.9g}"
            )
        for i, j in sorted(self.edges):
            lines.append(f"EDGE {i} {j}")
        return "\n".join(lines) + "\n"


def parse_graph_text(text: str):
    """Inverse of :meth:`FrameGraph.to_text`: returns ``(keyframes, edges)``.

    ``keyframes`` is a list of ``(id, timestamp, SE3Pose)``.
    """
    keyframes, edges = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "KF" and len(parts) == 10:
                vals = [float(p) for p in parts[2:]]
                pose = SE3Pose([vals[7], vals[4], vals[5], vals[6]], vals[1:4])
                keyframes.append((int(parts[1]), vals[0], pose))
            elif parts[0] == "EDGE" and len(parts) == 3:
                edges.append((int(parts[1]), int(parts[2])))
            else:
                raise ValueError(raw)
        except ValueError:
            raise FormatError(f"line {lineno}: malformed record {raw!r}") from None
    return keyframes, edges


def mean_flow_distance(frame_a: KeyframeState, frame_b: KeyframeState, K: CameraIntrinsics) -> float:
    """Mean rigid-warp displacement of frame_a's pixels into frame_b."""
    p, valid = rigid_correspondence(relative_pose(frame_a.pose, frame_b.pose), frame_a.inv_depth, K)
    if not valid.any():
        raise NoOverlapError(f"frames {frame_a.id} and {frame_b.id} share no valid pixels")
    disp = np.linalg.norm(p - K.grid, axis=-1)
    return float(disp[valid].mean())


def _pair_flow(graph: FrameGraph, i: int, j: int) -> float:
    try:
        return mean_flow_distance(graph.keyframes[i], graph.keyframes[j], graph.intrinsics)
    except NoOverlapError:
        return np.inf


def build_window_graph(graph: FrameGraph, window: Iterable[int], radius: int = DEFAULT_RADIUS,
                       max_flow: float = np.inf) -> list[tuple[int, int]]:
    """Directed pairs among ``window`` keyframes within ``radius`` keyframe steps
    whose mean flow (measured from the earlier frame) is below ``max_flow``.

    Both directions of every accepted pair are returned, sorted.
    """
    ids = sorted(window)
    pairs = []
    for a in range(len(ids)):
        for b in range(a + 1, min(len(ids), a + radius + 1)):
            i, j = ids[a], ids[b]
            if _pair_flow(graph, i, j) < max_flow:
                pairs += [(i, j), (j, i)]
    return sorted(pairs)


def build_global_graph(graph: FrameGraph, radius: int = 2, max_flow: float = 8.0) -> list[tuple[int, int]]:
    """All keyframe pairs within ``radius`` steps, plus farther pairs whose flow is below ``max_flow``."""
    ids = graph.ids
    pairs = []
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            i, j = ids[a], ids[b]
            if b - a <= radius or _pair_flow(graph, i, j) < max_flow:
                pairs += [(i, j), (j, i)]
    return sorted(pairs)


def add_keyframe(graph: FrameGraph, frame: KeyframeState, motion_threshold: float = DEFAULT_MOTION_THRESHOLD,
                 motion: float | None = None) -> bool:
    """Admit ``frame`` if it moved at least ``motion_threshold`` pixels from the latest keyframe.

    ``motion`` overrides the rigid-warp flow estimate, e.g. with the mean of a
    measured correspondence field. Accepted frames get their inverse depth
    reset to the depth prior when available and to 1.0 otherwise.
    """
    latest = graph.latest()
    if latest is not None:
        if motion is None:
            try:
                motion = mean_flow_distance(latest, frame, graph.intrinsics)
            except NoOverlapError:
                motion = np.inf
        if motion < motion_threshold:
            return False
    if frame.depth_prior is not None:
        frame.inv_depth = np.array(frame.depth_prior, dtype=np.float64)
    else:
        frame.inv_depth = np.ones(graph.intrinsics.shape)
    graph.append(frame)
    return True
