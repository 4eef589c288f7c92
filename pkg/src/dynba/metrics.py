"""Trajectory and uncertainty evaluation: Sim(3)-aligned ATE RMSE and ROC AUC."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateLabelsError, NoAssociationError
from .geometry import SE3Pose, umeyama_sim3


@dataclass
class Trajectory:
    """Timestamped camera-to-world poses, strictly increasing in time."""

    timestamps: np.ndarray
    poses: list = field(default_factory=list)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must strictly increase")

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.translation for p in self.poses])

    @classmethod
    def from_positions(cls, timestamps, positions) -> "Trajectory":
        return cls(timestamps, [SE3Pose.from_rt(np.eye(3), p) for p in np.asarray(positions, dtype=np.float64)])


def default_max_dt(gt: Trajectory) -> float:
    """Half the median frame interval of the reference trajectory."""
    if len(gt) < 2:
        return np.inf
    return 0.5 * float(np.median(np.diff(gt.timestamps)))


def associate(est: Trajectory, gt: Trajectory, max_dt: float | None = None) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp matching: candidate pairs within ``max_dt`` are
    taken in order of increasing time gap (ties by est index, then gt index),
    each pose used at most once. Returns sorted ``(est_index, gt_index)`` pairs.
    """
    if max_dt is None:
        max_dt = default_max_dt(gt)
    if len(est) and len(gt):
        dt = np.abs(est.timestamps[:, None] - gt.timestamps[None, :])
        ei, gi = np.nonzero(dt <= max_dt)
        order = np.lexsort((gi, ei, dt[ei, gi]))
    else:
        ei = gi = order = np.zeros(0, dtype=np.int64)
    used_e, used_g, pairs = set(), set(), []
    for k in order:
        a, b = int(ei[k]), int(gi[k])
        if a not in used_e and b not in used_g:
            used_e.add(a)
            used_g.add(b)
            pairs.append((a, b))
    if not pairs:
        raise NoAssociationError("no timestamps of the estimate fall within max_dt of the reference")
    return sorted(pairs)


def path_length(positions: np.ndarray) -> float:
    return float(np.sum(np.linalg.norm(np.diff(positions, axis=0), axis=1)))


def ate_rmse(est: Trajectory, gt: Trajectory, normalize: bool = False, max_dt: float | None = None) -> float:
    """Translational RMSE after Sim(3) alignment of ``est`` onto ``gt``.

    With ``normalize`` the reference is first scaled to unit path length.
    """
    pairs = associate(est, gt, max_dt)
    e_idx = [a for a, _ in pairs]
    g_idx = [b for _, b in pairs]
    P = est.positions[e_idx]
    Q = gt.positions[g_idx]
    if normalize:
        length = path_length(gt.positions)
        if length > 0:
            Q = Q / length
    S = umeyama_sim3(P, Q)
    err = S.apply(P) - Q
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def uncertainty_auc(u_fields, masks) -> float:
    """ROC AUC of pooled per-pixel uncertainty against the dynamic label (ties by midrank)."""
    u_fields, masks = list(u_fields), list(masks)
    if len(u_fields) != len(masks) or any(np.shape(u) != np.shape(m) for u, m in zip(u_fields, masks)):
        raise ValueError("uncertainty fields and masks must align")
    u = np.concatenate([np.asarray(x, dtype=np.float64).reshape(-1) for x in u_fields])
    y = np.concatenate([np.asarray(m, dtype=bool).reshape(-1) for m in masks])
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("AUC needs both dynamic and static pixels")
    ranks = rankdata(u)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


REPORT_COLUMNS = ("config", "ate_rmse", "ate_normalized", "auc")


@dataclass
class AblationRow:
    config: str
    ate_rmse: float
    ate_normalized: float
    auc: float = float("nan")


def ablation_report(results: dict, gt: Trajectory, masks: dict | None = None) -> list[AblationRow]:
    """One row per configuration name. ``results`` maps names to objects with
    ``keyframe_trajectory`` and ``uncertainty`` (keyframe id -> field);
    ``masks`` maps keyframe ids to dynamic masks for the AUC column.
    """
    rows = []
    for name, res in results.items():
        traj = res.keyframe_trajectory
        auc = float("nan")
        if masks is not None and res.uncertainty:
            ids = sorted(res.uncertainty)
            try:
                auc = uncertainty_auc([res.uncertainty[k] for k in ids], [masks[k] for k in ids])
            except DegenerateLabelsError:
                pass
        rows.append(AblationRow(name, ate_rmse(traj, gt), ate_rmse(traj, gt, normalize=True), auc))
    return rows


def report_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([r.config, repr(r.ate_rmse), repr(r.ate_normalized), repr(r.auc)])
    return buf.getvalue()


def parse_report_csv(text: str) -> list[AblationRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != REPORT_COLUMNS:
        raise ValueError(f"unexpected report header {header}")
    return [AblationRow(r[0], float(r[1]), float(r[2]), float(r[3])) for r in reader if r]
