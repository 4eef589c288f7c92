"""Confidence- and uncertainty-weighted dense bundle adjustment.

Residuals are ``r = p* - p_ij`` per pixel and per image axis. Each directed
edge contributes ``sum W * r**2`` where ``W`` is the edge confidence, divided
by the source frame's dynamic uncertainty when uncertainty weighting is on.
An optional depth prior adds ``gamma_d * sum (d - D)**2`` per frame.

The Gauss-Newton system is kept in block form: a dense pose block ``B``, a
sparse pose/depth coupling ``E`` and the diagonal depth block ``C``. Depths
are eliminated with the Schur complement before the pose solve.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import NonpositiveUncertaintyError, SingularSystemError
from .frame_graph import EdgeObservation, FrameGraph
from .geometry import se3_exp, warp_jacobians, warp_rays

D_FLOOR = 1e-4


@dataclass
class BAConfig:
    gamma_d: float = 0.05
    lm_damping: float = 1e-4
    iters: int = 2
    fixed_poses: frozenset = frozenset()
    fixed_depths: frozenset = frozenset()
    min_depth_weight: float = 1e-8
    max_retries: int = 12

    def __post_init__(self):
        if self.gamma_d < 0 or self.lm_damping < 0 or self.iters < 1 or self.min_depth_weight <= 0:
            raise ValueError(f"invalid BAConfig {self}")
        self.fixed_poses = frozenset(self.fixed_poses)
        self.fixed_depths = frozenset(self.fixed_depths)


def uncertainty_weights(edge: EdgeObservation, u_i: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel, per-axis weights ``w_ij / u_i``; zero where ``valid`` is false."""
    u_i = np.asarray(u_i, dtype=np.float64)
    if np.any(u_i <= 0):
        raise NonpositiveUncertaintyError(f"uncertainty of frame {edge.source} has non-positive entries")
    out = edge.confidence / u_i[..., None]
    if valid is not None:
        out = np.where(valid[..., None], out, 0.0)
    return out


class _EdgeStack:
    """Edges of a graph stacked into arrays, in sorted ``(source, target)`` order."""

    def __init__(self, graph: FrameGraph, weights):
        self.graph = graph
        self.pairs = sorted(graph.edges)
        self.frame_ids = sorted({f for p in self.pairs for f in p})
        self.index = {f: k for k, f in enumerate(self.frame_ids)}
        self.src = np.array([self.index[i] for i, _ in self.pairs], dtype=np.int64)
        self.dst = np.array([self.index[j] for _, j in self.pairs], dtype=np.int64)
        n = graph.intrinsics.width * graph.intrinsics.height
        self.n = n
        if self.pairs:
            self.corr = np.stack([graph.edges[p].corr.reshape(n, 2) for p in self.pairs])
            self.weights = np.stack([_resolve_weights(graph, p, weights).reshape(n, 2) for p in self.pairs])
        else:
            self.corr = np.zeros((0, n, 2))
            self.weights = np.zeros((0, n, 2))

    def state(self):
        kfs = [self.graph.keyframes[f] for f in self.frame_ids]
        R = np.stack([kf.pose.R for kf in kfs]) if kfs else np.zeros((0, 3, 3))
        t = np.stack([kf.pose.translation for kf in kfs]) if kfs else np.zeros((0, 3))
        d = np.stack([kf.inv_depth.reshape(-1) for kf in kfs]) if kfs else np.zeros((0, self.n))
        return R, t, d

    def warp(self, with_jacobians=False):
        K = self.graph.intrinsics
        R, t, d = self.state()
        Ri, Rj = R[self.src], R[self.dst]
        Rij = Rj @ np.swapaxes(Ri, -1, -2)
        tij = t[self.dst] - np.einsum("eij,ej->ei", Rij, t[self.src])
        ds = d[self.src]
        Y, pix, valid = warp_rays(Rij, tij, ds, K.rays, K)
        W = np.where(valid[..., None], self.weights, 0.0)
        r = np.where(valid[..., None], self.corr - pix, 0.0)
        if not with_jacobians:
            return r, W
        Ji, Jj, Jd = warp_jacobians(Y, ds, Rij, tij, K)
        return r, W, Ji, Jj, Jd


def _resolve_weights(graph: FrameGraph, pair, weights):
    if weights == "plain":
        return graph.edges[pair].confidence
    if weights == "uncertainty":
        return uncertainty_weights(graph.edges[pair], graph.keyframes[pair[0]].uncertainty)
    return weights[pair]


def compute_weights(graph: FrameGraph, mode: str = "plain") -> dict:
    """BAWeights for every edge: ``mode`` is ``"plain"`` or ``"uncertainty"``."""
    return {p: np.array(_resolve_weights(graph, p, mode)) for p in sorted(graph.edges)}


def _depth_term(graph: FrameGraph, frame_ids, gamma_d: float) -> float:
    if gamma_d == 0:
        return 0.0
    total = 0.0
    for f in frame_ids:
        kf = graph.keyframes[f]
        if kf.depth_prior is not None:
            total += float(np.sum((kf.inv_depth - kf.depth_prior) ** 2))
    return gamma_d * total


def ba_energy(graph: FrameGraph, weights_mode="plain", gamma_d: float = 0.0) -> float:
    """Weighted correspondence energy plus depth regularization over frames touched by edges.

    ``weights_mode`` is ``"plain"``, ``"uncertainty"`` or a BAWeights dict.
    """
    return _stack_energy(_EdgeStack(graph, weights_mode), gamma_d)


def _stack_energy(stack, gamma_d: float) -> float:
    if not stack.pairs:
        return 0.0
    r, W = stack.warp()
    return float(np.sum(W * r * r)) + _depth_term(stack.graph, stack.frame_ids, gamma_d)


@dataclass
class NormalEquations:
    B: np.ndarray
    E: np.ndarray | sp.spmatrix  # pose-depth coupling; assembled dense, sparse accepted
    C: np.ndarray
    v: np.ndarray
    w: np.ndarray
    pose_ids: list = field(default_factory=list)
    depth_ids: list = field(default_factory=list)
    n_pixels: int = 0

    @property
    def n_poses(self):
        return len(self.pose_ids)

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Full ``[[B, E], [E^T, diag C]]`` matrix and stacked right-hand side."""
        E = _dense(self.E)
        H = np.block([[self.B, E], [E.T, np.diag(self.C)]])
        return H, np.concatenate([self.v, self.w])


def _dense(E) -> np.ndarray:
    return E.toarray() if sp.issparse(E) else np.asarray(E)


def assemble_normal_equations(graph: FrameGraph, weights="plain", gamma_d: float = 0.0,
                              fixed_poses=(), fixed_depths=(), stack=None) -> NormalEquations:
    """Gauss-Newton normal equations of :func:`ba_energy` at the current state.

    Pose and depth variables of fixed frames are dropped from the system.
    """
    stack = _EdgeStack(graph, weights) if stack is None else stack
    n = stack.n
    pose_ids = [f for f in stack.frame_ids if f not in fixed_poses]
    depth_ids = [f for f in stack.frame_ids if f not in fixed_depths]
    pose_col = np.full(len(stack.frame_ids), -1, dtype=np.int64)
    depth_off = np.full(len(stack.frame_ids), -1, dtype=np.int64)
    for k, f in enumerate(pose_ids):
        pose_col[stack.index[f]] = k
    for k, f in enumerate(depth_ids):
        depth_off[stack.index[f]] = k * n
    N, P = len(pose_ids), len(depth_ids) * n
    B = np.zeros((6 * N, 6 * N))
    v = np.zeros(6 * N)
    C = np.zeros(P)
    w = np.zeros(P)
    E = np.zeros((6 * N, P))

    if stack.pairs:
        r, W, Ji, Jj, Jd = stack.warp(with_jacobians=True)
        n_e = len(stack.pairs)
        Jpose = {"i": Ji.reshape(n_e, 2 * n, 6), "j": Jj.reshape(n_e, 2 * n, 6)}
        Wf = W.reshape(n_e, 2 * n)
        Wr = (Wf * r.reshape(n_e, 2 * n))[..., None]
        WJd = W * Jd  # (E, n, 2)
        ends = {"i": pose_col[stack.src], "j": pose_col[stack.dst]}
        for a in "ij":
            JaT = np.swapaxes(Jpose[a], 1, 2)
            ga = (JaT @ Wr)[..., 0]
            for b in "ij":
                blk = JaT @ (Jpose[b] * Wf[..., None])
                for e in range(n_e):
                    ca, cb = ends[a][e], ends[b][e]
                    if ca >= 0 and cb >= 0:
                        B[6 * ca : 6 * ca + 6, 6 * cb : 6 * cb + 6] += blk[e]
            for e in range(n_e):
                ca = ends[a][e]
                if ca >= 0:
                    v[6 * ca : 6 * ca + 6] += ga[e]

        offs = depth_off[stack.src]
        has_depth = offs >= 0
        if has_depth.any():
            sel = np.nonzero(has_depth)[0]
            didx = (offs[sel][:, None] + np.arange(n)[None, :]).reshape(-1)
            C += np.bincount(didx, weights=np.sum(WJd[sel] * Jd[sel], axis=-1).reshape(-1), minlength=P)
            w += np.bincount(didx, weights=np.sum(WJd[sel] * r[sel], axis=-1).reshape(-1), minlength=P)
            for a, J in (("i", Ji), ("j", Jj)):
                # coupling between pose end `a` and the source depths, (E, n, 6)
                cpl = J[..., 0, :] * WJd[..., 0, None] + J[..., 1, :] * WJd[..., 1, None]
                for e in sel:
                    ca = ends[a][e]
                    if ca >= 0:
                        E[6 * ca : 6 * ca + 6, offs[e] : offs[e] + n] += cpl[e].T

    if gamma_d > 0:
        for k, f in enumerate(depth_ids):
            kf = graph.keyframes[f]
            if kf.depth_prior is not None:
                s = slice(k * n, (k + 1) * n)
                C[s] += gamma_d
                w[s] += gamma_d * (kf.depth_prior.reshape(-1) - kf.inv_depth.reshape(-1))

    B = 0.5 * (B + B.T)
    return NormalEquations(B, E, C, v, w, pose_ids, depth_ids, n)


def schur_solve(ne: NormalEquations, lm_damping: float = 0.0):
    """Solve the damped block system by eliminating the diagonal depth block.

    ``lm_damping`` is added to the diagonals of ``B`` and ``C`` first.
    """
    Cd = ne.C + lm_damping
    if np.any(Cd <= 0):
        raise SingularSystemError("depth block has non-positive diagonal entries", np.inf)
    C_inv = 1.0 / Cd
    if ne.B.shape[0] == 0:
        return np.zeros(0), C_inv * ne.w
    # the pose block is small, so the reduction is done densely
    Ed = _dense(ne.E)
    S = ne.B + lm_damping * np.eye(ne.B.shape[0]) - (Ed * C_inv) @ Ed.T
    S = 0.5 * (S + S.T)
    rhs = ne.v - Ed @ (C_inv * ne.w)
    try:
        factor = scipy.linalg.cho_factor(S)
    except np.linalg.LinAlgError:
        raise SingularSystemError("reduced pose system is not positive definite", np.linalg.cond(S)) from None
    diag = np.abs(np.diag(factor[0]))
    if diag.min() <= 1e-9 * diag.max():
        raise SingularSystemError("reduced pose system is numerically singular", np.linalg.cond(S))
    delta_xi = scipy.linalg.cho_solve(factor, rhs)
    delta_d = C_inv * (ne.w - Ed.T @ delta_xi)
    return delta_xi, delta_d


def apply_update(graph: FrameGraph, layout: NormalEquations, delta_xi: np.ndarray, delta_d: np.ndarray,
                 d_floor: float = D_FLOOR):
    """Left-multiply pose increments and add clamped inverse-depth increments."""
    n = layout.n_pixels
    for k, f in enumerate(layout.pose_ids):
        kf = graph.keyframes[f]
        kf.pose = se3_exp(delta_xi[6 * k : 6 * k + 6]).compose(kf.pose)
    for k, f in enumerate(layout.depth_ids):
        kf = graph.keyframes[f]
        step = delta_d[k * n : (k + 1) * n].reshape(kf.inv_depth.shape)
        kf.inv_depth = np.maximum(kf.inv_depth + step, d_floor)


@dataclass
class ConvergenceReport:
    energies: list = field(default_factory=list)
    dampings: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    iterations: int = 0
    terminated_by: str = "iters"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("iter,energy,damping,step_norm\n")
        for k, (e, m, s) in enumerate(zip(self.energies, self.dampings, self.step_norms)):
            buf.write(f"{k},{e:.17g},{m:.17g},{s:.17g}\n")
        return buf.getvalue()


def _snapshot(graph, ids):
    return {f: (graph.keyframes[f].pose, graph.keyframes[f].inv_depth) for f in ids}


def _restore(graph, snap):
    for f, (pose, d) in snap.items():
        graph.keyframes[f].pose = pose
        graph.keyframes[f].inv_depth = d


def ba_iterate(graph: FrameGraph, config: BAConfig, uncertainty_on: bool = False) -> ConvergenceReport:
    """Damped Gauss-Newton on the current edge set.

    A step that raises the energy is undone and retried with ten times the damping;
    if ``max_retries`` retries all fail the state is left untouched and the
    run stops with ``terminated_by="stalled"``. Damping drops tenfold (down to
    the configured value) after each accepted step.
    """
    mode = "uncertainty" if uncertainty_on else "plain"
    # edges and weights stay fixed for the whole call, only the state moves
    stack = _EdgeStack(graph, mode)
    energy = _stack_energy(stack, config.gamma_d)
    report = ConvergenceReport([energy], [config.lm_damping], [0.0])
    mu = config.lm_damping
    for it in range(config.iters):
        ne = assemble_normal_equations(graph, mode, config.gamma_d, config.fixed_poses, config.fixed_depths, stack)
        ne.C = np.maximum(ne.C, config.min_depth_weight)
        snap = _snapshot(graph, set(ne.pose_ids) | set(ne.depth_ids))
        accepted = False
        for _ in range(config.max_retries + 1):
            dxi, dd = schur_solve(ne, mu)
            apply_update(graph, ne, dxi, dd)
            new_energy = _stack_energy(stack, config.gamma_d)
            if new_energy <= energy:
                accepted = True
                break
            _restore(graph, snap)
            mu = 10.0 * mu if mu > 0 else 1e-12
        if not accepted:
            report.terminated_by = "stalled"
            break
        step = float(np.sqrt(dxi @ dxi + dd @ dd))
        energy = new_energy
        report.energies.append(energy)
        report.dampings.append(mu)
        report.step_norms.append(step)
        report.iterations = it + 1
        mu = max(0.1 * mu, config.lm_damping)
        if step == 0.0:
            report.terminated_by = "converged"
            break
    return report
