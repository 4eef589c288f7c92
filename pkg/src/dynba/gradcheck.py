"""Finite-difference checks of the analytic uncertainty and BA gradients.

Each check builds a small random instance, evaluates the analytic gradient
and compares it with central differences of the corresponding energy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rng_mod
from .ba_solver import assemble_normal_equations, ba_energy
from .frame_graph import EdgeObservation, FrameGraph, KeyframeState
from .geometry import CameraIntrinsics, SE3Pose, se3_exp
from .uncertainty import AffineUncertaintyModel, UncertaintyProblem, softplus

CHANNELS = (4, 8, 16)
GAMMAS = (0.0, 0.01, 0.1)


@dataclass
class CheckResult:
    kind: str  # "uncertainty" or "ba"
    trial: int
    rel_err: float


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def random_graph(rng: np.random.Generator, n_frames: int = 3, H: int = 6, W: int = 8, C: int = 8,
                 pose_sigma=(0.3, 0.3, 0.1, 0.05, 0.05, 0.05)) -> FrameGraph:
    """Small graph whose warps push a fair share of pixels out of bounds."""
    K = CameraIntrinsics(6.0, 6.0, (W - 1) / 2.0, (H - 1) / 2.0, W, H)
    G = FrameGraph(K)
    for f in range(n_frames):
        pose = se3_exp(rng.normal(size=6) * np.asarray(pose_sigma)) if f else SE3Pose.identity()
        G.append(KeyframeState(f, float(f), pose, rng.uniform(0.3, 1.0, (H, W)), rng.uniform(0.5, 2.0, (H, W)),
                               features=rng.normal(size=(H, W, C)), depth_prior=rng.uniform(0.3, 1.0, (H, W))))
    grid = K.grid
    for i in range(n_frames):
        for j in range(n_frames):
            if i != j:
                corr = grid + rng.normal(size=(H, W, 2))
                G.add_edge(EdgeObservation(i, j, corr, rng.uniform(0.1, 1.0, (H, W, 2))))
    return G


def check_uncertainty_gradient(rng: np.random.Generator, C: int = 8, gamma: float = 0.1, h: float = 1e-6,
                               corrupt: bool = False) -> float:
    """Relative error of the analytic theta-gradient against central differences."""
    G = random_graph(rng, C=C)
    model = AffineUncertaintyModel(rng.normal(size=C + 1) * 0.3, gamma_prior=gamma)
    prob = UncertaintyProblem(G)
    _, g = prob.theta_gradient(model)
    if corrupt:
        g = g * 1.01
    fd = np.zeros_like(g)
    for k in range(len(g)):
        tp, tm = model.theta.copy(), model.theta.copy()
        tp[k] += h
        tm[k] -= h
        ep = prob.energy(softplus(prob.features @ tp), gamma)
        em = prob.energy(softplus(prob.features @ tm), gamma)
        fd[k] = (ep - em) / (2 * h)
    return rel_error(g, fd)


def ba_fd_gradient(G: FrameGraph, gamma_d: float, weights="uncertainty", h: float = 1e-6):
    """Central differences of the BA energy in left pose twists and inverse depths."""
    ids = G.ids
    gp, gd = [], []
    for f in ids:
        kf = G.keyframes[f]
        pose0 = kf.pose
        for a in range(6):
            e = np.zeros(6)
            e[a] = h
            kf.pose = se3_exp(e).compose(pose0)
            ep = ba_energy(G, weights, gamma_d)
            kf.pose = se3_exp(-e).compose(pose0)
            em = ba_energy(G, weights, gamma_d)
            gp.append((ep - em) / (2 * h))
        kf.pose = pose0
    for f in ids:
        kf = G.keyframes[f]
        d0 = kf.inv_depth.copy()
        flat = kf.inv_depth.reshape(-1)
        for p in range(flat.size):
            flat[p] = d0.reshape(-1)[p] + h
            ep = ba_energy(G, weights, gamma_d)
            flat[p] = d0.reshape(-1)[p] - h
            em = ba_energy(G, weights, gamma_d)
            flat[p] = d0.reshape(-1)[p]
            gd.append((ep - em) / (2 * h))
    return np.array(gp), np.array(gd)


def check_ba_gradient(rng: np.random.Generator, gamma_d: float = 0.05, corrupt: bool = False) -> float:
    """Relative error of the assembled (v, w) against ``-0.5 *`` the energy gradient."""
    G = random_graph(rng, H=4, W=5, C=2, pose_sigma=(0.05, 0.05, 0.05, 0.02, 0.02, 0.02))
    ne = assemble_normal_equations(G, "uncertainty", gamma_d)
    vw = np.concatenate([ne.v, ne.w])
    if corrupt:
        vw = vw * 1.01
    gp, gd = ba_fd_gradient(G, gamma_d)
    return rel_error(vw, -0.5 * np.concatenate([gp, gd]))


def run_checks(trials: int, seed: int = 0, corrupt: bool = False) -> list[CheckResult]:
    """``trials`` uncertainty checks plus ``trials`` BA checks, cycling channels and priors."""
    out = []
    for t in range(trials):
        rng = rng_mod.stream(seed, "gradcheck", t)
        C = CHANNELS[t % len(CHANNELS)]
        gamma = GAMMAS[(t // len(CHANNELS)) % len(GAMMAS)]
        out.append(CheckResult("uncertainty", t, check_uncertainty_gradient(rng, C, gamma, corrupt=corrupt)))
        out.append(CheckResult("ba", t, check_ba_gradient(rng, corrupt=corrupt)))
    return out
