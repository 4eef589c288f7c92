"""Seeded end-to-end runs on the standard dynamic scene, shared by the
experiment scripts and the acceptance suite."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, replace

import numpy as np

from .frame_graph import FrameGraph, KeyframeState, build_window_graph
from .io import gt_trajectory
from .metrics import ate_rmse, uncertainty_auc
from .pipeline import AblationFlags, PipelineConfig, SyntheticSource, UncertaintyConfig, run_pipeline
from .scene_sim import generate_scene, standard_dynamic_config
from .uncertainty import AffineUncertaintyModel, UncertaintyProblem, gradient_step


@dataclass
class RunRecord:
    config: str
    seed: int
    ate: float
    auc: float
    seconds: float


def run_standard(seed: int, ablations=(), pipeline: PipelineConfig | None = None, corr_sigma=None,
                 feature_sigma=None, label: str | None = None) -> RunRecord:
    """One pipeline run; ``corr_sigma``/``feature_sigma`` override the scene noise."""
    t0 = time.perf_counter()
    scene_cfg = standard_dynamic_config(seed)
    if corr_sigma is not None:
        scene_cfg.noise = replace(scene_cfg.noise, corr_sigma=float(corr_sigma))
    if feature_sigma is not None:
        scene_cfg.features = replace(scene_cfg.features, static_noise_sigma=float(feature_sigma))
    scene = generate_scene(scene_cfg)
    cfg = replace(pipeline or PipelineConfig(), ablation=AblationFlags.from_names(ablations))
    res = run_pipeline(SyntheticSource(scene, seed=seed), cfg)
    ids = res.keyframe_ids
    auc = uncertainty_auc([res.uncertainty[f] for f in ids], [scene.dynamic_mask[f] for f in ids])
    ate = ate_rmse(res.keyframe_trajectory, gt_trajectory(scene))
    name = label or cfg.ablation.label()
    return RunRecord(name, seed, ate, auc, time.perf_counter() - t0)


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "seed", "ate_rmse", "auc", "seconds"])
    for r in records:
        w.writerow([r.config, r.seed, repr(r.ate), repr(r.auc), f"{r.seconds:.2f}"])
    return buf.getvalue()


def gt_window_problem(seed: int = 0, frames=tuple(range(10, 26, 2)), radius: int | None = None):
    """Ground-truth keyframes of the standard scene wired like a pipeline window."""
    scene = generate_scene(standard_dynamic_config(seed))
    src = SyntheticSource(scene, seed=seed)
    graph = FrameGraph(scene.intrinsics)
    H, W = scene.intrinsics.shape
    for f in frames:
        fr = src.frame(f)
        graph.append(KeyframeState(f, fr.timestamp, scene.gt_poses[f], scene.gt_inv_depth[f].copy(),
                                   np.ones((H, W)), features=fr.features, depth_prior=fr.depth_prior))
    radius = PipelineConfig().window_radius if radius is None else radius
    graph.set_edges(src.observe(i, j) for i, j in build_window_graph(graph, frames, radius))
    return scene, graph


def mean_uncertainty_trace(graph, gamma_prior: float, weight_decay: float, steps: int = 500,
                           lr: float | None = None) -> np.ndarray:
    """Mean of u over the window after each pipeline-style step (per-pixel mean gradient)."""
    lr = UncertaintyConfig().lr if lr is None else lr
    prob = UncertaintyProblem(graph)
    C = prob.features.shape[-1] - 1
    model = AffineUncertaintyModel.zeros(C, gamma_prior=gamma_prior, lr=lr, weight_decay=weight_decay)
    n_pixels = prob.features.shape[0] * prob.n
    out = [float(prob.fields(model).mean())]
    for _ in range(steps):
        _, g = prob.theta_gradient(model)
        gradient_step(model, g / n_pixels)
        out.append(float(prob.fields(model).mean()))
    return np.array(out)
