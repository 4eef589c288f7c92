import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from dynba.ba_solver import (
    D_FLOOR,
    BAConfig,
    NormalEquations,
    apply_update,
    assemble_normal_equations,
    ba_energy,
    ba_iterate,
    schur_solve,
    uncertainty_weights,
)
from dynba.errors import NonpositiveUncertaintyError, SingularSystemError
from dynba.frame_graph import EdgeObservation, FrameGraph, KeyframeState
from dynba.geometry import CameraIntrinsics, SE3Pose, relative_pose, rigid_correspondence, se3_exp, umeyama_sim3
from dynba.gradcheck import random_graph
from dynba.scene_sim import ObservationNoise, depth_prior, generate_scene, observe_correspondence, static_config

K4 = CameraIntrinsics(4.0, 4.0, 1.5, 1.5, 4, 4)


def two_frame_graph(rng, noise=0.3):
    g = FrameGraph(K4)
    g.append(KeyframeState(0, 0.0, SE3Pose.identity(), rng.uniform(0.4, 0.8, K4.shape), rng.uniform(0.5, 2, K4.shape),
                           depth_prior=rng.uniform(0.4, 0.8, K4.shape)))
    g.append(KeyframeState(1, 1.0, se3_exp(rng.normal(size=6) * 0.02), rng.uniform(0.4, 0.8, K4.shape),
                           rng.uniform(0.5, 2, K4.shape), depth_prior=rng.uniform(0.4, 0.8, K4.shape)))
    for i, j in ((0, 1), (1, 0)):
        p, _ = rigid_correspondence(relative_pose(g.keyframes[i].pose, g.keyframes[j].pose), g.keyframes[i].inv_depth, K4)
        g.add_edge(EdgeObservation(i, j, p + rng.normal(size=p.shape) * noise, rng.uniform(0.2, 1, K4.shape + (2,))))
    return g


def residual_vector(g, weights):
    out = []
    for (i, j), e in sorted(g.edges.items()):
        p, ok = rigid_correspondence(relative_pose(g.keyframes[i].pose, g.keyframes[j].pose), g.keyframes[i].inv_depth, K4)
        W = weights[(i, j)]
        out.append((np.sqrt(W) * np.where(ok[..., None], e.corr - p, 0.0)).reshape(-1))
    return np.concatenate(out)


def test_uncertainty_weights():
    rng = np.random.default_rng(0)
    e = EdgeObservation(0, 1, np.zeros(K4.shape + (2,)), rng.uniform(0, 1, K4.shape + (2,)))
    assert np.array_equal(uncertainty_weights(e, np.ones(K4.shape)), e.confidence)
    assert np.array_equal(uncertainty_weights(e, np.full(K4.shape, 2.0)), e.confidence / 2)
    u = rng.uniform(0.1, 3, K4.shape)
    W = uncertainty_weights(e, u)
    for v in range(4):
        for x in range(4):
            for c in range(2):
                assert abs(W[v, x, c] - e.confidence[v, x, c] / u[v, x]) <= 1e-15
    with pytest.raises(NonpositiveUncertaintyError):
        uncertainty_weights(e, np.zeros(K4.shape))


def test_energy_zero_and_hand_case():
    rng = np.random.default_rng(1)
    g = two_frame_graph(rng, noise=0.0)
    assert ba_energy(g, "plain", 0.0) == pytest.approx(0.0, abs=1e-20)
    h = FrameGraph(K4)
    h.append(KeyframeState(0, 0.0, SE3Pose.identity(), np.ones(K4.shape), np.ones(K4.shape)))
    h.append(KeyframeState(1, 1.0, SE3Pose.identity(), np.ones(K4.shape), np.ones(K4.shape)))
    corr = np.array(K4.grid)
    corr[0, 0] += [1.0, 2.0]
    conf = np.zeros(K4.shape + (2,))
    conf[0, 0] = 0.5
    h.add_edge(EdgeObservation(0, 1, corr, conf))
    assert ba_energy(h, "plain", 0.0) == pytest.approx(2.5, abs=1e-12)


def test_energy_loop_oracle():
    rng = np.random.default_rng(2)
    g = random_graph(rng, H=4, W=5, C=2)
    total = 0.0
    for (i, j), e in g.edges.items():
        a, b = g.keyframes[i], g.keyframes[j]
        Gij = relative_pose(a.pose, b.pose)
        for v in range(4):
            for u in range(5):
                ray = np.array([(u - g.intrinsics.cx) / g.intrinsics.fx, (v - g.intrinsics.cy) / g.intrinsics.fy, 1.0])
                X = Gij.R @ (ray / a.inv_depth[v, u]) + Gij.translation
                if X[2] <= 0.1:
                    continue
                p = np.array([g.intrinsics.fx * X[0] / X[2] + g.intrinsics.cx, g.intrinsics.fy * X[1] / X[2] + g.intrinsics.cy])
                if not (0 <= p[0] <= 4 and 0 <= p[1] <= 3):
                    continue
                r = e.corr[v, u] - p
                total += np.sum(e.confidence[v, u] / a.uncertainty[v, u] * r * r)
    prior = sum(np.sum((k.inv_depth - k.depth_prior) ** 2) for k in g.keyframes.values())
    assert ba_energy(g, "uncertainty", 0.05) == pytest.approx(total + 0.05 * prior, rel=1e-10)


def test_normal_equations_empty():
    g = FrameGraph(K4)
    g.append(KeyframeState(0, 0.0, SE3Pose.identity(), np.ones(K4.shape), np.ones(K4.shape)))
    ne = assemble_normal_equations(g)
    assert ne.B.size == 0 and ne.C.size == 0 and ne.v.size == 0


def test_normal_equations_against_numeric_jacobian():
    rng = np.random.default_rng(3)
    g = two_frame_graph(rng)
    weights = {p: np.array(e.confidence) for p, e in g.edges.items()}
    gamma = 0.1
    ne = assemble_normal_equations(g, weights, gamma)
    x_poses = [0, 1]
    n = 16
    h = 1e-6
    r0 = residual_vector(g, weights)
    cols = []
    for f in x_poses:
        kf = g.keyframes[f]
        base = kf.pose
        for a in range(6):
            e = np.zeros(6)
            e[a] = h
            kf.pose = se3_exp(e).compose(base)
            rp = residual_vector(g, weights)
            kf.pose = se3_exp(-e).compose(base)
            rm = residual_vector(g, weights)
            kf.pose = base
            cols.append(-(rp - rm) / (2 * h))
    for f in x_poses:
        kf = g.keyframes[f]
        for p in range(n):
            d0 = kf.inv_depth.copy()
            kf.inv_depth = d0.copy()
            kf.inv_depth.flat[p] += h
            rp = residual_vector(g, weights)
            kf.inv_depth = d0.copy()
            kf.inv_depth.flat[p] -= h
            rm = residual_vector(g, weights)
            kf.inv_depth = d0
            cols.append(-(rp - rm) / (2 * h))
    J = np.stack(cols, axis=1)  # Jacobian of the predicted pixels, scaled by sqrt(W)
    H = J.T @ J
    rhs = J.T @ r0
    Hd, bd = ne.dense()
    prior = np.zeros(2 * n)
    Ddiag = np.zeros(2 * n)
    for k, f in enumerate(x_poses):
        kf = g.keyframes[f]
        Ddiag[k * n:(k + 1) * n] = gamma
        prior[k * n:(k + 1) * n] = gamma * (kf.depth_prior - kf.inv_depth).reshape(-1)
    H[12:, 12:] += np.diag(Ddiag)
    rhs[12:] += prior
    assert np.linalg.norm(Hd - H) / np.linalg.norm(H) < 1e-5
    assert np.linalg.norm(bd - rhs) / np.linalg.norm(rhs) < 1e-5


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pose_block_symmetric(seed):
    g = random_graph(np.random.default_rng(seed), H=4, W=5, C=2)
    ne = assemble_normal_equations(g, "uncertainty", 0.05)
    assert np.max(np.abs(ne.B - ne.B.T)) < 1e-10


def random_system(rng, n_poses=3, P=32):
    A = rng.normal(size=(6 * n_poses, 6 * n_poses))
    B = A @ A.T + np.eye(6 * n_poses)
    E = rng.normal(size=(6 * n_poses, P)) * 0.2
    C = rng.uniform(1.0, 3.0, P)
    v, w = rng.normal(size=6 * n_poses), rng.normal(size=P)
    return NormalEquations(B, sp.csr_matrix(E), C, v, w, list(range(n_poses)), [], P)


def test_schur_dense_oracle():
    rng = np.random.default_rng(4)
    ne = random_system(rng)
    Hd, b = ne.dense()
    x = np.linalg.solve(Hd + 1e-3 * np.eye(len(Hd)), b)
    dxi, dd = schur_solve(ne, 1e-3)
    assert np.max(np.abs(np.r_[dxi, dd] - x)) / np.max(np.abs(x)) < 1e-8


def test_schur_decoupled_and_zero_rhs():
    rng = np.random.default_rng(5)
    ne = random_system(rng)
    ne.E = sp.csr_matrix(ne.E.shape)
    dxi, dd = schur_solve(ne)
    assert np.allclose(dxi, np.linalg.solve(ne.B, ne.v)) and np.allclose(dd, ne.w / ne.C)
    ne.v[:] = 0
    ne.w[:] = 0
    dxi, dd = schur_solve(ne)
    assert not dxi.any() and not dd.any()


def test_schur_singular():
    ne = NormalEquations(np.zeros((6, 6)), sp.csr_matrix((6, 2)), np.ones(2), np.ones(6), np.ones(2), [0], [], 2)
    with pytest.raises(SingularSystemError) as exc:
        schur_solve(ne)
    assert "condition" in str(exc.value)


def test_apply_update_rules():
    rng = np.random.default_rng(6)
    g = two_frame_graph(rng)
    before = g.copy()
    ne = assemble_normal_equations(g, "plain", 0.0, fixed_poses={0})
    apply_update(g, ne, np.zeros(6), np.zeros(32))
    assert g == before
    dd = np.zeros(32)
    dd[0] = -10.0
    xi = np.array([0.1, 0.0, 0.0, 0, 0, 0])
    apply_update(g, ne, xi, dd)
    assert g.keyframes[0].inv_depth.flat[0] == D_FLOOR
    assert np.allclose(g.keyframes[1].pose.matrix(), se3_exp(xi).compose(before.keyframes[1].pose).matrix())


def static_problem(n_frames, step=2, seed=0):
    cfg = static_config(0)
    cfg.noise = ObservationNoise(corr_sigma=0.0, depth_prior_sigma=0.0)
    scene = generate_scene(cfg)
    g = FrameGraph(scene.intrinsics)
    rng = np.random.default_rng(seed)
    ids = list(range(0, n_frames * step, step))
    for f in ids:
        pose = scene.gt_poses[f]
        if f != ids[0]:
            pose = se3_exp(rng.normal(size=6) * 0.05).compose(pose)
        dp = depth_prior(scene, f, cfg.noise, 0)
        g.append(KeyframeState(f, scene.timestamps[f], pose, dp.copy(), np.ones(scene.intrinsics.shape), depth_prior=dp))
    for i in ids:
        for j in ids:
            if i != j and abs(i - j) <= 3 * step:
                g.add_edge(observe_correspondence(scene, i, j, cfg.noise, 0))
    return scene, g


def keyframe_ate(scene, g):
    est = np.array([k.pose.center() for k in g.keyframes.values()])
    gt = np.array([scene.gt_poses[f].center() for f in g.ids])
    S = umeyama_sim3(est, gt)
    return float(np.sqrt(np.mean(np.sum((S.apply(est) - gt) ** 2, axis=1))))


def test_iterate_static_recovers_ground_truth():
    scene, g = static_problem(5)
    rep = ba_iterate(g, BAConfig(iters=20, fixed_poses={0}))
    assert keyframe_ate(scene, g) < 1e-5
    assert rep.iterations <= 20


def test_iterate_at_optimum_stays():
    scene, g = static_problem(3)
    for f in g.ids:
        g.keyframes[f].pose = scene.gt_poses[f]
    rep = ba_iterate(g, BAConfig(iters=3, fixed_poses={0}))
    assert max(rep.energies) < 1e-12
    assert all(s < 1e-6 for s in rep.step_norms[1:])


def test_iterate_energy_non_increasing():
    for seed in range(50):
        g = random_graph(np.random.default_rng(seed), H=4, W=5, C=2, pose_sigma=(0.05,) * 3 + (0.02,) * 3)
        rep = ba_iterate(g, BAConfig(iters=3, fixed_poses={0}), uncertainty_on=True)
        assert np.all(np.diff(rep.energies) <= 0)
