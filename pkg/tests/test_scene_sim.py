import numpy as np
import pytest

from dynba.errors import DegenerateSceneError
from dynba.geometry import relative_pose, rigid_correspondence
from dynba.scene_sim import (
    MoverSpec,
    ObservationNoise,
    SceneConfig,
    depth_prior,
    generate_scene,
    observe_correspondence,
    standard_dynamic_config,
    static_config,
    true_correspondence,
    validate_config,
)


def test_static_scene_has_no_dynamic_pixels():
    s = generate_scene(static_config(0))
    assert not s.dynamic_mask.any() and (s.object_id == -1).all()
    assert s.gt_inv_depth.shape == (60, 30, 40) and np.all(s.gt_inv_depth > 0)


def test_standard_scene_dynamic_fraction():
    s = generate_scene(standard_dynamic_config(0))
    frac = s.dynamic_mask.mean()
    assert 0.1 <= frac <= 0.3


def test_generation_deterministic():
    a = generate_scene(standard_dynamic_config(3))
    b = generate_scene(standard_dynamic_config(3))
    assert np.array_equal(a.gt_inv_depth, b.gt_inv_depth) and np.array_equal(a.object_id, b.object_id)
    assert all(p == q for p, q in zip(a.gt_poses, b.gt_poses))


def crossing_config():
    return SceneConfig(n_frames=30, camera_path="lateral", path_magnitude=0.0,
                       movers=[MoverSpec("sphere", 0.8, (-3.2, 0.0, 3.0), velocity=(2.0, 0, 0, 0, 0, 0))])


def test_crossing_mover_matches_ray_cast_oracle():
    cfg = crossing_config()
    s = generate_scene(cfg)
    room = generate_scene(SceneConfig(n_frames=30, camera_path="lateral", path_magnitude=0.0))
    counts = s.dynamic_mask.reshape(30, -1).sum(axis=1)
    peak = int(np.argmax(counts))
    assert counts[0] == 0 and counts[-1] == 0 and counts[peak] > 0
    # one contiguous visible interval (pixel aliasing jitters the plateau)
    seen = np.flatnonzero(counts)
    assert np.array_equal(seen, np.arange(seen[0], seen[-1] + 1))
    K = s.intrinsics
    for k in (peak - 3, peak, peak + 3):
        centre = np.array([-3.2 + 2.0 * s.timestamps[k], 0.0, 3.0])
        c = s.gt_poses[k].center()
        expect = np.zeros(K.shape, bool)
        for v in range(K.height):
            for u in range(K.width):
                d = s.gt_poses[k].R.T @ np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
                oc = c - centre
                a, b, cc = d @ d, 2 * d @ oc, oc @ oc - 0.16
                disc = b * b - 4 * a * cc
                if disc >= 0:
                    t = (-b - np.sqrt(disc)) / (2 * a)
                    expect[v, u] = 0.1 < t < 1.0 / room.gt_inv_depth[k, v, u]
        assert np.array_equal(expect, s.dynamic_mask[k])


def test_observation_static_exact():
    cfg = static_config(0)
    noise = ObservationNoise(corr_sigma=0.0)
    s = generate_scene(cfg)
    obs = observe_correspondence(s, 4, 7, noise, 0)
    p, ok = rigid_correspondence(relative_pose(s.gt_poses[4], s.gt_poses[7]), s.gt_inv_depth[4], s.intrinsics)
    conf_ok = obs.confidence[..., 0] > 0
    assert np.array_equal(conf_ok, ok)
    assert np.max(np.abs(obs.corr[ok] - p[ok])) < 1e-9
    assert np.allclose(obs.confidence[ok], 1.0)


def test_observation_lateral_mover_displacement():
    cfg = SceneConfig(n_frames=10, camera_path="lateral", path_magnitude=0.0,
                      movers=[MoverSpec("box", 0.8, (0.0, 0.0, 3.0), velocity=(0.5, 0, 0, 0, 0, 0))])
    s = generate_scene(cfg)
    obs = observe_correspondence(s, 2, 3, ObservationNoise(corr_sigma=0.0), 0)
    _, _, rigid = true_correspondence(s, 2, 3)
    dyn = s.dynamic_mask[2] & (obs.confidence[..., 0] > 0)
    Z = 1.0 / s.gt_inv_depth[2][dyn]
    shift = obs.corr[dyn] - rigid[dyn]
    assert np.allclose(shift[:, 0], s.intrinsics.fx * 0.5 * 0.1 / Z) and np.allclose(shift[:, 1], 0, atol=1e-12)


def test_dynamic_mask_consistency():
    s = generate_scene(standard_dynamic_config(1))
    for i, j in ((5, 8), (20, 21)):
        truth, valid, rigid = true_correspondence(s, i, j)
        moved = valid & (np.linalg.norm(truth - rigid, axis=-1) > 1e-6)
        assert np.array_equal(moved, valid & s.dynamic_mask[i])


def test_outlier_fraction():
    s = generate_scene(static_config(0))
    noise = ObservationNoise(corr_sigma=0.25, outlier_frac=0.1)
    truth, valid, _ = true_correspondence(s, 10, 12)
    fr = []
    for seed in range(5):
        obs = observe_correspondence(s, 10, 12, noise, seed)
        err = np.abs(obs.corr - truth).max(axis=-1)
        fr.append(np.mean(err[valid] > 3 * 0.25))
    assert abs(np.mean(fr) - 0.1) < 0.02


def test_observation_needs_two_frames():
    s = generate_scene(static_config(0))
    with pytest.raises(ValueError):
        observe_correspondence(s, 3, 3, ObservationNoise(), 0)


def test_depth_prior_rules():
    s = generate_scene(static_config(0, n_frames=4))
    assert np.array_equal(depth_prior(s, 1, ObservationNoise(depth_prior_sigma=0.0), 0), s.gt_inv_depth[1])
    d = depth_prior(s, 1, ObservationNoise(depth_prior_sigma=0.0, depth_prior_scale_jitter=0.1), 0)
    assert np.allclose(d / s.gt_inv_depth[1], 1.1)
    noisy = ObservationNoise(depth_prior_sigma=0.5)
    assert all(depth_prior(s, seed % 4, noisy, seed).min() > 0 for seed in range(10_000))


def test_validation_names_key():
    cfg = standard_dynamic_config(0)
    cfg.movers[0].size = -1.0
    with pytest.raises(ValueError, match=r"movers\[0\]\.size"):
        validate_config(cfg)
    with pytest.raises(ValueError, match="camera_path"):
        validate_config(SceneConfig(camera_path="loop"))
    with pytest.raises(ValueError, match="noise.conf_mode"):
        validate_config(SceneConfig(noise=ObservationNoise(conf_mode="x")))


def test_camera_inside_mover_is_degenerate():
    cfg = SceneConfig(n_frames=3, camera_path="lateral", path_magnitude=0.0, movers=[MoverSpec("box", 1.0, (0, 0, 0))])
    with pytest.raises(DegenerateSceneError):
        generate_scene(cfg)
