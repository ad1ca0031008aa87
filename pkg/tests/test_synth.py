import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualseg.errors import ConfigError
from dualseg.geometry import Camera, project_points
from dualseg.synth import (CameraConfig, LabeledScene, SceneConfig, generate_scene, render_view,
                           render_views, split_dataset)


def _scene(points, labels, colors=None, n_classes=3):
    points = np.asarray(points, dtype=np.float64)
    colors = np.full(points.shape, 0.5) if colors is None else np.asarray(colors, dtype=np.float64)
    return LabeledScene(points, colors, np.asarray(labels), "s", 0, n_classes)


def _axis_camera(size=9, f=4.0):
    c = (size - 1) / 2
    return Camera(f, f, c, c, np.eye(3), np.zeros(3), size, size)


def test_generation_is_deterministic():
    a, b = generate_scene(7), generate_scene(7)
    assert a.points.tobytes() == b.points.tobytes()
    assert a.colors.tobytes() == b.colors.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    assert generate_scene(8).points.tobytes() != a.points.tobytes()


def test_scene_invariants():
    cfg = SceneConfig()
    s = generate_scene(3, cfg)
    assert s.n_points == cfg.n_points
    assert s.labels.min() >= 0 and s.labels.max() < 6
    assert (s.points >= 0).all() and (s.points <= np.array(cfg.room_size)).all()
    assert (s.colors >= 0).all() and (s.colors <= 1).all()
    assert set(np.unique(s.labels)) == set(range(6))


def test_class_shares_track_targets_over_many_scenes():
    cfg = SceneConfig(n_points=256)
    target = cfg.proportions()
    counts = np.zeros(cfg.n_classes)
    for seed in range(1000):
        counts += np.bincount(generate_scene(seed, cfg).labels, minlength=cfg.n_classes)
    share = counts / counts.sum()
    assert (np.abs(share - target) <= 0.5 * target).all()


@pytest.mark.parametrize("kwargs", [dict(n_classes=1), dict(objects_per_class=0), dict(n_points=0),
                                    dict(class_proportions=(1.0, 2.0))])
def test_bad_generator_config(kwargs):
    with pytest.raises(ConfigError):
        generate_scene(0, SceneConfig(**kwargs))


def test_single_point_on_axis_hits_one_pixel():
    scene = _scene([[0.0, 0.0, 1.0]], [2])
    cam = _axis_camera()
    view = render_view(scene, cam, splat_radius=1.0)
    hit = view.pixel_labels != scene.n_classes
    assert hit.sum() == 1
    assert hit[int(cam.cy), int(cam.cx)]
    assert view.pixel_labels[int(cam.cy), int(cam.cx)] == 2
    assert view.depth[int(cam.cy), int(cam.cx)] == 1.0
    assert np.isinf(view.depth[~hit]).all()


def test_nearer_point_on_a_ray_wins():
    scene = _scene([[0.0, 0.0, 2.0], [0.0, 0.0, 1.0]], [0, 1],
                   colors=[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    cam = _axis_camera()
    view = render_view(scene, cam)
    r, c = int(cam.cy), int(cam.cx)
    assert view.pixel_labels[r, c] == 1
    np.testing.assert_array_equal(view.image[r, c], [0.0, 1.0, 0.0])


def test_three_views_have_distinct_poses():
    views = render_views(generate_scene(1), 3, seed=1)
    assert len(views) == 3
    centers = [v.camera.center for v in views]
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.linalg.norm(centers[i] - centers[j]) > 1e-3


def test_view_invariants():
    for v in render_views(generate_scene(2), 3, seed=2):
        r = v.camera.rotation
        assert np.abs(r.T @ r - np.eye(3)).max() <= 1e-9
        assert v.image.shape == (64, 64, 3) and v.pixel_labels.shape == (64, 64)
        assert np.isfinite(v.depth[v.pixel_labels != 6]).all()
        assert np.isinf(v.depth[v.pixel_labels == 6]).all()
        assert (v.image >= 0).all() and (v.image <= 1).all()


@given(st.integers(0, 10_000))
@settings(max_examples=10)
def test_rendering_consistency(seed):
    """Every non-VOID pixel's source point re-projects into it at the stored depth."""
    scene = generate_scene(seed)
    for v in render_views(scene, 2, seed=seed):
        hit = v.source >= 0
        src = v.source[hit]
        proj = project_points(scene.points[src], v.camera)
        rows, cols = np.nonzero(hit)
        assert np.abs(proj.depth - v.depth[hit]).max() <= 1e-6
        assert (v.pixel_labels[hit] == scene.labels[src]).all()
        direct = ~v.splatted[hit]
        assert (proj.rows[direct] == rows[direct]).all() and (proj.cols[direct] == cols[direct]).all()
        # splatted pixels come from a point whose projection lies within the splat radius
        d2 = (proj.v - rows) ** 2 + (proj.u - cols) ** 2
        assert (d2[~direct] < 1.0).all()


def test_split_counts():
    ids = [f"s{i}" for i in range(64)]
    lab, unl = split_dataset(ids, 0.10, 0)
    assert len(lab) == 6 and len(unl) == 58
    assert set(lab) | set(unl) == set(ids) and not set(lab) & set(unl)
    assert split_dataset(ids, 0.20, 0)[0].__len__() == 13
    lab, unl = split_dataset(ids, 1.0, 0)
    assert len(lab) == 64 and unl == []
    assert split_dataset(ids, 0.10, 0) == split_dataset(ids, 0.10, 0)
    assert len(split_dataset(ids[:3], 0.01, 0)[0]) == 1


@pytest.mark.parametrize("ratio", [0.0, -0.1, 1.5])
def test_split_rejects_bad_ratio(ratio):
    with pytest.raises(ConfigError):
        split_dataset(["a", "b"], ratio, 0)


def test_render_views_rejects_zero_views():
    with pytest.raises(ConfigError):
        render_views(generate_scene(0), 0)


def test_camera_looks_at_centroid():
    scene = generate_scene(4)
    for v in render_views(scene, 3, seed=4, cfg=CameraConfig()):
        proj = project_points(scene.points.mean(axis=0)[None], v.camera)
        assert abs(proj.u[0] - v.camera.cx) < 1e-6 and abs(proj.v[0] - v.camera.cy) < 1e-6
        assert v.camera.fx == pytest.approx(32 / math.tan(math.radians(37.5)))
