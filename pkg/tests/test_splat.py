import copy
import math

import numpy as np
import pytest
import torch

from langfield import splat
from langfield.bundle import Camera

from oracles import composite_front_to_back, max_relative_error


def make_camera(w=8, h=8, fx=8.0):
    return Camera(fx=fx, fy=fx, cx=w / 2, cy=h / 2, width=w, height=h,
                  w2c=np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1))


def random_cloud(rng, n, d=3, z_range=(2.0, 3.0)):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    pos = rng.normal(0, 0.25, (n, 3))
    pos[:, 2] = rng.uniform(*z_range, n)
    return splat.GaussianCloud(
        positions=pos,
        log_scales=rng.uniform(-2.5, -1.5, (n, 3)),
        rotations=q,
        opacity_logits=rng.uniform(-1.0, 1.0, n),
        colors=rng.uniform(0.1, 0.9, (n, 3)),
        normals=nrm,
        f_sem=rng.normal(0, 1, (n, len(splat.HIERARCHY_LEVELS), d)),
        active_level="l",
    )


def on_axis_cloud(alphas, depths, colors, pixel=(3, 3), cam=None):
    """Gaussians whose centers project exactly onto the given pixel center."""
    cam = cam or make_camera()
    u = pixel[1] + 0.5
    v = pixel[0] + 0.5
    n = len(alphas)
    pos = np.array([[(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z] for z in depths])
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    nrm = np.tile([0.0, 0.0, -1.0], (n, 1))
    return splat.GaussianCloud(
        positions=pos,
        log_scales=np.full((n, 3), -1.0),
        rotations=rot,
        opacity_logits=np.array([math.log(a / (1 - a)) for a in alphas]),
        colors=np.asarray(colors, dtype=np.float64),
        normals=nrm,
        f_sem=np.ones((n, 3, 3)),
        active_level="l",
    )


def test_empty_pixel_background_alpha_zero(rng):
    cloud = on_axis_cloud([0.7], [2.0], [[0.5, 0.2, 0.1]])
    cloud.log_scales[:] = -3.0
    cam = make_camera()
    out = splat.render(cloud, cam, background=(0.2, 0.3, 0.4))
    assert out.alpha[0, 0, 0] == 0.0
    assert np.array_equal(out.rgb[0, 0], [0.2, 0.3, 0.4])
    assert np.array_equal(out.feature[0, 0], [0.0, 0.0, 0.0])


def test_single_gaussian_center_weight_is_opacity():
    a0 = 0.63
    color = [0.9, 0.4, 0.2]
    cloud = on_axis_cloud([a0], [2.0], [color])
    cam = make_camera()
    out = splat.render(cloud, cam, background=(0.0, 0.0, 0.0))
    assert out.alpha[3, 3, 0] == pytest.approx(a0, abs=1e-12)
    assert np.allclose(out.rgb[3, 3], np.asarray(color) * a0, atol=1e-12)


def test_two_gaussian_compositing_matches_closed_form():
    a1, a2 = 0.6, 0.45
    c1, c2 = 0.8, 0.3
    bg = 0.15
    cloud = on_axis_cloud([a1, a2], [2.0, 2.5], [[c1] * 3, [c2] * 3])
    cam = make_camera()
    out = splat.render(cloud, cam, background=(bg,) * 3)
    expected = c1 * a1 + c2 * a2 * (1 - a1) + bg * (1 - a1) * (1 - a2)
    assert out.rgb[3, 3, 0] == pytest.approx(expected, abs=1e-9)
    oracle = composite_front_to_back([a1, a2], [c1, c2], bg)
    assert out.rgb[3, 3, 0] == pytest.approx(oracle, abs=1e-9)


def test_depth_order_not_input_order():
    # farther Gaussian listed first; compositing must still run near-to-far
    a1, a2 = 0.6, 0.45
    c1, c2 = 0.8, 0.3
    cloud = on_axis_cloud([a2, a1], [2.5, 2.0], [[c2] * 3, [c1] * 3])
    out = splat.render(cloud, make_camera(), background=(0.15,) * 3)
    expected = c1 * a1 + c2 * a2 * (1 - a1) + 0.15 * (1 - a1) * (1 - a2)
    assert out.rgb[3, 3, 0] == pytest.approx(expected, abs=1e-9)


def test_zero_upstream_gradients_are_zero(rng):
    cloud = random_cloud(rng, 4)
    cam = make_camera()
    ups = {"rgb": np.zeros((8, 8, 3))}
    g = splat.render_backward(cloud, cam, ups)
    for name, arr in g.items():
        assert np.all(arr == 0.0), name


def test_color_gradient_equals_composited_weight():
    a0 = 0.55
    cloud = on_axis_cloud([a0], [2.0], [[0.5, 0.5, 0.5]])
    cam = make_camera()
    ups = np.zeros((8, 8, 3))
    ups[3, 3, 0] = 1.0
    g = splat.render_backward(cloud, cam, {"rgb": ups})
    assert g["colors"][0, 0] == pytest.approx(a0, abs=1e-12)
    assert g["colors"][0, 1] == 0.0


def test_gradients_match_finite_differences(rng):
    cloud = random_cloud(rng, 5)
    cam = make_camera()
    base = splat.render(cloud, cam)
    ups = {k: rng.normal(size=getattr(base, k).shape)
           for k in ("rgb", "normal", "feature", "alpha", "depth")}
    g = splat.render_backward(cloud, cam, ups)

    def loss(cl):
        o = splat.render(cl, cam)
        return sum(float((getattr(o, k) * ups[k]).sum()) for k in ups)

    eps = 1e-6
    for name in ("positions", "log_scales", "rotations", "opacity_logits", "colors", "normals"):
        arr = getattr(cloud, name)
        flat = arr.reshape(-1)
        for k in range(0, flat.size, max(1, flat.size // 6)):
            cl2 = copy.deepcopy(cloud)
            f2 = getattr(cl2, name).reshape(-1)
            f2[k] += eps
            lp = loss(cl2)
            f2[k] -= 2 * eps
            lm = loss(cl2)
            fd = (lp - lm) / (2 * eps)
            an = g[name].reshape(-1)[k]
            assert max_relative_error(np.array([an]), np.array([fd]), floor=1e-5) < 1e-3, \
                f"{name}[{k}]: analytic {an} vs fd {fd}"


def test_weights_plus_transmittance_sum_to_one(rng):
    cloud = random_cloud(rng, 7)
    cloud.f_sem[:] = 1.0   # feature channel then accumulates the raw weight sum
    cam = make_camera()
    out = splat.render(cloud, cam)
    weight_sum = out.feature[..., 0]
    trans = 1.0 - out.alpha[..., 0]
    assert np.abs(weight_sum + trans - 1.0).max() < 1e-5


def test_permutation_invariance(rng):
    cloud = random_cloud(rng, 6)
    cam = make_camera()
    ref = splat.render(cloud, cam)
    perm = rng.permutation(6)
    shuffled = splat.GaussianCloud(
        positions=cloud.positions[perm], log_scales=cloud.log_scales[perm],
        rotations=cloud.rotations[perm], opacity_logits=cloud.opacity_logits[perm],
        colors=cloud.colors[perm], normals=cloud.normals[perm], f_sem=cloud.f_sem[perm],
        active_level=cloud.active_level)
    out = splat.render(shuffled, cam)
    for name in ("rgb", "normal", "feature", "alpha", "depth"):
        assert np.abs(getattr(out, name) - getattr(ref, name)).max() < 1e-12


def test_rigid_transform_invariance(rng):
    cloud = random_cloud(rng, 6)
    cam = make_camera()
    ref = splat.render(cloud, cam)

    angle = 0.7
    R0 = np.array([[math.cos(angle), -math.sin(angle), 0.0],
                   [math.sin(angle), math.cos(angle), 0.0],
                   [0.0, 0.0, 1.0]])
    t0 = np.array([0.3, -0.2, 0.5])

    def quat_mul(q1, q2):
        w1, x1, y1, z1 = q1
        w2, x2, y2, z2 = q2
        return np.array([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ])

    q0 = np.array([math.cos(angle / 2), 0.0, 0.0, math.sin(angle / 2)])
    moved = copy.deepcopy(cloud)
    moved.positions = cloud.positions @ R0.T + t0
    moved.normals = cloud.normals @ R0.T
    moved.rotations = np.stack([quat_mul(q0, q) for q in cloud.rotations])

    R = cam.R @ R0.T
    t = cam.t - R @ t0
    cam2 = Camera(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                  width=cam.width, height=cam.height,
                  w2c=np.concatenate([R, t[:, None]], axis=1))
    out = splat.render(moved, cam2)
    for name in ("rgb", "normal", "feature", "alpha", "depth"):
        assert np.abs(getattr(out, name) - getattr(ref, name)).max() < 1e-5


def test_tile_size_does_not_change_output(rng):
    cloud = random_cloud(rng, 6)
    cam = make_camera()
    a = splat.render(cloud, cam, config=splat.RenderConfig(tile=4))
    b = splat.render(cloud, cam, config=splat.RenderConfig(tile=32))
    assert np.abs(a.rgb - b.rgb).max() == 0.0


def test_prune_threshold_zero_is_identity(rng):
    cloud = random_cloud(rng, 5)
    out = splat.prune(cloud, 0.0)
    assert out.size == 5
    assert np.array_equal(out.positions, cloud.positions)


def test_prune_all_raises(rng):
    cloud = random_cloud(rng, 4)
    cloud.opacity_logits[:] = -10.0
    with pytest.raises(ValueError, match="every Gaussian"):
        splat.prune(cloud, 0.5)


def test_prune_matches_direct_filter(rng):
    cloud = random_cloud(rng, 20)
    thr = 0.5
    out = splat.prune(cloud, thr)
    keep = cloud.opacities() >= thr
    assert out.size == keep.sum()
    assert np.array_equal(out.positions, cloud.positions[keep])
    assert np.array_equal(out.f_sem, cloud.f_sem[keep])


def test_cloud_validation(rng):
    cloud = random_cloud(rng, 3)
    cloud.rotations[0] *= 1.5
    with pytest.raises(ValueError, match="quaternion"):
        cloud.validate()
    cloud = random_cloud(rng, 3)
    cloud.normals[1] *= 0.5
    with pytest.raises(ValueError, match="normals"):
        cloud.validate()
    with pytest.raises(ValueError, match="empty"):
        splat.GaussianCloud(*[np.zeros((0, 3))] * 2, np.zeros((0, 4)), np.zeros(0),
                            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3, 3))).validate()


def test_render_backward_rejects_unknown_channel(rng):
    cloud = random_cloud(rng, 3)
    with pytest.raises(ValueError, match="unknown upstream"):
        splat.render_backward(cloud, make_camera(), {"bogus": np.zeros((8, 8, 3))})


def test_center_weights_single_gaussian():
    a0 = 0.7
    cloud = on_axis_cloud([a0], [2.0], [[0.5, 0.5, 0.5]])
    w, rows, cols = splat.center_weights(cloud, make_camera())
    assert rows[0] == 3 and cols[0] == 3
    assert w[0] == pytest.approx(a0, abs=1e-12)


def test_center_weights_behind_camera_zero():
    cloud = on_axis_cloud([0.7], [2.0], [[0.5, 0.5, 0.5]])
    cloud.positions[0, 2] = -1.0
    w, _, _ = splat.center_weights(cloud, make_camera())
    assert w[0] == 0.0


def test_cloud_checkpoint_roundtrip(tmp_path, rng):
    cloud = random_cloud(rng, 6)
    cloud.feature_background = np.array([0.1, -0.2, 0.3])
    splat.save_cloud(cloud, tmp_path / "ckpt")
    back = splat.load_cloud(tmp_path / "ckpt")
    assert back.size == 6
    assert back.active_level == cloud.active_level
    assert np.allclose(back.positions, cloud.positions, atol=1e-6)
    assert np.allclose(back.feature_background, cloud.feature_background, atol=1e-7)
    out1 = splat.render(cloud, make_camera(), dtype=torch.float32)
    out2 = splat.render(back, make_camera(), dtype=torch.float32)
    assert np.abs(out1.rgb - out2.rgb).max() < 1e-5


def test_gaussian_view_accessor(rng):
    cloud = random_cloud(rng, 4)
    g = cloud[2]
    assert np.array_equal(g.position, cloud.positions[2])
    assert g.opacity_logit == cloud.opacity_logits[2]
    rebuilt = splat.GaussianCloud.from_gaussians([cloud[i] for i in range(4)])
    assert np.allclose(rebuilt.positions, cloud.positions)
