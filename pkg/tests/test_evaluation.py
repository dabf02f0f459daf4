import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from posefree3d.camera import CameraIntrinsics, CameraPose
from posefree3d.evaluation import (
    GeneratorViews,
    MetricReport,
    PlanarDepthViews,
    aligned_depth_mse,
    depth_error,
    evaluate_models,
    flat_plane_depth_model,
    format_table,
    ground_truth_depth_model,
    js_divergence,
    js_from_probabilities,
    planar_depth,
    pose_error,
    pose_histogram,
    reprojection_error,
)
from posefree3d.synthdata import AnalyticSceneRenderer, cars_proxy, faces_proxy, generate_dataset, load_eval_records

# 1 - (3/4) log2(3) / 2 ... evaluated directly: JS([.5,.5],[1,0]) in bits
JS_HALF_VS_POINT = 0.31127812445913283


def test_js_examples():
    assert js_from_probabilities([0.3, 0.7], [0.3, 0.7]) == 0
    assert abs(js_from_probabilities([1, 0], [0, 1]) - 1) < 1e-12
    assert abs(js_from_probabilities([0.5, 0.5], [1, 0]) - JS_HALF_VS_POINT) < 1e-12


def test_js_oracle_value():
    # independent evaluation of the closed form: H(m) - (H(p) + H(q)) / 2 with m = (3/4, 1/4)
    h = lambda p: -sum(x * math.log2(x) for x in p if x > 0)  # noqa: E731
    assert abs(h([0.75, 0.25]) - 0.5 * (h([0.5, 0.5]) + h([1.0, 0.0])) - JS_HALF_VS_POINT) < 1e-15


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_js_bounded_and_symmetric(a, b):
    if sum(a) == 0 or sum(b) == 0:
        return
    p, q = np.array(a) / sum(a), np.array(b) / sum(b)
    d = js_from_probabilities(p, q)
    assert -1e-12 <= d <= 1 + 1e-12
    assert abs(d - js_from_probabilities(q, p)) < 1e-12


def test_histograms_sum_to_one_and_average_angles():
    g = np.random.default_rng(0)
    poses = np.stack([g.normal(0, 0.3, 5000), g.normal(0, 0.1, 5000)], 1)
    h = pose_histogram(poses, 1.2, 0.6)
    assert abs(h.azimuth.sum() - 1) < 1e-9 and abs(h.elevation.sum() - 1) < 1e-9
    assert len(h.azimuth_edges) == 61
    other = pose_histogram(poses + [0.5, -0.2], 1.2, 0.6)
    assert js_divergence(h, other) == 0  # mean alignment removes the shift
    raw = pose_histogram(poses + [0.5, 0.0], 1.2, 0.6, mean_align=False)
    base = pose_histogram(poses, 1.2, 0.6, mean_align=False)
    assert abs(js_divergence(base, raw) - 0.5 * js_from_probabilities(base.azimuth, raw.azimuth)) < 1e-12


def test_js_rejects_mismatched_bins():
    poses = np.zeros((10, 2))
    with pytest.raises(ValueError):
        js_divergence(pose_histogram(poses, 1.2, 0.6), pose_histogram(poses, 1.2, 0.6, bins=30))


def test_out_of_range_values_land_in_end_bins():
    h = pose_histogram(np.array([[5.0, 0.0], [-5.0, 0.0]]), 1.2, 0.6, mean_align=False)
    assert h.azimuth[0] == 0.5 and h.azimuth[-1] == 0.5


@settings(max_examples=50, deadline=None)
@given(st.integers(-3000, 3000), st.integers(-3000, 3000), st.integers(0, 100))
def test_pose_error_shift_invariance_is_exact(da, de, seed):
    # dyadic angles and shifts make every intermediate exactly representable
    g = np.random.default_rng(seed)
    pred = g.integers(-1000, 1000, size=(16, 2)) / 1024
    ref = g.integers(-1000, 1000, size=(16, 2)) / 1024
    shift = np.array([da, de]) / 1024
    base = pose_error(pred, ref)
    assert pose_error(pred, pred + shift) == 0
    assert pose_error(pred + shift, ref) == base
    assert pose_error(pred, ref - shift[::-1]) == base


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 100))
def test_pose_error_shift_invariance_general_floats(da, de, seed):
    g = np.random.default_rng(seed)
    pred = g.normal(size=(20, 2))
    ref = g.normal(size=(20, 2))
    base = pose_error(pred, ref)
    assert pose_error(pred, pred + [da, de]) < 1e-14
    assert abs(pose_error(pred + [da, de], ref) - base) < 1e-12


def test_pose_error_value_and_errors():
    pred = np.array([[0.1, 0.0], [-0.1, 0.0]])
    ref = np.zeros((2, 2))
    assert abs(pose_error(pred, ref) - 0.05) < 1e-15
    with pytest.raises(ValueError):
        pose_error(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        pose_error(np.zeros((3, 2)), np.zeros((2, 2)))


@pytest.fixture(scope="module")
def depth_set(tmp_path_factory):
    out = tmp_path_factory.mktemp("depthset")
    generate_dataset(faces_proxy(count=6, resolution=32, seed=2), out)
    return load_eval_records(out)


def test_depth_error_zero_for_truth_and_larger_for_a_plane(depth_set):
    truth = depth_error(ground_truth_depth_model, depth_set)
    assert truth.error == 0 and truth.evaluated == 6 and truth.skipped == 0
    plane = depth_error(flat_plane_depth_model(faces_proxy(resolution=32).intrinsics()), depth_set)
    assert plane.error > 1e-4


def test_depth_error_median_alignment_and_skips():
    truth = torch.zeros(10, 10)
    truth[2:8, 2:8] = 2.5 + torch.rand(6, 6) * 0.1
    assert aligned_depth_mse(truth * 3.0, truth) < 1e-10
    tiny = torch.zeros(20, 20)
    tiny[0, 0] = 2.5  # 0.25% foreground
    assert aligned_depth_mse(tiny, tiny) is None


def test_planar_depth_center_ray_is_orbit_radius():
    intr = CameraIntrinsics(image_resolution=5)
    d = planar_depth(CameraPose(0.3, 0.2), intr)
    assert abs(d[2, 2].item() - 2.7) < 1e-12
    assert (d >= 2.7 - 1e-12).all()


@pytest.mark.parametrize("preset", [faces_proxy, cars_proxy])
def test_analytic_scenes_beat_the_planar_baseline(preset):
    model = AnalyticSceneRenderer(preset(count=8))
    true_err = reprojection_error(model, range(3))
    flat_err = reprojection_error(PlanarDepthViews(model), range(3))
    assert 0 <= true_err < flat_err


@pytest.mark.xfail(strict=True, reason="bilinear resampling of hard texture and silhouette edges at 64 px leaves "
                                       "~7e-3 residual on a perfectly consistent scene")
def test_analytic_scene_reprojection_below_1e3():
    model = AnalyticSceneRenderer(faces_proxy(count=8))
    assert reprojection_error(model, range(4)) < 1e-3


def test_metric_report_and_table():
    torch.manual_seed(0)
    from posefree3d.config import TrainConfig
    from posefree3d.trainer import build_discriminator, build_generator

    cfg = TrainConfig(backbone="triplane", resolution=16, n_samples=8, field_hidden=16, triplane_channels=4,
                      triplane_res=16, d_base_channels=8, d_max_channels=16)
    G, D = build_generator(cfg), build_discriminator(cfg)
    images = torch.rand(20, 3, 16, 16) * 2 - 1
    poses = np.random.default_rng(0).normal(0, 0.2, (20, 2))
    a, dists = evaluate_models(G, D, images, poses, n_latents=200, n_reprojection=2)
    b, _ = evaluate_models(G, D, images, poses, n_latents=200, n_reprojection=2)
    assert a == b
    assert isinstance(a, MetricReport) and a.fid is None
    for v in (a.js_divergence, a.pose_error, a.reprojection_error, a.reprojection_planar_baseline):
        assert math.isfinite(v) and v >= 0
    assert dists.discriminator is not None
    table = format_table(a)
    assert "js_divergence" in table and "reprojection_error" in table
    # untrained generators all emit the canonical pose
    assert a.generator_pose_std == (0.0, 0.0)


def test_generator_views_use_the_learned_pose():
    from posefree3d.generator import PoseFreeGenerator

    torch.manual_seed(0)
    G = PoseFreeGenerator(CameraIntrinsics(image_resolution=8), latent_dim=8, style_dim=8, n_samples=8,
                          hidden_dim=16, n_layers=2)
    with torch.no_grad():
        G.pose_learner.fc2.weight.normal_()
    z = torch.randn(8)
    view = GeneratorViews(G)
    pose = view.base_pose(z)
    expected = G.pose_learner(G.map_latent(z[None])).as_tensor()[0]
    assert abs(pose.azimuth - expected[0].item()) < 1e-6
    image, depth, alpha = view.render_view(z, pose)
    assert image.shape == (3, 8, 8) and depth.shape == alpha.shape == (8, 8)
