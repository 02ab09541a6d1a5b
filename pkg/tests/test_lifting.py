import numpy as np
import pytest

from liftview import tensor as T
from liftview.camera import CameraPose, look_at, orbit_pose
from liftview.gradcheck import grad_check
from liftview.lifting import (
    FeatureExtractor,
    FeatureVolume,
    ViewAggregator,
    aggregate_views,
    lift_view,
    voxel_centers,
)
from liftview.tensor import Tensor


def cam(size=16, radius=1.3, az=0.0, el=0.0):
    f = 0.9 * size
    c = (size - 1) / 2.0
    return orbit_pose(az, el, radius, fx=f, fy=f, cx=c, cy=c,
                      width=size, height=size)


# ---------------------------------------------------------------------------
# extractor


def test_extractor_output_shape():
    ext = FeatureExtractor(c_feat=16, rng=np.random.default_rng(0))
    out = ext(Tensor(np.random.default_rng(1).uniform(size=(3, 64, 64))))
    assert out.shape == (16, 32, 32)


def test_extractor_zero_image_zero_final_layer():
    ext = FeatureExtractor(c_feat=8, rng=np.random.default_rng(2),
                           zero_init_final=True)
    out = ext(Tensor(np.zeros((3, 16, 16))))
    np.testing.assert_array_equal(out.data, 0.0)


def test_extractor_rejects_odd_images():
    ext = FeatureExtractor(rng=np.random.default_rng(3))
    with pytest.raises(ValueError):
        ext(Tensor(np.zeros((3, 15, 16))))
    with pytest.raises(ValueError):
        ext(Tensor(np.zeros((4, 16, 16))))


def test_extractor_weight_gradients():
    ext = FeatureExtractor(c_feat=4, c_mid=4, rng=np.random.default_rng(4))
    img = Tensor(np.random.default_rng(5).uniform(size=(3, 8, 8)))

    def f(w):
        ext.conv_in.weight = w
        return T.tsum(ext(img))

    res = grad_check(f, ext.conv_in.weight)
    assert res.passed, res.failures


# ---------------------------------------------------------------------------
# lift_view


def test_lift_constant_feature_map():
    pose = cam()
    feats = Tensor(np.full((4, 8, 8), 2.5))
    vol = lift_view(feats, pose, (4, 8, 8, 8))
    hit = vol.hits > 0
    assert hit.any()
    data = vol.data.data
    for ch in range(4):
        np.testing.assert_allclose(data[ch][hit], 2.5, atol=1e-12)
        np.testing.assert_array_equal(data[ch][~hit], 0.0)


def test_lift_marks_out_of_view_voxels():
    # camera past the cube looking away: nothing is seen
    pose = look_at((2.0, 0.0, 0.0), target=(5.0, 0.0, 0.0), fx=16, fy=16,
                   cx=7.5, cy=7.5, width=16, height=16)
    vol = lift_view(Tensor(np.ones((2, 8, 8))), pose, (2, 4, 4, 4))
    np.testing.assert_array_equal(vol.hits, 0)
    np.testing.assert_array_equal(vol.data.data, 0.0)


def test_lift_exact_at_feature_grid_node():
    # hand-built pose: voxel center (0.25, 0.25, 0.25) lands on pixel (2, 2)
    rot = np.array([[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]])
    pos = np.array([0.0, 0.0, -2.0])
    pose = CameraPose(fx=9.0, fy=9.0, cx=3.0, cy=3.0, rotation=rot,
                      translation=-rot @ pos, width=8, height=8)
    rng = np.random.default_rng(6)
    feats = rng.standard_normal((3, 8, 8))
    vol = lift_view(Tensor(feats), pose, (3, 2, 2, 2))
    assert vol.hits[1, 1, 1] == 1
    np.testing.assert_array_equal(vol.data.data[:, 1, 1, 1], feats[:, 2, 2])


def test_lift_is_linear_in_features():
    pose = cam()
    rng = np.random.default_rng(7)
    feats = rng.standard_normal((4, 8, 8))
    base = lift_view(Tensor(feats), pose, (4, 8, 8, 8)).data.data
    scaled = lift_view(Tensor(3.7 * feats), pose, (4, 8, 8, 8)).data.data
    np.testing.assert_allclose(scaled, 3.7 * base, atol=1e-10)


def test_voxel_centers_match_documented_rule():
    centers = voxel_centers((2, 2, 2)).reshape(2, 2, 2, 3)
    np.testing.assert_allclose(centers[0, 0, 0], [-0.25, -0.25, -0.25])
    np.testing.assert_allclose(centers[1, 0, 1], [0.25, -0.25, 0.25])


# ---------------------------------------------------------------------------
# aggregate_views


def rand_volume(rng, c=4, d=4, mask_p=0.8):
    data = rng.standard_normal((c, d, d, d))
    hits = (rng.uniform(size=(d, d, d)) < mask_p).astype(np.int64)
    data = data * (hits > 0)  # unseen voxels carry zeros, as lift_view makes them
    return FeatureVolume(Tensor(data), hits)


def test_aggregate_single_view_is_refined_feature():
    rng = np.random.default_rng(8)
    vol = rand_volume(rng)
    agg = ViewAggregator(4, 4, np.random.default_rng(9))
    out = aggregate_views([vol], agg)
    seen = (vol.hits > 0).astype(np.float64)
    want = agg.refine(vol.data).data * seen
    np.testing.assert_array_equal(out.data.data, want)
    np.testing.assert_array_equal(out.hits, vol.hits)


def test_aggregate_identical_views_pool_to_same_feature():
    rng = np.random.default_rng(10)
    vol = rand_volume(rng)
    twin = FeatureVolume(Tensor(vol.data.data.copy()), vol.hits.copy())
    agg = ViewAggregator(4, 4, np.random.default_rng(11))  # crossmix starts zero
    out = aggregate_views([vol, twin], agg)
    want = vol.data.data * (vol.hits > 0)
    np.testing.assert_array_equal(out.data.data, want)
    np.testing.assert_array_equal(out.hits, 2 * vol.hits)


def test_aggregate_permutation_invariant_bitwise():
    rng = np.random.default_rng(12)
    vols = [rand_volume(rng) for _ in range(4)]
    agg = ViewAggregator(4, 4, np.random.default_rng(13))
    agg.crossmix.weight.data[:] = rng.standard_normal(agg.crossmix.weight.shape)
    base = aggregate_views(vols, agg)
    for perm in ((3, 1, 0, 2), (1, 0, 3, 2), (2, 3, 1, 0)):
        out = aggregate_views([vols[i] for i in perm], agg)
        np.testing.assert_array_equal(out.data.data, base.data.data)
        np.testing.assert_array_equal(out.hits, base.hits)


def test_aggregate_unseen_voxels_stay_zero():
    rng = np.random.default_rng(14)
    vols = [rand_volume(rng, mask_p=0.5) for _ in range(2)]
    agg = ViewAggregator(4, 4, np.random.default_rng(15))
    agg.slice_conv.bias.data[:] = 1.0  # bias would leak into unseen voxels
    agg.crossmix.weight.data[:] = 0.01
    out = aggregate_views(vols, agg)
    unseen = out.hits == 0
    assert unseen.any()
    for ch in range(4):
        np.testing.assert_array_equal(out.data.data[ch][unseen], 0.0)


def test_aggregate_validates_inputs():
    rng = np.random.default_rng(16)
    agg = ViewAggregator(4, 4, np.random.default_rng(17))
    with pytest.raises(ValueError):
        aggregate_views([], agg)
    with pytest.raises(ValueError):
        aggregate_views([rand_volume(rng), rand_volume(rng, d=2)], agg)
    with pytest.raises(ValueError):
        aggregate_views([rand_volume(rng, c=2)], agg)


def test_end_to_end_gradient_image_to_aggregated_volume():
    ext = FeatureExtractor(c_feat=4, c_mid=4, rng=np.random.default_rng(18))
    agg = ViewAggregator(4, 4, np.random.default_rng(19))
    poses = [cam(size=8, az=0.4), cam(size=8, az=2.0)]
    rng = np.random.default_rng(20)
    other = Tensor(rng.uniform(size=(3, 8, 8)))
    w = rng.standard_normal((4, 4, 4, 4))

    def f(img):
        vols = [lift_view(ext(im), p, (4, 4, 4, 4))
                for im, p in ((img, poses[0]), (other, poses[1]))]
        out = aggregate_views(vols, agg)
        return T.tsum(T.mul(out.data, Tensor(w)))

    res = grad_check(f, Tensor(rng.uniform(size=(3, 8, 8)), requires_grad=True))
    assert res.passed, res.failures
