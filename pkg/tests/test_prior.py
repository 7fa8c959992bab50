import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from semdistill.data import synth_scene, write_label_pgm
from semdistill.images import SegmentationMap
from semdistill.numerics import ShapeError, Tensor, check_tensor_grads, reduce, slice_channels
from semdistill.prior import (MaskError, MaskProvider, cat_fuse, map_pool, provide_masks, quantile_regions,
                              region_dropout, spi_fuse)


def naive_map(F, labels):
    out = np.empty_like(F, dtype=np.float64)
    for r in np.unique(labels):
        m = labels == r
        for c in range(F.shape[0]):
            out[c][m] = F[c][m].mean()
    return out


@st.composite
def feature_and_map(draw, max_side=6, max_k=4):
    h = draw(st.integers(1, max_side))
    w = draw(st.integers(1, max_side))
    c = draw(st.integers(1, 3))
    k = draw(st.integers(1, min(max_k, h * w)))
    lab = draw(arrays(np.int64, (h, w), elements=st.integers(0, k - 1)))
    F = draw(arrays(np.float32, (1, c, h, w), elements=st.floats(-100, 100, width=32)))
    return F, SegmentationMap.from_labels(lab)


def test_map_worked_example():
    F = Tensor(np.array([[[[1.0, 3.0], [5.0, 7.0]]]]))
    S = SegmentationMap(np.array([[0, 1], [0, 1]]))
    assert map_pool(F, S).data[0, 0].tolist() == [[3.0, 5.0], [3.0, 5.0]]


def test_map_single_region_is_global_mean():
    F = np.random.default_rng(0).random((1, 2, 4, 5))
    out = map_pool(Tensor(F), SegmentationMap(np.zeros((4, 5), int))).data
    assert np.allclose(out, F.mean(axis=(2, 3), keepdims=True))


def test_map_matches_naive_oracle():
    rng = np.random.default_rng(1)
    F = rng.standard_normal((2, 3, 6, 7))
    maps = [SegmentationMap.from_labels(rng.integers(0, 4, (6, 7))) for _ in range(2)]
    out = map_pool(Tensor(F), maps).data
    for i in range(2):
        assert np.allclose(out[i], naive_map(F[i], maps[i].labels), rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(feature_and_map())
def test_map_idempotent_exactly(fs):
    F, S = fs
    once = map_pool(Tensor(F), S).data
    assert np.array_equal(map_pool(Tensor(once), S).data, once)


@settings(max_examples=60, deadline=None)
@given(feature_and_map(), st.floats(-5, 5), st.floats(-5, 5))
def test_map_affine_equivariance(fs, a, b):
    F, S = fs
    F = F.astype(np.float64)
    lhs = map_pool(Tensor(a * F + b), S).data
    rhs = a * map_pool(Tensor(F), S).data + b
    scale = max(1.0, np.abs(rhs).max())
    assert np.max(np.abs(lhs - rhs)) <= 1e-6 * scale


@settings(max_examples=60, deadline=None)
@given(feature_and_map(), st.randoms(use_true_random=False))
def test_map_relabeling_invariance_exact(fs, rnd):
    F, S = fs
    perm = list(range(S.k))
    rnd.shuffle(perm)
    assert np.array_equal(map_pool(Tensor(F), S).data, map_pool(Tensor(F), S.relabel(perm)).data)


@settings(max_examples=40, deadline=None)
@given(feature_and_map())
def test_map_constant_regions_are_fixed_points(fs):
    F, S = fs
    vals = F[0, :, 0, 0][:, None] + np.arange(S.k, dtype=np.float32)[None]
    G = vals[:, S.labels][None]
    assert np.array_equal(map_pool(Tensor(G), S).data, G)


@settings(max_examples=40, deadline=None)
@given(feature_and_map())
def test_map_preserves_global_mean(fs):
    F, S = fs
    F = F.astype(np.float64)
    out = map_pool(Tensor(F), S).data
    assert np.allclose(out.mean(axis=(2, 3)), F.mean(axis=(2, 3)), rtol=1e-6, atol=1e-9)


def test_map_gradient_of_sum_is_one():
    rng = np.random.default_rng(2)
    F = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    S = SegmentationMap.from_labels(rng.integers(0, 3, (4, 4)))
    reduce("sum", map_pool(F, S)).backward()
    assert np.allclose(F.grad, 1.0)
    assert check_tensor_grads(lambda: reduce("sum", map_pool(F, S)), [F]) < 1e-6


def test_map_dimension_mismatch():
    with pytest.raises(ShapeError):
        map_pool(Tensor(np.zeros((1, 1, 3, 3))), SegmentationMap(np.zeros((3, 4), int)))


# --- dropout ----------------------------------------------------------------

def _scene_map():
    return synth_scene(0)[1]


def test_dropout_p0_identity_and_determinism():
    S = _scene_map()
    assert region_dropout(S, 0.0, 1) == S
    assert region_dropout(S, 0.5, 42) == region_dropout(S, 0.5, 42)


def test_dropout_merges_into_catch_all():
    S = _scene_map()
    out, dropped = region_dropout(S, 0.5, 3, return_dropped=True)
    assert dropped.any() and not dropped.all()
    assert out.k == (~dropped).sum() + 1
    merged = np.isin(S.labels, np.nonzero(dropped)[0])
    assert (out.labels[merged] == out.k - 1).all()
    assert (out.labels[~merged] < out.k - 1).all()


def test_dropout_rate_monte_carlo():
    S = SegmentationMap(np.arange(7).reshape(1, 7))
    rng = np.random.default_rng(0)
    drops = np.array([region_dropout(S, 0.5, rng, return_dropped=True)[1] for _ in range(10_000)])
    assert np.all(np.abs(drops.mean(axis=0) - 0.5) < 0.02)
    assert not drops.all(axis=1).any()


def test_dropout_rejects_bad_probability():
    with pytest.raises(ValueError):
        region_dropout(_scene_map(), 1.0, 0)


# --- fusion -----------------------------------------------------------------

def test_spi_fuse_shapes_and_inverse():
    rng = np.random.default_rng(3)
    f, img = Tensor(rng.random((1, 8, 5, 5))), Tensor(rng.random((1, 1, 5, 5)))
    y = spi_fuse(f, img)
    assert y.shape == (1, 9, 5, 5)
    assert np.array_equal(slice_channels(y, 0, 8).data, f.data)
    assert np.array_equal(slice_channels(y, 8, 9).data, img.data)


def test_spi_fuse_gradient():
    rng = np.random.default_rng(4)
    f = Tensor(rng.random((1, 3, 4, 4)), requires_grad=True)
    img = Tensor(rng.random((1, 1, 4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((1, 4, 4, 4)))
    assert check_tensor_grads(lambda: reduce("sum", spi_fuse(f, img) * w), [f, img]) < 1e-6


def test_cat_fuse_one_hot():
    checker = np.indices((4, 4)).sum(axis=0) % 2
    S = SegmentationMap(checker)
    img = Tensor(np.random.default_rng(5).random((1, 1, 4, 4)).astype(np.float32))
    y = cat_fuse(S, img).data
    assert y.shape == (1, 3, 4, 4)
    assert np.array_equal(y[0, 0] + y[0, 1], np.ones((4, 4)))
    assert np.array_equal(y[0, 0], (checker == 0).astype(np.float32))
    assert np.array_equal(y[0, 2], img.data[0, 0])
    with pytest.raises(ShapeError):
        cat_fuse(SegmentationMap(np.zeros((3, 4), int)), img)


# --- providers --------------------------------------------------------------

def test_constant_reference_collapses_to_one_region():
    seg = provide_masks(MaskProvider("synthetic", 7), "c", np.full((16, 16), 0.3))
    assert seg.k == 1


def majority_purity(pred: SegmentationMap, truth: SegmentationMap) -> float:
    """Fraction of pixels whose predicted region's majority true label matches."""
    hit = 0
    for r in range(pred.k):
        t = truth.labels[pred.labels == r]
        hit += np.bincount(t).max()
    return hit / pred.labels.size


def test_quantile_provider_tracks_scene_labels():
    purities = []
    for seed in range(20):
        img, seg = synth_scene(seed)
        prov = quantile_regions(img, 7)
        assert prov.k <= 7
        purities.append(majority_purity(prov, seg))
    assert min(purities) >= 0.70


def test_provider_is_cached_and_repeatable():
    img, _ = synth_scene(1)
    p = MaskProvider("synthetic", 7)
    a = provide_masks(p, "x", img)
    assert provide_masks(p, "x") is a
    assert provide_masks(MaskProvider("synthetic", 7), "x", img) == a


def test_file_provider_round_trip_and_errors(tmp_path):
    _, seg = synth_scene(2)
    write_label_pgm(tmp_path / "img1.pgm", seg)
    p = MaskProvider.from_spec(f"dir:{tmp_path}", 7)
    assert provide_masks(p, "img1") == seg
    with pytest.raises(MaskError, match="img2"):
        provide_masks(p, "img2")
    with pytest.raises(MaskError):
        provide_masks(MaskProvider.from_spec(f"dir:{tmp_path}", 3), "img1")
    with pytest.raises(MaskError):
        provide_masks(MaskProvider("file", 7, directory=tmp_path), "img1", np.zeros((5, 5)))
    with pytest.raises(ValueError):
        MaskProvider.from_spec("sam")
