import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semdistill.images import SegmentationMap
from semdistill.losses import (FeatureExtractor, LossWeights, cosine_matrix, extract_features, psnr_loss,
                               region_vectors, scm_from_features, scm_loss, skd_loss, total_loss)
from semdistill.numerics import ShapeError, Tensor, check_tensor_grads, detach


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def _maps(seed, h=8, w=8, k=3):
    lab = np.random.default_rng(seed).integers(0, k, (h, w))
    lab.ravel()[:k] = np.arange(k)
    return SegmentationMap.from_labels(lab)


# --- PSNR loss --------------------------------------------------------------

def test_psnr_loss_values():
    ref = np.random.default_rng(0).random((1, 1, 8, 8)) * 0.8
    assert psnr_loss(T(ref), ref).item() == pytest.approx(-80.0, abs=1e-9)
    assert abs(psnr_loss(T(ref + 0.1), ref).item() + 20.0) < 1e-6


def test_psnr_loss_gradient_and_floor():
    rng = np.random.default_rng(1)
    pred, ref = T(rng.random((2, 1, 5, 5)), grad=True), rng.random((2, 1, 5, 5))
    assert check_tensor_grads(lambda: psnr_loss(pred, ref), [pred], eps=1e-6) < 1e-6
    same = T(ref, grad=True)
    psnr_loss(same, ref).backward()
    assert not np.any(same.grad)


def test_psnr_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        psnr_loss(T(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 2, 3)))


# --- SKD --------------------------------------------------------------------

@pytest.mark.parametrize("d, expected", [(0.0, 0.0), (0.5, 0.125), (1.0, 0.5), (-1.0, 0.5), (2.0, 1.5),
                                         (-3.0, 2.5)])
def test_skd_closed_form(d, expected):
    assert skd_loss(T([[d]]), np.zeros((1, 1))).item() == pytest.approx(expected, abs=1e-12)


def test_skd_continuous_at_one():
    # Values and slopes from both sides of |d| = 1.
    h = 1e-7
    below = skd_loss(T([[1 - h]]), np.zeros((1, 1))).item()
    above = skd_loss(T([[1 + h]]), np.zeros((1, 1))).item()
    assert abs(below - 0.5) < 2e-7 and abs(above - 0.5) < 2e-7
    for d in (1 - 1e-3, 1 + 1e-3):
        x = T([[d]], grad=True)
        skd_loss(x, np.zeros((1, 1))).backward()
        assert abs(x.grad[0, 0] - 1.0) < 2e-3


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20))
def test_skd_nonnegative_and_zero_on_self(vals):
    x = np.array(vals)[None]
    assert skd_loss(T(x), x).item() == 0.0
    assert skd_loss(T(x), np.zeros_like(x)).item() >= 0.0


def test_skd_is_mean_reduced():
    assert skd_loss(T([[0.5, 0.0, 0.0, 0.0]]), np.zeros((1, 4))).item() == pytest.approx(0.125 / 4)


def test_skd_teacher_branch_detached_by_default():
    s, t = T([[0.3, 2.0]], grad=True), T([[0.0, 0.0]], grad=True)
    skd_loss(s, t).backward()
    assert s.grad is not None and t.grad is None
    s.grad = None
    skd_loss(s, t, detach_teacher=False).backward()
    assert np.allclose(t.grad, -s.grad)


# --- feature extractor ------------------------------------------------------

def test_extractor_seed_contract_and_determinism():
    a, b = FeatureExtractor(), FeatureExtractor()
    sa, sb = a.snapshot(), b.snapshot()
    assert all(sa[n].tobytes() == sb[n].tobytes() for n in sa)
    assert all(p.frozen for p in a.parameters())
    x = Tensor(np.random.default_rng(2).random((1, 1, 6, 6)).astype(np.float32))
    h = extract_features(a, x)
    assert h.shape == (1, 16, 6, 6) and np.array_equal(h.data, a(x).data)


def test_extractor_input_gradient():
    phi = FeatureExtractor().astype(np.float64)
    x = T(np.random.default_rng(3).random((1, 1, 5, 5)), grad=True)
    w = T(np.random.default_rng(4).standard_normal((1, 16, 5, 5)))
    from semdistill.numerics import reduce
    assert check_tensor_grads(lambda: reduce("sum", phi(x) * w), [x], eps=1e-6) < 1e-4


# --- region vectors and cosines ---------------------------------------------

def test_region_vectors_partition_properties():
    H = np.random.default_rng(5).standard_normal((4, 6, 6))
    S = _maps(5, 6, 6, 3)
    V = region_vectors(H, S)
    assert V.shape == (3, 4 * 36)
    for i in range(3):
        for j in range(3):
            if i != j:
                assert not np.any(V[i] * V[j])
    assert np.array_equal(V.sum(axis=0), H.ravel())
    one = region_vectors(H, SegmentationMap(np.zeros((6, 6), int)))
    assert np.array_equal(one[0], H.ravel())
    with pytest.raises(ShapeError):
        region_vectors(H, SegmentationMap(np.zeros((5, 6), int)))


def test_pooled_region_vectors_are_channel_sums():
    H = np.random.default_rng(6).standard_normal((3, 5, 5))
    S = _maps(6, 5, 5, 2)
    P = region_vectors(H, S, pooled=True)
    for k in range(2):
        assert np.allclose(P[k], H[:, S.labels == k].sum(axis=1))


def test_cosine_matrix():
    v = np.array([1.0, 2.0, -1.0])
    C = cosine_matrix([v, v])
    assert np.allclose(C, 1.0, atol=1e-6)
    assert cosine_matrix([[1.0, 0.0], [0.0, 3.0]])[0, 1] == 0.0
    rng = np.random.default_rng(7)
    V = rng.standard_normal((3, 10))
    C = cosine_matrix(V)
    for i in range(3):
        for j in range(3):
            ref = np.dot(V[i], V[j]) / (np.linalg.norm(V[i]) * np.linalg.norm(V[j]) + 1e-12)
            assert abs(C[i, j] - ref) <= 1e-6 * abs(ref) + 1e-15
    assert np.allclose(C, C.T)
    Z = cosine_matrix([[0.0, 0.0], [1.0, 1.0]])
    assert Z[0, 1] == 0.0 and Z[0, 0] == 0.0
    with pytest.raises(ValueError):
        cosine_matrix([[1.0, 2.0]])


# --- SCM --------------------------------------------------------------------

def scm_oracle(XA, XB, S, phi, pooled):
    """Features, region vectors, cosines, then the mean absolute off-diagonal gap."""
    HA = phi(Tensor(XA)).data[0].astype(np.float64)
    HB = phi(Tensor(XB)).data[0].astype(np.float64)
    k = S.k
    tot = 0.0
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            cs = []
            for H in (HA, HB):
                if pooled:
                    hi = np.array([H[c][S.labels == i].sum() for c in range(H.shape[0])])
                    hj = np.array([H[c][S.labels == j].sum() for c in range(H.shape[0])])
                else:
                    hi = (H * (S.labels == i)).ravel()
                    hj = (H * (S.labels == j)).ravel()
                cs.append(hi @ hj / (np.linalg.norm(hi) * np.linalg.norm(hj) + 1e-12))
            tot += abs(cs[0] - cs[1])
    return tot / (k * (k - 1))


@pytest.mark.parametrize("pooled", [False, True])
def test_scm_matches_step_by_step_oracle(pooled):
    rng = np.random.default_rng(8)
    phi = FeatureExtractor().astype(np.float64)
    XA, XB = rng.random((1, 1, 8, 8)), rng.random((1, 1, 8, 8))
    S = _maps(8)
    got = scm_loss(T(XA), XB, S, phi, pooled=pooled).item()
    ref = scm_oracle(XA, XB, S, phi, pooled)
    assert abs(got - ref) <= 1e-5 * abs(ref) + 1e-12
    if not pooled:
        assert got == 0.0  # disjoint masked vectors are orthogonal in both branches
    else:
        assert got > 0


@pytest.mark.parametrize("pooled", [False, True])
def test_scm_identical_branches_is_zero(pooled):
    X = np.random.default_rng(9).random((2, 1, 8, 8))
    assert scm_loss(T(X), X, [_maps(1), _maps(2)], FeatureExtractor().astype(np.float64), pooled=pooled).item() \
        <= 1e-9


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(2, 5), pooled=st.booleans())
def test_scm_range_symmetry_and_relabeling(seed, k, pooled):
    rng = np.random.default_rng(seed)
    phi = FeatureExtractor().astype(np.float64)
    XA, XB = rng.standard_normal((1, 1, 6, 6)), rng.standard_normal((1, 1, 6, 6))
    lab = rng.integers(0, k, (6, 6))
    lab.ravel()[:k] = np.arange(k)
    S = SegmentationMap.from_labels(lab)
    ab = scm_loss(T(XA), XB, S, phi, pooled=pooled).item()
    assert 0.0 <= ab <= 2.0
    ba = scm_loss(T(XB), T(XA), S, phi, pooled=pooled, detach_b=False).item()
    assert abs(ab - ba) < 1e-12
    perm = rng.permutation(S.k)
    assert abs(scm_loss(T(XA), XB, S.relabel(perm), phi, pooled=pooled).item() - ab) < 1e-12


def test_scm_single_region_warns_and_returns_zero():
    phi = FeatureExtractor()
    X = Tensor(np.random.default_rng(10).random((1, 1, 6, 6)).astype(np.float32), requires_grad=True)
    with pytest.warns(RuntimeWarning):
        out = scm_loss(X, np.zeros((1, 1, 6, 6), np.float32), SegmentationMap(np.zeros((6, 6), int)), phi)
    assert out.item() == 0.0


def test_scm_pooled_gradient_both_branches():
    rng = np.random.default_rng(11)
    HA = T(rng.random((1, 4, 5, 5)) + 0.1, grad=True)
    HB = T(rng.random((1, 4, 5, 5)) + 0.1, grad=True)
    S = _maps(11, 5, 5, 3)
    assert check_tensor_grads(lambda: scm_from_features(HA, HB, S, pooled=True), [HA, HB], eps=1e-7) < 1e-4


def test_losses_never_reach_teacher_or_phi_parameters():
    from semdistill.restorers import RestorerConfig, TeacherModel, teacher_encode, teacher_forward
    from semdistill.prior import map_pool, spi_fuse
    cfg = RestorerConfig(base_channels=4, depth=1, teacher_encoder_channels=2)
    teacher = TeacherModel(cfg).freeze()
    phi = FeatureExtractor()
    S = _maps(12)
    x = Tensor(np.random.default_rng(12).random((1, 1, 8, 8)).astype(np.float32), requires_grad=True)
    t_out = detach(teacher_forward(teacher, spi_fuse(map_pool(teacher_encode(teacher, x), S), x)))
    loss = total_loss(psnr_loss(x, np.zeros((1, 1, 8, 8), np.float32)), skd_loss(x, t_out),
                      scm_loss(x, t_out, S, phi, pooled=True))
    loss.backward()
    assert x.grad is not None
    for p in teacher.parameters() + phi.parameters():
        assert p.grad is None or not np.any(p.grad)


# --- total ------------------------------------------------------------------

def test_total_loss_arithmetic():
    out = total_loss(T(-20.0), T(0.125), T(0.01), LossWeights(0.01, 100))
    assert out.item() == pytest.approx(-18.99875, abs=1e-12)
    assert total_loss(T(-7.0), T(3.0), T(1.0), LossWeights(0, 0)).item() == -7.0
    with pytest.raises(ValueError):
        LossWeights(-1, 0)


def test_total_loss_gradient_is_weighted_sum():
    rng = np.random.default_rng(13)
    phi = FeatureExtractor().astype(np.float64)
    x = T(rng.random((1, 1, 8, 8)), grad=True)
    ref, teach = rng.random((1, 1, 8, 8)), rng.random((1, 1, 8, 8))
    S = _maps(13)
    w = LossWeights(0.5, 2.0)

    def parts():
        return psnr_loss(x, ref), skd_loss(x, teach), scm_loss(x, teach, S, phi, pooled=True)
    grads = []
    for i in range(3):
        x.grad = None
        parts()[i].backward()
        grads.append(x.grad.copy())
    x.grad = None
    total_loss(*parts(), w).backward()
    assert np.allclose(x.grad, grads[0] + 0.5 * grads[1] + 2.0 * grads[2], rtol=1e-10, atol=1e-14)
    assert check_tensor_grads(lambda: total_loss(*parts(), w), [x], eps=1e-6) < 1e-4
