import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nestdiff.data import Dataset
from nestdiff.encoder import (
    _fit_scale,
    encode_level,
    fit_encoder,
    knn_accuracy,
    patchify,
    unpatchify,
)


def test_patchify_examples():
    img = np.arange(32 * 32, dtype=float).reshape(32, 32)
    one = patchify(img, 1)
    assert len(one) == 1 and np.array_equal(one[0], img)
    four = patchify(img, 2)
    assert [p.shape for p in four] == [(16, 16)] * 4
    assert np.array_equal(four[1], img[:16, 16:])
    q = np.zeros((8, 8))
    q[:4, :4], q[:4, 4:], q[4:, :4], q[4:, 4:] = 1, 2, 3, 4
    assert [float(p.mean()) for p in patchify(q, 2)] == [1, 2, 3, 4]
    assert all(np.ptp(p) == 0 for p in patchify(q, 2))


def test_patchify_indivisible():
    with pytest.raises(ValueError):
        patchify(np.zeros((32, 32)), 3)


@given(st.sampled_from([1, 2, 4, 8]), st.integers(0, 2**31))
def test_patchify_round_trip(M, seed):
    img = np.random.default_rng(seed).standard_normal((16, 16))
    assert np.array_equal(unpatchify(patchify(img, M), M), img)


def test_scales_and_channels(small_data):
    enc = fit_encoder(small_data, 3, 32, seed=0)
    assert enc.patch_scales == [1, 2]
    assert enc.projection(1).channels == 32 and enc.projection(2).channels == 16
    for M in enc.patch_scales:
        B = enc.projection(M).basis
        np.testing.assert_allclose(B @ B.T, np.eye(len(B)), atol=1e-8)
        # sign convention: the largest-magnitude entry of each direction is positive
        idx = np.argmax(np.abs(B), axis=1)
        assert np.all(B[np.arange(len(B)), idx] > 0)


def test_encode_level_shapes(small_data):
    enc = fit_encoder(small_data, 3, 32, seed=0)
    img = small_data.images[0]
    assert encode_level(enc, img, 3, 3).shape == (1, 32)
    assert encode_level(enc, img, 2, 3).shape == (4, 16)
    assert encode_level(enc, img, 2, 3).size == 2 * 32
    with pytest.raises(ValueError):
        encode_level(enc, img, 1, 3)
    with pytest.raises(ValueError):
        encode_level(enc, img, 4, 3)


def test_dyadic_shapes(small_data):
    enc = fit_encoder(small_data, 4, 32, seed=0, shape_schedule="dyadic")
    assert enc.patch_scales == [1, 2, 4]
    img = small_data.images[0]
    # 1 x 32, 4 x 16, 16 x 8: the halving-channel pattern
    assert [encode_level(enc, img, l, 4).shape for l in (4, 3, 2)] == [(1, 32), (4, 16), (16, 8)]


def test_mean_image_encodes_to_zero(small_data):
    enc = fit_encoder(small_data, 3, 32, seed=0)
    # the per-scale mean patch tiles into the mean image at each scale
    for M in enc.patch_scales:
        p = enc.projection(M)
        side = 32 // M
        mean_img = unpatchify([p.mean.reshape(side, side)] * (M * M), M)
        np.testing.assert_allclose(enc.encode_scale(mean_img, M), 0.0, atol=1e-12)


def test_rank_one_patches_explained_fully():
    rng = np.random.default_rng(0)
    direction = rng.standard_normal(16)
    X = rng.standard_normal((50, 1)) * direction
    proj = _fit_scale(X, 1, "pca", rng)
    c = proj.project(X)
    resid = X - proj.reconstruct(c)
    assert np.abs(resid).max() < 1e-10


def test_projection_idempotent(small_data):
    enc = fit_encoder(small_data, 3, 32, seed=0)
    p = enc.projection(2)
    rng = np.random.default_rng(3)
    c = rng.standard_normal((5, p.channels))
    np.testing.assert_allclose(p.project(p.reconstruct(c)), c, atol=1e-8)


def test_reconstruction_error_non_increasing(small_data):
    X = small_data.images.reshape(len(small_data), -1)
    errs = []
    for k in range(1, 33):
        p = _fit_scale(X, k, "pca", np.random.default_rng(0))
        errs.append(np.mean((X - p.reconstruct(p.project(X))) ** 2))
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_channel_variance_ordering(small_data):
    enc = fit_encoder(small_data, 3, 32, seed=0)
    for l in (2, 3):
        z = encode_level(enc, small_data.images, l, 3)
        var = z.reshape(-1, z.shape[-1]).var(axis=0)
        assert np.all(np.diff(var) <= 1e-12)


def test_unit_patch_energy(small_data):
    enc = fit_encoder(small_data, 3, 32, seed=0)
    for M in enc.patch_scales:
        z = enc.encode_scale(small_data.images, M)
        assert np.mean(np.sum(z**2, axis=-1)) == pytest.approx(1.0, rel=1e-9)


def test_fit_deterministic(small_data):
    a = fit_encoder(small_data, 3, 32, seed=4)
    b = fit_encoder(small_data, 3, 32, seed=4)
    for M in a.patch_scales:
        assert np.array_equal(a.projection(M).basis, b.projection(M).basis)
        assert np.array_equal(a.projection(M).mean, b.projection(M).mean)


def test_fit_errors(small_data):
    with pytest.raises(ValueError, match="insufficient"):
        fit_encoder(small_data.subset(np.arange(10)), 2, 32)
    flat = Dataset(np.zeros((40, 32, 32)), np.zeros(40), np.zeros(40))
    with pytest.raises(ValueError, match="degenerate"):
        fit_encoder(flat, 2, 32)
    with pytest.raises(ValueError):
        fit_encoder(small_data, 4, 32)  # linear schedule needs M=3, 32 % 3 != 0
    with pytest.raises(ValueError):
        fit_encoder(small_data, 3, 32, kind="ica")


def test_random_encoder_same_dims(small_data):
    pca = fit_encoder(small_data, 3, 32, seed=0)
    rnd = fit_encoder(small_data, 3, 32, seed=0, kind="random")
    for M in pca.patch_scales:
        assert pca.projection(M).basis.shape == rnd.projection(M).basis.shape
        B = rnd.projection(M).basis
        np.testing.assert_allclose(B @ B.T, np.eye(len(B)), atol=1e-8)


def _knn_reference(F, y, K):
    """Plain-loop leave-one-out KNN with the documented tie rules."""
    N = len(F)
    classes = sorted(set(y.tolist()))
    hit1 = hit5 = 0
    for i in range(N):
        d = [(float(np.sum((F[j] - F[i]) ** 2)), j) for j in range(N) if j != i]
        d.sort()
        nb = [j for _, j in d[:K]]
        votes = {c: sum(1 for j in nb if y[j] == c) for c in classes}
        order = sorted(classes, key=lambda c: (-votes[c], c))
        hit1 += order[0] == y[i]
        hit5 += y[i] in [c for c in order[:5] if votes[c] > 0]
    return hit1 / N, hit5 / N


@given(st.integers(0, 2**31), st.integers(1, 7), st.integers(2, 8))
def test_knn_matches_reference(seed, K, C):
    rng = np.random.default_rng(seed)
    N = 24
    F = rng.integers(-2, 3, size=(N, 2)).astype(float)  # many exact ties
    y = rng.integers(0, C, size=N)
    if len(np.unique(y)) < 2:
        y[0], y[1] = 0, 1
    assert knn_accuracy(F, y, K) == pytest.approx(_knn_reference(F, y, K))


def test_knn_examples():
    rng = np.random.default_rng(0)
    F = np.concatenate([rng.normal(0, 0.1, (20, 2)), rng.normal(10, 0.1, (20, 2))])
    y = np.repeat([0, 1], 20)
    assert knn_accuracy(F, y, 1)[0] == 1.0
    # identical features: neighbours are the K smallest other indices
    F0 = np.zeros((30, 3))
    y0 = np.array([0] * 18 + [1] * 12)
    top1, _ = knn_accuracy(F0, y0, 20)
    assert top1 == pytest.approx(18 / 30)
    with pytest.raises(ValueError):
        knn_accuracy(F0, y0, 30)
    with pytest.raises(ValueError):
        knn_accuracy(F0, np.zeros(30), 3)


def test_knn_random_labels_near_chance():
    rng = np.random.default_rng(5)
    N, C = 1500, 4
    F = rng.standard_normal((N, 8))
    y = rng.integers(0, C, size=N)
    top1, _ = knn_accuracy(F, y, 20)
    sd = np.sqrt(0.25 * 0.75 / N)
    assert abs(top1 - 1 / C) <= 3 * sd


@given(arrays(np.float64, (12, 3), elements=st.floats(-5, 5)))
def test_knn_fractions_in_unit_interval(F):
    y = np.arange(12) % 3
    top1, top5 = knn_accuracy(F, y, 4)
    assert 0 <= top1 <= top5 <= 1
