import math

import numpy as np
import pytest

from nestdiff import sampler as sampler_mod
from nestdiff.config import NestedConfig
from nestdiff.hierarchy import build_latents, generation_noise_scale
from nestdiff.sampler import (
    images_of,
    replay,
    resample_from_level,
    sample_hierarchy,
    sample_level,
)
from nestdiff.trainer import train_nested


@pytest.fixture(scope="module")
def bundle(tiny_data):
    cfg = NestedConfig(L=3, d=32, T=20, steps=40, batch_size=16, hidden=[32, 32], image_size=16,
                       sigma=[0.2, 0.3], seed=2)
    return train_nested(cfg, tiny_data)


def test_sample_shapes_and_range(bundle):
    traces = sample_hierarchy(bundle, 5, np.random.default_rng(0))
    assert len(traces) == 5
    for tr in traces:
        assert [len(tr.z[l]) for l in (1, 2, 3)] == [256, 64, 32]
        assert tr.image.shape == (16, 16)
        assert set(tr.seeds) == {1, 2, 3}
        assert set(tr.cond_noise) == {1, 2}
    imgs = images_of(traces)
    assert imgs.min() >= -1 and imgs.max() <= 1


def test_sampling_reproducible(bundle):
    a = images_of(sample_hierarchy(bundle, 4, np.random.default_rng(7), cfg_weights=0.5))
    b = images_of(sample_hierarchy(bundle, 4, np.random.default_rng(7), cfg_weights=0.5))
    assert np.array_equal(a, b)


def test_trajectories_independent_of_batch(bundle):
    traces = sample_hierarchy(bundle, 4, np.random.default_rng(3))
    again = replay(bundle, traces[2:3], bundle.L)
    # same noise stream per row; only matmul rounding may differ with batch size
    np.testing.assert_allclose(again[0].image, traces[2].image, rtol=0, atol=1e-12)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_replay_reproduces_stored_image(bundle, k):
    traces = sample_hierarchy(bundle, 3, np.random.default_rng(1), cfg_weights=[0.2, 0.4, 0.0], gamma=0.3)
    again = replay(bundle, traces, k)
    for a, b in zip(traces, again):
        assert np.array_equal(a.image, b.image)
        for l in range(1, 4):
            assert np.array_equal(a.z[l], b.z[l])


def test_k0_resample_returns_source_exactly(bundle):
    tr = sample_hierarchy(bundle, 1, np.random.default_rng(5))[0]
    out = resample_from_level(bundle, tr, 0, np.random.default_rng(99))
    assert np.array_equal(out.image, tr.image)
    assert out.inherited == (1, 2, 3)


def test_full_depth_resample_equals_fresh_sampling(bundle, tiny_data):
    fresh = sample_hierarchy(bundle, 3, np.random.default_rng(11))
    res = resample_from_level(bundle, tiny_data.images[:3], 3, np.random.default_rng(11))
    assert np.array_equal(images_of(fresh), images_of(res))
    assert all(tr.inherited == () for tr in res)


def test_resample_keeps_upper_latents(bundle, tiny_data):
    lat = build_latents(bundle.encoder, tiny_data.images[:4], bundle.config)
    res = resample_from_level(bundle, tiny_data.images[:4], 1, np.random.default_rng(0))
    for j, tr in enumerate(res):
        assert tr.inherited == (2, 3)
        np.testing.assert_array_equal(tr.z[2], lat[2][j])
        np.testing.assert_array_equal(tr.z[3], lat[3][j])
    single = resample_from_level(bundle, tiny_data.images[0], 2, np.random.default_rng(0))
    assert single.image.shape == (16, 16)
    with pytest.raises(ValueError):
        resample_from_level(bundle, tiny_data.images[0], 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        resample_from_level(bundle, tiny_data.images[0], -1, np.random.default_rng(0))


def _record_conditions(monkeypatch):
    calls = []
    real = sampler_mod.predict_noise

    def spy(net, z, t, cond, T):
        calls.append((t, None if cond is None else np.array(cond)))
        return real(net, z, t, cond, T)

    monkeypatch.setattr(sampler_mod, "predict_noise", spy)
    return calls


@pytest.mark.parametrize("gamma", [0.0, 0.3, 2.0])
def test_condition_noise_is_one_scaled_draw(bundle, monkeypatch, gamma):
    calls = _record_conditions(monkeypatch)
    net = bundle.nets[2]
    cond = np.random.default_rng(0).standard_normal((1, net.c_dim))
    sig = np.full(net.c_dim, 0.3)
    _, xi = sample_level(net, bundle.schedule, cond, 0.0, gamma, sig, np.random.default_rng(4))
    T = bundle.schedule.T
    seen = [(t, c) for t, c in calls if c is not None]
    assert [t for t, _ in seen] == list(range(T, 0, -1))
    for t, c in seen:
        np.testing.assert_allclose(c, cond + generation_noise_scale(0.3, t, T, gamma) * xi, rtol=0, atol=1e-15)


def test_gamma_inf_feeds_clean_condition_below_T(bundle, monkeypatch):
    calls = _record_conditions(monkeypatch)
    net = bundle.nets[1]
    cond = np.random.default_rng(0).standard_normal((2, net.c_dim))
    sample_level(net, bundle.schedule, cond, 0.0, math.inf, bundle.sigma_vector(1), np.random.default_rng(4))
    T = bundle.schedule.T
    for t, c in calls:
        if t < T:
            assert np.array_equal(c, cond)


def test_guidance_calls(bundle, monkeypatch):
    calls = _record_conditions(monkeypatch)
    net = bundle.nets[1]
    cond = np.zeros((1, net.c_dim))
    sample_level(net, bundle.schedule, cond, 0.0, math.inf, bundle.sigma_vector(1), np.random.default_rng(0))
    assert all(c is not None for _, c in calls)
    calls.clear()
    sample_level(net, bundle.schedule, cond, 0.5, math.inf, bundle.sigma_vector(1), np.random.default_rng(0))
    assert sum(c is None for _, c in calls) == bundle.schedule.T


def test_default_gamma_follows_guidance(bundle):
    plain = sample_hierarchy(bundle, 1, np.random.default_rng(0))[0]
    guided = sample_hierarchy(bundle, 1, np.random.default_rng(0), cfg_weights=0.4)[0]
    assert plain.gamma == math.inf and guided.gamma == 0.3
    assert guided.weights == {1: 0.4, 2: 0.4, 3: 0.4}


def test_weight_count_checked(bundle):
    with pytest.raises(ValueError):
        sample_hierarchy(bundle, 1, np.random.default_rng(0), cfg_weights=[0.1, 0.2])


def test_final_step_is_noise_free(bundle, monkeypatch):
    # zero-variance last step: with a fixed net, only the rng stream decides the result
    net = bundle.nets[3]
    a, _ = sample_level(net, bundle.schedule, None, 0.0, math.inf, np.zeros(0), np.random.default_rng(8), n=2)
    b, _ = sample_level(net, bundle.schedule, None, 0.0, math.inf, np.zeros(0),
                        [np.random.default_rng(8), np.random.default_rng(8)], n=2)
    assert a.shape == (2, 32)
    assert np.array_equal(b[0], b[1])
