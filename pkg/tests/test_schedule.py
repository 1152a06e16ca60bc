import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nestdiff.schedule import forward_sample, make_schedule, posterior_coefficients, posterior_params


def test_linear_T1_matches_increment_formula():
    s = make_schedule("linear", 1)
    # one increment of 0.02 * 1000 / 1, capped at 0.99
    b = min(0.02 * 1000.0, 0.99)
    assert s.alpha[1] ** 2 == pytest.approx(1.0 - b, abs=1e-15)
    assert 0 < s.alpha[1] < 1


def test_linear_increments_by_hand():
    s = make_schedule("linear", 4)
    # 1e-4*250 .. 0.02*250 in 4 equal steps
    b = [0.025 + k * (5.0 - 0.025) / 3 for k in range(4)]
    b = [min(x, 0.99) for x in b]
    ab = 1.0
    for t in range(1, 5):
        ab *= 1 - b[t - 1]
        assert s.alpha[t] == pytest.approx(math.sqrt(ab), rel=1e-12)


@pytest.mark.parametrize("kind", ["linear", "cosine"])
@pytest.mark.parametrize("T", [1, 2, 3, 10, 15, 16, 100, 1000])
def test_invariants(kind, T):
    s = make_schedule(kind, T)
    assert s.alpha[0] == 1.0 and s.beta[0] == 0.0
    assert len(s.alpha) == T + 1 and len(s.beta) == T + 1
    np.testing.assert_allclose(s.alpha**2 + s.beta**2, 1.0, atol=1e-12)
    assert np.all(s.alpha[1:] > 0) and np.all(s.alpha <= 1)
    assert np.all(s.beta >= 0) and np.all(s.beta < 1)
    snr = s.snr()
    assert np.all(np.diff(snr[1:]) < 0)


def test_cosine_T100_snr_pairwise():
    s = make_schedule("cosine", 100)
    snr = [s.alpha[t] ** 2 / s.beta[t] ** 2 for t in range(1, 101)]
    assert all(a > b for a, b in zip(snr, snr[1:]))


def test_rejects_bad_arguments():
    with pytest.raises(ValueError):
        make_schedule("linear", 0)
    with pytest.raises(ValueError):
        make_schedule("sigmoid", 10)


def test_forward_sample_examples(rng):
    s = make_schedule("linear", 100)
    z, eps = rng.standard_normal(5), rng.standard_normal(5)
    np.testing.assert_array_equal(forward_sample(s, z, 0, eps), z)
    np.testing.assert_array_equal(forward_sample(s, np.zeros(5), 37, eps), s.beta[37] * eps)
    out = forward_sample(s, [1.0, 0.0], 100, [0.0, 1.0])
    np.testing.assert_array_equal(out, [s.alpha[100], s.beta[100]])


def test_forward_sample_errors():
    s = make_schedule("linear", 10)
    with pytest.raises(ValueError):
        forward_sample(s, np.zeros(3), 1, np.zeros(4))
    with pytest.raises(ValueError):
        forward_sample(s, np.zeros(3), 11, np.zeros(3))
    with pytest.raises(ValueError):
        forward_sample(s, np.zeros(3), -1, np.zeros(3))


def test_forward_sample_per_row_steps(rng):
    s = make_schedule("linear", 10)
    z, eps = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    t = np.array([0, 5, 10])
    out = forward_sample(s, z, t, eps)
    for i in range(3):
        np.testing.assert_array_equal(out[i], forward_sample(s, z[i], int(t[i]), eps[i]))


def test_forward_sample_variance():
    s = make_schedule("linear", 100)
    rng = np.random.default_rng(0)
    t = 30
    z = rng.normal(0.0, 2.0, size=100_000)
    out = forward_sample(s, z, t, rng.standard_normal(z.shape))
    expected = s.alpha[t] ** 2 * z.var() + s.beta[t] ** 2
    assert out.var() == pytest.approx(expected, rel=0.05)


def test_posterior_examples(rng):
    s = make_schedule("linear", 4)
    mean, var = posterior_params(s, np.zeros(3), np.zeros(3), 3)
    np.testing.assert_array_equal(mean, 0.0)
    assert posterior_params(s, np.ones(2), np.ones(2), 1)[1] == 0.0
    # closed form at t=2 evaluated from the arrays
    z0, zt = rng.standard_normal(3), rng.standard_normal(3)
    ab1, ab2 = s.alpha[1] ** 2, s.alpha[2] ** 2
    b2 = 1 - ab2 / ab1
    mu = math.sqrt(ab1) * b2 / (1 - ab2) * z0 + math.sqrt(1 - b2) * (1 - ab1) / (1 - ab2) * zt
    var = (1 - ab1) / (1 - ab2) * b2
    m, v = posterior_params(s, z0, zt, 2)
    np.testing.assert_allclose(m, mu, rtol=1e-12)
    assert v == pytest.approx(var, rel=1e-12)


def test_posterior_rejects_t0():
    s = make_schedule("linear", 4)
    with pytest.raises(ValueError):
        posterior_params(s, np.zeros(2), np.zeros(2), 0)


def test_posterior_matches_gaussian_conditioning(rng):
    # q(z_{t-1} | z_t, z0) from the joint Gaussian of (z_{t-1}, z_t) given z0
    s = make_schedule("cosine", 20)
    for t in range(2, 21):
        a_prev, a_t = s.alpha[t - 1], s.alpha[t]
        r = a_t / a_prev
        v_prev = 1 - a_prev**2
        cov = r * v_prev
        v_t = 1 - a_t**2
        c0, ct, var = posterior_coefficients(s, t)
        # mean = a_prev z0 + cov / v_t (zt - a_t z0)
        assert ct == pytest.approx(cov / v_t, rel=1e-10)
        assert c0 == pytest.approx(a_prev - cov / v_t * a_t, rel=1e-9, abs=1e-12)
        assert var == pytest.approx(v_prev - cov**2 / v_t, rel=1e-9, abs=1e-15)


@given(st.integers(1, 200), st.sampled_from(["linear", "cosine"]), st.integers(0, 2**32 - 1))
def test_ancestral_chain_with_true_noise_recovers_z0(T, kind, seed):
    # with the true z0 and all injected noise zero, the chain lands on z0 exactly at t=0
    s = make_schedule(kind, T)
    rng = np.random.default_rng(seed)
    z0 = rng.standard_normal(4)
    z = forward_sample(s, z0, T, rng.standard_normal(4))
    for t in range(T, 0, -1):
        z, var = posterior_params(s, z0, z, t)
    assert var == 0.0
    np.testing.assert_allclose(z, z0, atol=1e-9)
