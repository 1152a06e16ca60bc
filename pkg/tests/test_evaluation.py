import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nestdiff.config import NestedConfig
from nestdiff.denoiser import init_denoiser
from nestdiff.evaluation import (
    MetricsRecord,
    count_flops,
    count_flops_config,
    eval_run,
    frechet_distance,
    resampling_distances,
    write_record,
)
from nestdiff.trainer import train_nested
from nestdiff.denoiser import count_macs


def _gauss_fd(mu_a, cov_a, mu_b, cov_b):
    """Reference via scipy's general (non-symmetric) matrix square root."""
    from scipy.linalg import sqrtm

    cross = sqrtm(cov_a @ cov_b).real
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2 * cross))


def test_identical_sets_zero():
    x = np.random.default_rng(0).standard_normal((200, 5))
    assert frechet_distance(x, x) == pytest.approx(0.0, abs=1e-8)


def test_unit_shift_in_one_dim():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((200_000, 1))
    b = rng.standard_normal((200_000, 1)) + 1.0
    assert frechet_distance(a, b) == pytest.approx(1.0, rel=0.05)


def test_matches_scipy_reference():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((4, 4))
    a = rng.standard_normal((500, 4)) @ A
    b = rng.standard_normal((400, 4)) * 1.5 + 0.3
    reg = 1e-6 * np.eye(4)
    ref = _gauss_fd(a.mean(0), np.cov(a, rowvar=False) + reg, b.mean(0), np.cov(b, rowvar=False) + reg)
    assert frechet_distance(a, b) == pytest.approx(ref, rel=1e-8)


@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_fd_symmetric_and_nonnegative(seed, D):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((D + 3, D)) * rng.uniform(0.1, 3)
    b = rng.standard_normal((D + 5, D)) + rng.standard_normal(D)
    f = frechet_distance(a, b)
    assert f >= 0
    assert f == pytest.approx(frechet_distance(b, a), rel=1e-9, abs=1e-9)


def test_fd_shape_errors():
    x = np.zeros((10, 3))
    with pytest.raises(ValueError):
        frechet_distance(x, np.zeros((10, 4)))
    with pytest.raises(ValueError):
        frechet_distance(np.zeros((3, 3)), x)
    with pytest.raises(ValueError):
        frechet_distance(np.zeros((100, 65)), np.zeros((100, 65)))


def test_single_layer_macs():
    net = init_denoiser(1, 2, 0, np.random.default_rng(0), time_dim=2, hidden=())
    assert net.layer_shapes() == [(4, 2)]
    assert count_macs(net) == 8


def test_default_flops_ratio_and_growth():
    r3 = count_flops_config(NestedConfig(L=3))
    assert r3.ratio < 1.5
    ratios = [count_flops_config(NestedConfig(L=L, sigma=[0.1] * (L - 1))).ratio for L in range(1, 6)]
    assert ratios[0] == 1.0
    assert all(b > a for a, b in zip(ratios, ratios[1:]))
    # pixel level: (1024 + 32 + 64 + 32) -> 256 -> 256 -> 1024
    assert r3.per_level[1] == 1152 * 256 + 256 * 256 + 256 * 1024


@pytest.fixture(scope="module")
def bundle(tiny_data):
    cfg = NestedConfig(L=2, d=32, T=20, steps=60, batch_size=16, hidden=[32, 32], image_size=16,
                       sigma=[0.3], seed=0)
    return train_nested(cfg, tiny_data)


def test_bundle_flops_agree_with_config(bundle):
    rep = count_flops(bundle)
    ref = count_flops_config(bundle.config)
    assert rep.per_level == ref.per_level and rep.baseline == ref.baseline


def test_bootstrap_of_real_data_is_near_zero(bundle, tiny_data):
    enc = bundle.encoder
    rng = np.random.default_rng(0)
    big = np.concatenate([tiny_data.images] * 3)
    boot = big[rng.integers(0, len(big), size=len(big))]
    same = frechet_distance(enc.features(boot), enc.features(big))
    noise = frechet_distance(enc.features(rng.uniform(-1, 1, big.shape)), enc.features(big))
    assert same < 0.1 * noise


def test_resampling_distances_keys(bundle, tiny_data):
    d = resampling_distances(bundle, tiny_data.images[:6], np.random.default_rng(0))
    assert sorted(d) == [1, 2]
    assert all(v >= 0 for v in d.values())


def test_eval_run_and_record_roundtrip(bundle, tiny_data, tmp_path):
    rec, art = eval_run(bundle, tiny_data, 40, np.random.default_rng(0), run_id="r1", n_sources=8, knn_k=5)
    assert rec.toy_fd >= 0
    assert 0 <= rec.knn_top1 <= rec.knn_top5 <= 1
    assert sorted(rec.capacity_kl) == [2] and sorted(rec.resample_distance) == [1, 2]
    assert art["samples"].shape == (40, 16, 16)
    back = MetricsRecord.from_json(rec.to_json())
    assert back == rec
    path = write_record(rec, tmp_path / "runs", tmp_path / "summary.csv")
    assert json.loads(path.read_text())["run_id"] == "r1"
    write_record(MetricsRecord.from_json(rec.to_json().replace('"r1"', '"r2"')), tmp_path / "runs",
                 tmp_path / "summary.csv")
    rows = (tmp_path / "summary.csv").read_text().splitlines()
    assert len(rows) == 3 and rows[0].startswith("run_id,")
    with pytest.raises(ValueError):
        eval_run(bundle, tiny_data, 32, np.random.default_rng(0))


def test_record_validation():
    rec = MetricsRecord("x", 1.0, 0.5, 0.7, {1: 10}, 1.0, {}, {1: 0.1}, {})
    rec.validate()
    with pytest.raises(ValueError):
        MetricsRecord("x", float("nan"), 0.5, 0.7, {1: 10}, 1.0, {}, {}, {}).validate()
    with pytest.raises(ValueError):
        MetricsRecord("x", 1.0, 0.5, 0.7, {1: 0}, 1.0, {}, {}, {}).validate()
