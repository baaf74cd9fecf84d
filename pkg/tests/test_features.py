import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rfa.errors import ParameterError, UnsupportedKindError
from rfa.features import (FeatureMapSpec, apply_map, build_feature_map, build_pool, gaussian_kernel,
                          kernel_estimate, monte_carlo_estimates, rff_variance, sigma_for_temperature)
from rfa.numerics import RngState, derive_seed, l2_normalize, seeded_normal_matrix

vec4 = arrays(np.float64, 4, elements=st.floats(-5, 5))


def gaussian(d=2, D=4, sigma=1.0, seed=1):
    return build_feature_map(FeatureMapSpec("gaussian", d, D, sigma, seed))


def test_build_is_deterministic():
    assert np.array_equal(gaussian().W, gaussian().W)


def test_sigma_scales_rows_exactly():
    assert np.array_equal(gaussian(sigma=(2.0, 2.0)).W, 2.0 * gaussian().W)


def test_raw_draws_recoverable():
    fmap = gaussian(d=3, D=5, sigma=(0.5, 2.0, 4.0))
    assert np.array_equal(fmap.W / fmap.sigma, fmap.raw)
    odd = gaussian(d=3, D=5, sigma=(0.3, 1.7, 3.0))
    assert np.allclose(odd.W / odd.sigma, odd.raw, rtol=1e-15, atol=0)


@pytest.mark.parametrize("kwargs", [
    dict(kind="gaussian", d=2, sigma=(1.0, -1.0)),
    dict(kind="gaussian", d=2, sigma=0.0),
    dict(kind="gaussian", d=2, sigma=(1.0, 1.0, 1.0)),
    dict(kind="gaussian", d=0),
    dict(kind="arccos", d=2, D=0),
    dict(kind="laplace", d=2),
])
def test_invalid_specs(kwargs):
    with pytest.raises(ParameterError):
        FeatureMapSpec(**kwargs)


def test_elu_ignores_D():
    spec = FeatureMapSpec("elu", 3, D=0)
    assert spec.output_dim == 3


@pytest.mark.parametrize("kind,expected", [("gaussian", 8), ("arccos", 4), ("elu", 3)])
def test_output_dims(kind, expected):
    fmap = build_feature_map(FeatureMapSpec(kind, 3, 4))
    assert fmap.output_dim == expected
    assert apply_map(fmap, np.ones(3)).shape == (expected,)


def test_pool_members_distinct_and_reproducible():
    spec = FeatureMapSpec("gaussian", 3, 4, seed=9)
    pool = build_pool(spec, 3)
    assert pool.P == 3
    for i in range(3):
        for j in range(i + 1, 3):
            assert not np.array_equal(pool[i].W, pool[j].W)
    again = build_pool(spec, 3)
    assert all(np.array_equal(a.W, b.W) for a, b in zip(pool.maps, again.maps))
    assert pool.draw(4) is pool[1]


def test_pool_of_one_matches_index_zero_subseed():
    spec = FeatureMapSpec("gaussian", 3, 4, seed=9)
    single = build_feature_map(FeatureMapSpec("gaussian", 3, 4, seed=derive_seed(9, 0)))
    assert np.array_equal(build_pool(spec, 1)[0].W, single.W)


def test_pool_rejects_zero():
    with pytest.raises(ParameterError):
        build_pool(FeatureMapSpec("gaussian", 3, 4), 0)


def test_gaussian_at_zero_input():
    D = 4
    phi = apply_map(gaussian(D=D), np.zeros(2))
    assert np.allclose(phi, np.r_[np.zeros(D), np.ones(D)] / math.sqrt(D), atol=0, rtol=0)


def test_gaussian_layout_sines_then_cosines():
    fmap = gaussian(d=3, D=5)
    x = np.array([0.3, -0.2, 0.9])
    a = fmap.W @ x
    expected = np.r_[np.sin(a), np.cos(a)] / math.sqrt(5)
    assert np.allclose(apply_map(fmap, x), expected, rtol=0, atol=1e-15)


def test_arccos_formula():
    fmap = build_feature_map(FeatureMapSpec("arccos", 3, 6, seed=2))
    x = np.array([0.3, -0.2, 0.9])
    assert np.allclose(apply_map(fmap, x), np.maximum(fmap.W @ x, 0) / math.sqrt(6), rtol=0, atol=1e-15)


def test_elu_example():
    phi = apply_map(build_feature_map(FeatureMapSpec("elu", 2)), np.array([0.0, -20.0]))
    assert phi[0] == 1.0 and abs(phi[1] - math.exp(-20)) < 1e-15 and np.all(phi > 0)


def test_batched_apply_matches_rows():
    fmap = gaussian(d=3, D=5)
    X, _ = seeded_normal_matrix(RngState(4), 6, 3)
    batched = apply_map(fmap, X.reshape(2, 3, 3))
    rows = np.stack([apply_map(fmap, x) for x in X]).reshape(2, 3, 10)
    assert np.allclose(batched, rows, atol=1e-15)


def test_dimension_mismatch():
    with pytest.raises(ParameterError):
        apply_map(gaussian(d=2), np.ones(3))


@given(vec4)
def test_gaussian_unit_norm(x):
    phi = apply_map(gaussian(d=4, D=16), x)
    assert abs(phi @ phi - 1.0) <= 1e-12


@given(vec4, vec4)
def test_gaussian_estimate_bounded(x, y):
    fmap = gaussian(d=4, D=16)
    assert abs(kernel_estimate(fmap, x, y)) <= 1 + 1e-12
    assert abs(kernel_estimate(fmap, x, x) - 1.0) <= 1e-12


@given(vec4)
def test_arccos_nonnegative(x):
    fmap = build_feature_map(FeatureMapSpec("arccos", 4, 16, seed=3))
    assert np.all(apply_map(fmap, x) >= 0)


def test_elu_has_no_estimate():
    fmap = build_feature_map(FeatureMapSpec("elu", 2))
    with pytest.raises(UnsupportedKindError):
        kernel_estimate(fmap, np.ones(2), np.ones(2))
    with pytest.raises(UnsupportedKindError):
        monte_carlo_estimates(FeatureMapSpec("elu", 2), np.ones(2), np.ones(2), 10)


def test_monte_carlo_blocks_match_realized_maps():
    spec = FeatureMapSpec("gaussian", 3, 4, seed=12)
    x, y = np.array([0.1, 0.2, 0.3]), np.array([-0.3, 0.0, 0.5])
    est = monte_carlo_estimates(spec, x, y, 5)
    raw, _ = seeded_normal_matrix(RngState(12), 20, 3)
    from rfa.features import RealizedFeatureMap
    for i in range(5):
        fmap = RealizedFeatureMap(spec, raw[4 * i:4 * i + 4])
        assert abs(est[i] - kernel_estimate(fmap, x, y)) < 1e-14


def test_monte_carlo_unbiased_at_half_cosine():
    # unit x, y with x.y = 0.5 so |x - y|^2 = 1
    x = np.array([1.0, 0.0, 0.0])
    y = np.array([0.5, math.sqrt(0.75), 0.0])
    est = monte_carlo_estimates(FeatureMapSpec("gaussian", 3, 1, 1.0, seed=77), x, y, 1_000_000)
    se = est.std(ddof=1) / math.sqrt(est.size)
    assert abs(est.mean() - math.exp(-0.5)) <= 3 * se


def test_rff_variance_examples():
    assert rff_variance(0.0, 16) == 0.0
    assert abs(rff_variance(1e3, 8) - 0.0625) < 1e-15
    assert abs(rff_variance(math.sqrt(math.log(2)), 4) - 0.03125) < 1e-15


def test_rff_variance_matches_monte_carlo():
    z = math.sqrt(math.log(2))
    x = np.zeros(4)
    y = np.array([z, 0.0, 0.0, 0.0])
    est = monte_carlo_estimates(FeatureMapSpec("gaussian", 4, 4, 1.0, seed=5), x, y, 100_000)
    assert abs(est.var(ddof=1) / 0.03125 - 1.0) <= 0.10


def test_rff_variance_preconditions():
    with pytest.raises(ParameterError):
        rff_variance(-1.0, 4)
    with pytest.raises(ParameterError):
        rff_variance(1.0, 0)


def test_sigma_for_temperature_targets_scaled_kernel():
    tau = 2.5
    s = sigma_for_temperature(tau)
    x, y = l2_normalize(np.array([1.0, 2.0])), l2_normalize(np.array([-1.0, 0.5]))
    assert abs(gaussian_kernel(x, y, s) - math.exp(-np.sum((x - y) ** 2) / (2 * tau))) < 1e-15
    with pytest.raises(ParameterError):
        sigma_for_temperature(0.0)


def test_with_sigma_keeps_draws():
    fmap = gaussian(d=2, D=3)
    other = fmap.with_sigma([0.5, 3.0])
    assert np.array_equal(other.raw, fmap.raw)
    assert np.array_equal(other.W, fmap.raw * np.array([0.5, 3.0]))
    with pytest.raises(ParameterError):
        fmap.with_sigma([1.0, 0.0])
