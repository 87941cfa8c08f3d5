import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from henselfl.exceptions import DomainError
from henselfl.privacy import (GaussianNoiser, GaussianStream, PrivacyParams, add_noise,
                              cumulative_leakage, derive_seed, gaussian_variance, make_generator)


@pytest.mark.parametrize("epsilon, expected", [(2.0, 0.25), (1.25, 0.64), (1.0, 1.0), (1.5, 1 / 2.25)])
def test_gaussian_variance_examples(epsilon, expected):
    assert gaussian_variance(PrivacyParams(epsilon)) == pytest.approx(expected, rel=1e-12)


def test_table_variance_for_1_5_rounds_to_044():
    assert round(gaussian_variance(PrivacyParams(1.5)), 2) == 0.44


def test_sensitivity_scales_standard_deviation():
    params = PrivacyParams(2.0, sensitivity=3.0)
    assert params.std() == 1.5
    assert gaussian_variance(params) == 2.25


@pytest.mark.parametrize("bad", [dict(epsilon=0.0), dict(epsilon=-1.0), dict(epsilon=math.inf),
                                 dict(epsilon=1.0, sensitivity=0.0), dict(epsilon=1.0, seed=-1),
                                 dict(epsilon=1.0, seed=2**64)])
def test_params_validation(bad):
    with pytest.raises(DomainError):
        PrivacyParams(**bad)


@given(st.floats(0.01, 100), st.floats(0.01, 100))
def test_variance_decreases_with_epsilon(e1, e2):
    if e1 < e2:
        assert gaussian_variance(PrivacyParams(e1)) > gaussian_variance(PrivacyParams(e2))


def test_box_muller_matches_documented_transform():
    stream = GaussianStream(11, 3)
    z = stream.standard_normal((5,))
    gen = make_generator(11, 3)
    u1 = 1.0 - gen.random(3)
    u2 = gen.random(3)
    expected = []
    for a, b in zip(u1, u2):
        r = math.sqrt(-2.0 * math.log(a))
        expected += [r * math.cos(2 * math.pi * b), r * math.sin(2 * math.pi * b)]
    np.testing.assert_allclose(z, expected[:5], rtol=1e-15, atol=1e-15)
    assert stream.draws == 5


def test_single_entry_noise_variance_over_many_draws():
    params = PrivacyParams(2.0, seed=123)
    M = np.full((1000, 1000), 0.5)
    noise = add_noise(M, params) - 0.5
    assert abs(noise.mean()) < 0.005
    assert abs(noise.var() / 0.25 - 1.0) < 0.01


def test_one_by_one_matrix_across_seeds():
    values = np.array([add_noise([[0.5]], PrivacyParams(2.0, seed=s))[0, 0] for s in range(4000)])
    # 4000 samples: standard error of the variance is about 2.2%
    assert abs(values.var() / 0.25 - 1.0) < 0.1
    assert abs(values.mean() - 0.5) < 0.03


def test_add_noise_is_deterministic_and_shape_preserving():
    M = np.random.default_rng(0).random((2, 3))
    a = add_noise(M, PrivacyParams(1.5, seed=9))
    b = add_noise(M, PrivacyParams(1.5, seed=9))
    assert a.shape == (2, 3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, add_noise(M, PrivacyParams(1.5, seed=10)))


def test_add_noise_does_not_clamp():
    out = add_noise(np.full((50, 50), 0.5), PrivacyParams(1.25, seed=1))
    assert out.min() < 0.0 and out.max() > 1.0


def test_add_noise_consumes_one_draw_per_entry():
    stream = GaussianStream(4)
    add_noise(np.zeros((7, 5)), PrivacyParams(2.0), stream)
    assert stream.draws == 35


@pytest.mark.parametrize("bad", [[[1.5]], [[-0.1]], [[np.nan]]])
def test_add_noise_requires_normalized_input(bad):
    with pytest.raises(DomainError):
        add_noise(bad, PrivacyParams(2.0))


@pytest.mark.parametrize("eps, rounds, expected", [(1.0, 5, 5.0), (0.7, 0, 0.0), (0.5, 10, 5.0)])
def test_cumulative_leakage(eps, rounds, expected):
    assert cumulative_leakage(eps, rounds) == expected


def test_cumulative_leakage_rejects_negative_rounds():
    with pytest.raises(DomainError):
        cumulative_leakage(1.0, -1)


def test_derive_seed_is_stable_and_key_sensitive():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 3, 2)
    assert 0 <= derive_seed(2**63, 7) < 2**64


def test_noiser_is_split_invariant():
    X = np.random.default_rng(1).random((6, 4, 4))
    noiser = GaussianNoiser(epsilon=1.5, random_state=3).fit(X)
    whole = noiser.transform(X)
    assert np.array_equal(noiser.transform(X[:2]), whole[:2])
    assert noiser.variance_ == pytest.approx(1 / 2.25)
    assert clone(noiser).get_params()["epsilon"] == 1.5
