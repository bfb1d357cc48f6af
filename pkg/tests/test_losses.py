import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefmod import numcore as nc
from prefmod.losses import (REFERENCE_WEIGHTS, LossWeights, dispersion_loss, flow_loss,
                            interpolate, total_loss)
from prefmod.numcore import Tensor

from gradcheck import analytic, numeric


def test_interpolate_endpoints_and_midpoint():
    rng = np.random.default_rng(0)
    z0, z1 = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
    assert np.array_equal(interpolate(z0, z1, 0.0), z0)
    assert np.array_equal(interpolate(z0, z1, 1.0), z1)
    assert interpolate(np.zeros(1), np.full(1, 2.0), 0.5)[0] == 1.0


def test_interpolate_per_item_times_and_errors():
    z0, z1 = np.zeros((2, 3)), np.ones((2, 3))
    out = interpolate(z0, z1, np.array([0.25, 0.75]))
    assert out[0].tolist() == [0.25] * 3 and out[1].tolist() == [0.75] * 3
    with pytest.raises(ValueError):
        interpolate(z0, z1, 1.5)
    with pytest.raises(nc.ShapeError):
        interpolate(z0, np.ones(3), 0.5)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(-3, 3), st.floats(-3, 3))
def test_interpolate_linear_in_t(a, b, x0, x1):
    z0, z1 = np.array([x0]), np.array([x1])
    mid = interpolate(z0, z1, (a + b) / 2)
    avg = (interpolate(z0, z1, a) + interpolate(z0, z1, b)) / 2
    assert abs(mid[0] - avg[0]) <= 1e-12


def test_flow_loss_examples():
    rng = np.random.default_rng(1)
    z0, z1 = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
    assert flow_loss(Tensor(z1 - z0), z0, z1).data == 0.0
    assert flow_loss(Tensor(np.zeros(2)), np.zeros(2), np.array([1.0, 0.0])).data == 0.5
    with pytest.raises(nc.ShapeError):
        flow_loss(Tensor(np.zeros(3)), np.zeros(2), np.zeros(2))


def test_flow_loss_gradient_formula():
    rng = np.random.default_rng(2)
    v, z0, z1 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    fn = lambda p: flow_loss(p["v"], z0, z1)  # noqa: E731
    g = analytic(fn, {"v": v})["v"]
    np.testing.assert_allclose(g, 2 * (v - (z1 - z0)) / v.size, rtol=1e-12)
    assert abs(numeric(fn, {"v": v}, "v", 5) - g.reshape(-1)[5]) <= 1e-8


@given(st.integers(0, 2 ** 31))
def test_flow_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    v, z0, z1 = (rng.normal(size=6) for _ in range(3))
    assert flow_loss(Tensor(v), z0, z1).data >= 0.0


# dispersion closed forms ---------------------------------------------------------------

def test_dispersion_coincident_pair_is_zero():
    x = np.ones((2, 5))
    assert abs(float(dispersion_loss(Tensor(x)).data)) <= 1e-12


def test_dispersion_single_negative_is_minus_distance():
    x = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 2.0]])
    assert abs(float(dispersion_loss(Tensor(x)).data) - (-3.0)) <= 1e-12


@pytest.mark.parametrize("B", [2, 3, 5, 8])
def test_dispersion_all_coincident_is_log_b_minus_1(B):
    x = np.tile(np.arange(4.0), (B, 1))
    assert abs(float(dispersion_loss(Tensor(x)).data) - math.log(B - 1)) <= 1e-12


def test_dispersion_needs_two_users():
    with pytest.raises(ValueError):
        dispersion_loss(Tensor(np.ones((3, 2))), [4, 4, 4])


def test_duplicate_users_are_not_negatives():
    x = np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 4.0]])
    # rows 0 and 1 belong to user 7 and only see row 2 at distance 5
    got = float(dispersion_loss(Tensor(x), [7, 7, 9]).data)
    expected = (-5.0 + -5.0 + math.log(2 * math.exp(-5.0))) / 3
    assert abs(got - expected) <= 1e-12


@settings(max_examples=50)
@given(st.integers(0, 2 ** 31), st.integers(2, 6))
def test_dispersion_permutation_and_translation_invariant(seed, B):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(B, 4))
    base = float(dispersion_loss(Tensor(x)).data)
    perm = rng.permutation(B)
    assert abs(float(dispersion_loss(Tensor(x[perm])).data) - base) <= 1e-12
    shift = rng.normal(size=4)
    assert abs(float(dispersion_loss(Tensor(x + shift)).data) - base) <= 1e-9


@settings(max_examples=50)
@given(st.integers(0, 2 ** 31), st.floats(0.01, 3.0))
def test_dispersion_strictly_monotone_in_one_distance(seed, extra):
    # two users: the loss is exactly -d, so widening the pair must lower it
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3))
    u = (x[1] - x[0]) / np.linalg.norm(x[1] - x[0])
    y = x.copy()
    y[1] += extra * u
    assert float(dispersion_loss(Tensor(y)).data) < float(dispersion_loss(Tensor(x)).data)


def test_dispersion_monotone_with_more_users():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 4.0]])
    y = x.copy()
    y[2, 1] = 5.0     # distances 0-2 and 1-2 grow, 0-1 fixed
    assert float(dispersion_loss(Tensor(y)).data) < float(dispersion_loss(Tensor(x)).data)


# total loss ----------------------------------------------------------------------------

def test_total_loss_weights():
    flow, a, b = Tensor(0.7), Tensor(-2.0), Tensor(3.0)
    assert total_loss(flow, a, b, LossWeights(0.0, 0.0)).data == 0.7
    assert REFERENCE_WEIGHTS == LossWeights(0.1, 0.1)
    assert LossWeights() == REFERENCE_WEIGHTS
    got = float(total_loss(flow, a, b, REFERENCE_WEIGHTS).data)
    assert abs(got - (0.7 + 0.1 * -2.0 + 0.1 * 3.0)) <= 1e-15


@given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 5))
def test_total_loss_affine_in_each_weight(l1, l2, l3):
    flow, a, b = Tensor(0.3), Tensor(-1.5), Tensor(2.5)
    f = lambda lam: float(total_loss(flow, a, b, LossWeights(lam, 0.2)).data)  # noqa: E731
    assert abs((f(l1) - f(l2)) - (l1 - l2) * -1.5) <= 1e-9
    g = lambda lam: float(total_loss(flow, a, b, LossWeights(0.2, lam)).data)  # noqa: E731
    assert abs((g(l3) - g(0.0)) - l3 * 2.5) <= 1e-9


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(-0.1, 0.1)
