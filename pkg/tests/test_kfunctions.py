import math

import pytest

from stealthprobe.kfunctions import ExpKL, KFunction, invert, linear


def test_linear_inverse():
    assert linear(4.0).inv(2.0) == pytest.approx(0.5, rel=1e-12)


def test_inverse_of_zero_and_infinity():
    k = KFunction(lambda r: r * r)
    assert k.inv(0.0) == 0.0
    assert math.isinf(k.inv(math.inf))


def test_bounded_function_inverse_beyond_range():
    assert math.isinf(invert(lambda r: r / (1 + r), 2.0))


def test_exp_kl_sentinel():
    beta = ExpKL(1.0, math.inf)
    assert beta(0.5, 0.0) == 0.5 and beta(0.5, 1e-3) == 0.0


def test_exp_kl_value():
    assert ExpKL(2.0, 0.5)(3.0, 2.0) == pytest.approx(6.0 * math.exp(-1.0))
