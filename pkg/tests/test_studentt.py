import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import betainc

from conformal_shapley.studentt import (regularized_incomplete_beta, student_t_cdf,
                                        student_t_sf)


def t_pdf(x, df):
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
    return c * (1 + x * x / df) ** (-(df + 1) / 2)


def quad_cdf(t, df):
    # integrate the density from 0 and add the symmetric half
    val, _ = quad(t_pdf, 0.0, abs(t), args=(df,), epsabs=1e-14, epsrel=1e-13, limit=200)
    return 0.5 + val if t >= 0 else 0.5 - val


PAIRS = [(-6.0, 3), (-3.1, 1), (-2.0, 5), (-1.5, 99), (-0.7, 2), (-0.2, 49), (0.1, 7),
         (0.5, 1), (0.9, 30), (1.0, 4), (1.3, 12), (1.7, 99), (2.0, 2), (2.5, 19),
         (3.0, 8), (3.5, 60), (4.0, 10), (5.0, 25), (7.0, 6), (10.0, 3)]


@pytest.mark.parametrize("t,df", PAIRS)
def test_cdf_matches_quadrature(t, df):
    assert abs(student_t_cdf(t, df) - quad_cdf(t, df)) < 1e-8


def test_symmetry_and_center():
    assert student_t_sf(0.0, 99) == 0.5
    assert student_t_cdf(0.0, 3) == 0.5
    for t in (0.3, 2.2, 8.0):
        assert student_t_cdf(t, 5) + student_t_cdf(-t, 5) == pytest.approx(1.0, abs=1e-15)
    assert student_t_sf(math.inf, 4) == 0.0 and student_t_sf(-math.inf, 4) == 1.0


def test_far_tail_relative_accuracy():
    # deep tail where 1 - cdf cancels; compare against integration of the tail itself
    t, df = 30.0, 5
    tail, _ = quad(t_pdf, t, np.inf, args=(df,), epsabs=0, epsrel=1e-13)
    assert student_t_sf(t, df) == pytest.approx(tail, rel=1e-10)


def test_cauchy_closed_form():
    for t in (-3.0, 0.4, 2.0):
        assert student_t_cdf(t, 1) == pytest.approx(0.5 + math.atan(t) / math.pi, abs=1e-14)


@pytest.mark.parametrize("a,b,x", [(0.5, 0.5, 0.3), (2.0, 3.0, 0.9), (49.5, 0.5, 0.98),
                                   (10.0, 0.5, 0.01), (1.0, 1.0, 0.25)])
def test_incomplete_beta_against_scipy(a, b, x):
    assert regularized_incomplete_beta(a, b, x) == pytest.approx(betainc(a, b, x), rel=1e-12)


def test_incomplete_beta_edges():
    assert regularized_incomplete_beta(2, 3, 0.0) == 0.0
    assert regularized_incomplete_beta(2, 3, 1.0) == 1.0
    with pytest.raises(ValueError):
        regularized_incomplete_beta(-1, 3, 0.5)
    with pytest.raises(ValueError):
        regularized_incomplete_beta(1, 3, 1.5)
