"""Zernike polynomials, expansions and their serialization."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from ionoptics.errors import ConfigurationError, ZernikeDomainError
from ionoptics.zernike import (ZernikeExpansion, ZernikeIndex, gram_matrix, indices_up_to,
                               noll_normalization, radial_coefficients, radial_poly, wavefront_eval,
                               zernike_eval)


def radial_by_sum(n, m, r):
    """Textbook factorial sum, evaluated in floating point."""
    out = 0.0
    for k in range((n - m) // 2 + 1):
        c = (-1) ** k * math.factorial(n - k) / (
            math.factorial(k) * math.factorial((n + m) // 2 - k) * math.factorial((n - m) // 2 - k))
        out = out + c * np.asarray(r, dtype=float) ** (n - 2 * k)
    return out


ALL_UP_TO_8 = [(n, m) for n in range(9) for m in range(0, n + 1) if (n - m) % 2 == 0]


def test_r40_hand_value():
    # R_4^0 = 6 r^4 - 6 r^2 + 1
    assert radial_poly(4, 0, 0.5) == pytest.approx(-0.125, abs=1e-15)
    assert radial_coefficients(4, 0) == ((6, 4), (-6, 2), (1, 0))  # (coefficient, power)


@pytest.mark.parametrize("n,m", ALL_UP_TO_8)
def test_radial_matches_factorial_sum(n, m):
    r = np.linspace(0, 1, 57)
    np.testing.assert_allclose(radial_poly(n, m, r), radial_by_sum(n, m, r), atol=1e-12)


@pytest.mark.parametrize("n,m", [(n, m) for n, m in ALL_UP_TO_8 if n - 2 >= max(m, 1)])
def test_radial_recurrence_in_n(n, m):
    # three-term recurrence in n at fixed m, with k = n - 2:
    # R_{k+2} = (k+2)/((k+2)^2 - m^2) * [(4(k+1) r^2 - (k+m)^2/k - (k-m+2)^2/(k+2)) R_k
    #           - (k^2 - m^2)/k R_{k-2}]
    k = n - 2
    r = np.linspace(0.05, 1, 31)
    lhs = radial_poly(n, m, r)
    lower = radial_poly(k, m, r)
    lower2 = radial_poly(k - 2, m, r) if k - 2 >= m else np.zeros_like(r)
    coeff = (k + 2) / ((k + 2) ** 2 - m**2)
    rhs = coeff * ((4 * (k + 1) * r**2 - (k + m) ** 2 / k - (k - m + 2) ** 2 / (k + 2)) * lower
                   - (k**2 - m**2) / k * lower2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@pytest.mark.parametrize("n,m", ALL_UP_TO_8)
def test_radial_is_one_at_edge(n, m):
    assert radial_poly(n, m, 1.0) == pytest.approx(1.0, abs=1e-12)


def test_radial_outside_disc_raises():
    with pytest.raises(ZernikeDomainError):
        radial_poly(2, 0, 1.01)
    with pytest.raises(ZernikeDomainError):
        radial_poly(2, 0, np.array([0.2, -0.1]))


@pytest.mark.parametrize("n,m", [(1, 2), (3, 0), (-1, 1), (2, 3)])
def test_invalid_index(n, m):
    with pytest.raises(ConfigurationError):
        ZernikeIndex(n, m)


def test_angular_convention():
    r, phi = 1.0, np.deg2rad(30)
    assert zernike_eval(ZernikeIndex(2, -2), r, phi) == pytest.approx(math.cos(2 * phi))
    assert zernike_eval(ZernikeIndex(2, 2), r, phi) == pytest.approx(math.sin(2 * phi))
    assert zernike_eval(ZernikeIndex(3, -1), r, phi) == pytest.approx(math.cos(phi))
    assert zernike_eval(ZernikeIndex(2, 0), 0.0, phi) == pytest.approx(-1.0)


def test_default_basis():
    basis = indices_up_to(5)
    assert len(basis) == 18
    assert not any(b.is_alignment for b in basis)
    assert len(indices_up_to(5, exclude_alignment=False)) == 21
    assert basis == sorted(basis)


def test_gram_oracle_tilt():
    basis = [ZernikeIndex(1, -1)]
    g = gram_matrix(basis)
    ref, _ = integrate.dblquad(lambda r, p: (r * math.cos(p)) ** 2 * r, 0, 2 * math.pi, 0, 1)
    assert g[0, 0] == pytest.approx(math.pi / 4, rel=1e-12)
    assert ref == pytest.approx(math.pi / 4, rel=1e-9)


def test_gram_orthogonality_and_norms():
    basis = indices_up_to(6, exclude_alignment=False)
    g = gram_matrix(basis)
    off = g - np.diag(np.diag(g))
    assert np.abs(off).max() < 1e-12
    expected = [math.pi / noll_normalization(b) ** 2 for b in basis]
    np.testing.assert_allclose(np.diag(g), expected, rtol=1e-12)


def test_gram_rejects_coarse_quadrature():
    with pytest.raises(ValueError):
        gram_matrix(indices_up_to(3), n_radial=16)


def test_expansion_validation():
    with pytest.raises(ConfigurationError):
        ZernikeExpansion(((ZernikeIndex(2, 0), 0.1), (ZernikeIndex(2, 0), 0.2)))
    with pytest.raises(ConfigurationError):
        ZernikeExpansion(((ZernikeIndex(2, 0), float("nan")),))
    with pytest.raises(ConfigurationError):
        ZernikeExpansion.from_mapping({(2, 0): 0.1}, 397.0) + ZernikeExpansion.from_mapping(
            {(2, 0): 0.1}, 633.0)


def test_expansion_sum_and_twin():
    a = ZernikeExpansion.from_mapping({(2, 2): 0.1, (3, 1): 0.05})
    b = ZernikeExpansion.from_mapping({(2, 2): -0.1, (4, 0): 0.02})
    s = a + b
    assert s.coefficient(2, 2) == 0.0
    assert s.coefficient(4, 0) == 0.02
    t = a.twin()
    assert t.coefficient(2, 2) == -0.1 and t.coefficient(3, 1) == 0.05
    assert t.twin() == a


def test_twin_is_point_reflection_negated():
    exp = ZernikeExpansion.from_vector(indices_up_to(5), np.linspace(-0.2, 0.3, 18))
    r = np.linspace(0, 1, 11)
    phi = np.linspace(0, 2 * np.pi, 11)
    np.testing.assert_allclose(wavefront_eval(exp.twin(), r, phi),
                               -wavefront_eval(exp, r, phi + np.pi), atol=1e-12)


def test_json_round_trip():
    exp = ZernikeExpansion.from_mapping({(2, -2): 0.125, (3, 1): -1 / 3, (5, 5): 1e-9}, 397.0)
    assert ZernikeExpansion.from_json(exp.to_json()) == exp


def test_json_errors_report_position():
    with pytest.raises(ConfigurationError, match="line 2"):
        ZernikeExpansion.from_json('{"wavelength_nm": 397,\n "terms": [}')
    with pytest.raises(ConfigurationError, match="unknown"):
        ZernikeExpansion.from_json('{"wavelength_nm": 397, "terms": [], "x": 1}')


coefficient = st.floats(-1, 1, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(coefficient, min_size=18, max_size=18), st.floats(-10, 10))
def test_expansion_linear(values, k):
    basis = indices_up_to(5)
    exp = ZernikeExpansion.from_vector(basis, values)
    r, phi = np.array([0.0, 0.3, 1.0]), np.array([0.1, 2.0, 4.0])
    np.testing.assert_allclose(wavefront_eval(exp.scaled(k), r, phi),
                               k * wavefront_eval(exp, r, phi), atol=1e-9)
    np.testing.assert_allclose((exp + exp).vector(basis), 2 * np.asarray(values), atol=1e-15)


def test_small_cases():
    assert radial_poly(2, 2, 0.5) == pytest.approx(0.25)
    assert radial_poly(2, 0, 0.0) == pytest.approx(-1.0)
    assert zernike_eval(ZernikeIndex(0, 0), 0.3, 1.2) == pytest.approx(1.0)
    assert zernike_eval(ZernikeIndex(1, -1), 1.0, 0.0) == pytest.approx(1.0)
    assert zernike_eval(ZernikeIndex(2, -2), 1.0, np.pi / 4) == pytest.approx(0.0, abs=1e-15)


def test_wavefront_linearity_examples():
    r, phi = np.array([0.2, 1.0]), np.array([0.0, 0.0])
    np.testing.assert_array_equal(wavefront_eval(ZernikeExpansion(), r, phi), 0.0)
    assert wavefront_eval(ZernikeExpansion.from_mapping({(2, 0): 1.0}), 1.0, 0.0) == pytest.approx(1.0)
    two = ZernikeExpansion.from_mapping({(2, 0): 0.5, (2, -2): 0.3})
    assert wavefront_eval(two, 1.0, 0.0) == pytest.approx(0.8)


def test_gram_small_cases():
    assert gram_matrix([ZernikeIndex(0, 0)])[0, 0] == pytest.approx(math.pi, rel=1e-13)
    g = gram_matrix([ZernikeIndex(2, 0), ZernikeIndex(2, -2)])
    assert abs(g[0, 1]) < 1e-13
    dense = gram_matrix([ZernikeIndex(1, -1)], n_radial=256, n_azimuthal=256)
    assert gram_matrix([ZernikeIndex(1, -1)])[0, 0] == pytest.approx(dense[0, 0], rel=1e-13)
