import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cobot import hypercomplex as hc
from cobot.hypercomplex import Hypercomplex, HypercomplexError

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
quats = st.lists(finite, min_size=4, max_size=4).map(lambda c: Hypercomplex(np.array(c)))
nonzero_quats = quats.filter(lambda q: hc.norm(q) > 1e-3)


def q(*c):
    return Hypercomplex(np.array(c, dtype=float))


def product_oracle(a, b):
    # 16-term expansion from the multiplication table of the basis units
    table = {
        (0, 0): (1, 0), (0, 1): (1, 1), (0, 2): (1, 2), (0, 3): (1, 3),
        (1, 0): (1, 1), (1, 1): (-1, 0), (1, 2): (1, 3), (1, 3): (-1, 2),
        (2, 0): (1, 2), (2, 1): (-1, 3), (2, 2): (-1, 0), (2, 3): (1, 1),
        (3, 0): (1, 3), (3, 1): (1, 2), (3, 2): (-1, 1), (3, 3): (-1, 0),
    }
    out = np.zeros(4)
    for i in range(4):
        for j in range(4):
            sign, k = table[i, j]
            out[k] += sign * a.components[i] * b.components[j]
    return out


def test_identity_element():
    assert q(1, 0, 0, 0) * q(2.5, -1, 3, 7) == q(2.5, -1, 3, 7)


def test_j1_j2_is_j3():
    assert q(0, 1, 0, 0) * q(0, 0, 1, 0) == q(0, 0, 0, 1)


def test_j2_j1_is_minus_j3():
    assert q(0, 0, 1, 0) * q(0, 1, 0, 0) == q(0, 0, 0, -1)


@pytest.mark.parametrize("unit", [1, 2, 3])
def test_units_square_to_minus_one(unit):
    e = np.zeros(4)
    e[unit] = 1
    assert Hypercomplex(e) * Hypercomplex(e) == q(-1, 0, 0, 0)


def test_rejects_bad_dimension_and_nonfinite():
    with pytest.raises(HypercomplexError):
        Hypercomplex(np.zeros(3))
    with pytest.raises(HypercomplexError):
        Hypercomplex(np.array([0, np.nan, 0, 0]))
    with pytest.raises(HypercomplexError):
        hc.hamilton_product(q(1, 0, 0, 0), Hypercomplex(np.ones(8)))
    with pytest.raises(HypercomplexError):
        hc.left_mul_matrix(Hypercomplex(np.ones(8)))


def test_conjugate_norm_normalize():
    assert hc.conjugate(q(1, 2, 3, 4)) == q(1, -2, -3, -4)
    assert hc.norm(q(0, 3, 4, 0)) == 5.0
    assert hc.normalize(q(2, 0, 0, 0)) == q(1, 0, 0, 0)
    with pytest.raises(HypercomplexError):
        hc.normalize(q(1e-31, 0, 0, 0))


@given(quats, quats)
def test_product_matches_sixteen_term_oracle(a, b):
    np.testing.assert_allclose((a * b).components, product_oracle(a, b), rtol=0, atol=1e-12)


@given(quats, quats, quats)
def test_associative(a, b, c):
    scale = max(1.0, hc.norm(a) * hc.norm(b) * hc.norm(c))
    assert np.max(np.abs(((a * b) * c).components - (a * (b * c)).components)) <= 1e-12 * scale


@given(nonzero_quats, nonzero_quats)
def test_norm_multiplicative(a, b):
    assert abs(hc.norm(a * b) - hc.norm(a) * hc.norm(b)) <= 1e-12 * hc.norm(a) * hc.norm(b)


@given(quats, quats, finite, finite)
def test_bilinear(a, b, s, t):
    lhs = ((s * a) + (t * b)) * b
    rhs = (s * (a * b)) + (t * (b * b))
    scale = 1 + (abs(s) + abs(t)) * (hc.norm(a) + hc.norm(b)) ** 2
    assert np.max(np.abs(lhs.components - rhs.components)) <= 1e-12 * scale


@given(nonzero_quats)
def test_conjugate_gives_squared_norm(a):
    p = a * hc.conjugate(a)
    n2 = hc.norm(a) ** 2
    np.testing.assert_allclose(p.components, [n2, 0, 0, 0], atol=1e-12 * max(1, n2))


def test_left_mul_matrix_identity_and_first_column(rng):
    np.testing.assert_array_equal(hc.left_mul_matrix(q(1, 0, 0, 0)), np.eye(4))
    a = Hypercomplex(rng.standard_normal(4))
    np.testing.assert_array_equal(hc.left_mul_matrix(a)[:, 0], a.components)


@given(quats, quats)
def test_left_mul_matrix_faithful(a, b):
    scale = max(1.0, hc.norm(a) * hc.norm(b))
    assert np.max(np.abs(hc.left_mul_matrix(a) @ b.components - (a * b).components)) <= 1e-14 * scale


def test_left_mul_matrix_orthogonal_for_unit(rng):
    for _ in range(100):
        m = hc.left_mul_matrix(hc.random_unit_quaternion(rng))
        assert np.max(np.abs(m.T @ m - np.eye(4))) < 1e-12


def test_random_unit_quaternion_deterministic_and_unit():
    a = hc.random_unit_quaternion(np.random.default_rng(5))
    b = hc.random_unit_quaternion(np.random.default_rng(5))
    assert a == b
    assert abs(hc.norm(a) - 1) < 1e-12


def test_random_unit_quaternion_symmetric():
    rng = np.random.default_rng(11)
    draws = np.array([hc.random_unit_quaternion(rng).components for _ in range(100_000)])
    assert np.all(np.abs(draws.mean(axis=0)) < 0.02)


def test_projection_weights_examples():
    np.testing.assert_array_equal(hc.build_projection_weights(hc.QuaternionBank([q(1, 0, 0, 0)]), 4), np.eye(4))
    w = hc.build_projection_weights(hc.QuaternionBank([q(0, 1, 0, 0)]), 4)
    np.testing.assert_array_equal(w @ np.array([1.0, 0, 0, 0]), [0, 1, 0, 0])


def test_projection_weights_orthogonal_and_block_diagonal(rng):
    bank = hc.QuaternionBank.random(8, rng)
    w = hc.build_projection_weights(bank, 8)
    assert np.max(np.abs(w.T @ w - np.eye(8))) < 1e-10
    assert np.all(w[:4, 4:] == 0) and np.all(w[4:, :4] == 0)
    np.testing.assert_array_equal(w[4:, 4:], hc.left_mul_matrix(bank.elements[1]))


def test_projection_weights_config_errors(rng):
    with pytest.raises(HypercomplexError):
        hc.build_projection_weights(hc.QuaternionBank.random(8, rng), 6)
    with pytest.raises(HypercomplexError):
        hc.build_projection_weights(hc.QuaternionBank.random(8, rng), 12)
    with pytest.raises(HypercomplexError):
        hc.QuaternionBank.random(6, rng)


@given(st.lists(finite, min_size=8, max_size=8), st.lists(finite, min_size=8, max_size=8), finite, finite)
def test_projection_weights_linear_in_bank(c1, c2, s, t):
    b1, b2 = np.array(c1).reshape(2, 4), np.array(c2).reshape(2, 4)
    lhs = hc.projection_weights_from_array(s * b1 + t * b2)
    rhs = s * hc.projection_weights_from_array(b1) + t * hc.projection_weights_from_array(b2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-11 * (1 + abs(s) + abs(t)) * 10)


def test_projection_pullback_is_adjoint(rng):
    bank = rng.standard_normal((3, 4))
    g = rng.standard_normal((12, 12))
    lhs = np.sum(g * hc.projection_weights_from_array(bank))
    rhs = np.sum(hc.projection_weights_pullback(g) * bank)
    assert abs(lhs - rhs) < 1e-12


def test_octonion_hook_norm_multiplicative(rng):
    # Cayley-Dickson doubling: not part of the verified suite, smoke-checked only
    a, b = Hypercomplex(rng.standard_normal(8)), Hypercomplex(rng.standard_normal(8))
    assert abs(hc.norm(a * b) - hc.norm(a) * hc.norm(b)) < 1e-12 * hc.norm(a) * hc.norm(b)
