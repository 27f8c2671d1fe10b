"""Basis functions: counts, names, derivatives and serialization."""

from math import comb

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neurlp.basis import (Monomial, Ratio, Tanh, basis_from_dict, builtin_basis, library_matrix,
                          parse_basis, var_names)


class TestBuiltinBasis:
    def test_degree_two_planar_layout(self):
        names = [b.name(var_names(2)) for b in builtin_basis(2, 2)]
        assert names == ["1", "x", "y", "x^2", "xy", "y^2"]

    def test_degree_zero_is_constant_only(self):
        lib = builtin_basis(0, 3)
        assert len(lib) == 1 and lib[0].name() == "1"

    def test_degree_three_planar_count(self):
        assert len(builtin_basis(3, 2)) == 10

    @given(st.integers(0, 4), st.integers(1, 4))
    def test_count_is_stars_and_bars(self, degree, dim):
        lib = builtin_basis(degree, dim)
        assert len(lib) == comb(degree + dim, dim)
        assert len(set(lib)) == len(lib)

    def test_negative_degree_rejected(self):
        with pytest.raises(ValueError):
            builtin_basis(-1, 2)

    def test_library_matrix_columns(self):
        x = np.array([[1.0, 2.0], [3.0, -1.0]])
        theta = library_matrix(builtin_basis(2, 2), x)
        np.testing.assert_array_equal(theta[0], [1, 1, 2, 1, 2, 4])
        np.testing.assert_array_equal(theta[1], [1, 3, -1, 9, -3, 1])


class TestParse:
    @pytest.mark.parametrize("text, powers", [
        ("u^2", {(0, 0): 2}),
        ("u*u'", {(0, 0): 1, (0, 1): 1}),
        ("u''^3", {(0, 2): 3}),
        ("1", {}),
    ])
    def test_scalar_forms(self, text, powers):
        assert parse_basis(text).powers == powers

    def test_planar_product(self):
        assert parse_basis("x*y", dim=2).powers == {(0, 0): 1, (1, 0): 1}

    def test_repeated_factor_accumulates(self):
        assert parse_basis("u*u*u").powers == {(0, 0): 3}

    def test_unknown_variable(self):
        with pytest.raises(ValueError, match="unknown variable"):
            parse_basis("w^2")

    @given(st.integers(0, 3))
    def test_scalar_name_round_trip(self, degree):
        for b in builtin_basis(degree, 1):
            assert parse_basis(b.name(), 1) == b

    @given(st.integers(0, 3), st.integers(2, 3))
    def test_explicit_product_round_trip(self, degree, dim):
        for b in builtin_basis(degree, dim):
            assert parse_basis(_explicit(b, dim), dim) == b


def _explicit(b: Monomial, dim: int) -> str:
    names = var_names(dim)
    if not b.powers:
        return "1"
    return "*".join(f"{names[d]}{chr(39) * i}^{p}" for (d, i), p in b.powers.items())


finite = st.floats(-3, 3, allow_nan=False)


def _fd_grad(f, values, h=1e-6):
    out = np.empty_like(values)
    for j in range(values.shape[1]):
        e = np.zeros_like(values)
        e[:, j] = h
        out[:, j] = (f(values + e) - f(values - e)) / (2 * h)
    return out


class TestDerivatives:
    def test_hand_differentiated_square(self):
        b = Monomial({(0, 0): 2})
        assert b(np.array([[2.0]]))[0] == 4.0
        assert b.grad(np.array([[2.0]]))[0, 0] == 4.0

    @given(st.lists(finite, min_size=2, max_size=2))
    def test_monomial_matches_fd(self, v):
        b = Monomial({(0, 0): 2, (1, 0): 1})
        vals = np.array([v])
        np.testing.assert_allclose(b.grad(vals), _fd_grad(b, vals), rtol=1e-6, atol=1e-6)

    @given(st.lists(finite, min_size=2, max_size=2))
    def test_tanh_matches_fd(self, v):
        b = Tanh(Monomial({(0, 0): 1, (1, 0): 1}), scale=0.7)
        vals = np.array([v])
        np.testing.assert_allclose(b.grad(vals), _fd_grad(b, vals), rtol=1e-6, atol=1e-7)

    @given(finite, st.floats(0.5, 3.0))
    def test_ratio_matches_fd(self, x, y):
        b = Ratio(Monomial({(0, 0): 1}), Monomial({(1, 0): 2}))
        vals = np.array([[x, y]])
        np.testing.assert_allclose(b.grad(vals), _fd_grad(b, vals), rtol=1e-5, atol=1e-7)

    def test_constant_has_no_reads(self):
        one = Monomial()
        assert one(np.zeros((3, 0))).tolist() == [1.0, 1.0, 1.0]
        assert one.grad(np.zeros((3, 0))).shape == (3, 0)


class TestSerialization:
    @pytest.mark.parametrize("b", [
        Monomial({(0, 0): 2}),
        Tanh(Monomial({(0, 0): 1, (1, 1): 2}), 2.0),
        Ratio(Monomial({(0, 0): 1}), Monomial()),
    ])
    def test_dict_round_trip(self, b):
        assert basis_from_dict(b.to_dict()) == b

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            basis_from_dict({"kind": "spline"})

    def test_bad_exponent(self):
        with pytest.raises(ValueError):
            Monomial({(0, 0): 1.5})
