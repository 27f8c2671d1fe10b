"""Problem description: validation, step parameterization and JSON round trips."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import harmonic, random_spec
from neurlp.ode_spec import (GridParam, InitCondition, OdeSpec, SpecError, check, dumps, load, loads,
                             materialize_steps, save, spec_to_dict, validate)


def assert_specs_equal(a: OdeSpec, b: OdeSpec):
    assert spec_to_dict(a) == spec_to_dict(b)
    for name in ("coeffs", "rhs", "steps"):
        x, y = getattr(a, name), getattr(b, name)
        assert x.shape == y.shape and np.array_equal(x, y)
    for ta, tb in zip(a.nonlinear, b.nonlinear):
        assert ta.basis == tb.basis and np.array_equal(ta.phi, tb.phi)


class TestValidate:
    def test_harmonic_setup_is_valid(self):
        assert validate(harmonic()) == []

    def test_single_step(self):
        spec = harmonic()
        spec.n_steps = 1
        assert "n_steps < 2" in validate(spec)

    def test_zero_step(self):
        spec = harmonic(n=5)
        spec.steps = np.array([0.1, 0.0, 0.1, 0.1])
        assert "non-positive step" in validate(spec)

    def test_degenerate_row(self):
        spec = harmonic(n=5)
        spec.coeffs[0, 2] = 0.0
        assert any("degenerate" in e for e in validate(spec))

    def test_coeff_shape(self):
        spec = harmonic(n=5)
        spec.coeffs = np.ones((1, 1, 3))
        assert any("coeffs shape" in e for e in validate(spec))

    def test_time_invariant_shape_accepted(self):
        assert validate(harmonic(n=5, time_invariant=True)) == []

    @pytest.mark.parametrize("ic, message", [
        (InitCondition(0, 2, 0.0), "outside 0..1"),
        (InitCondition(1, 0, 0.0), "dim 1 out of range"),
        (InitCondition(0, 0, 2.0), "duplicate"),
    ])
    def test_initial_condition_errors(self, ic, message):
        spec = harmonic(n=5)
        spec.init.append(ic)
        assert any(message in e for e in validate(spec))

    def test_check_raises_with_all_errors(self):
        spec = harmonic(n=5)
        spec.steps = -spec.steps
        spec.rhs = np.ones((1, 2))
        with pytest.raises(SpecError, match="rhs shape.*non-positive step"):
            check(spec)

    def test_validate_is_idempotent_and_pure(self, rng):
        spec = random_spec(rng)
        before = dumps(spec)
        assert validate(spec) == validate(spec) == []
        assert dumps(spec) == before


class TestSteps:
    def test_zero_raw_gives_half_scale(self):
        np.testing.assert_allclose(materialize_steps(GridParam(np.zeros(4), 0.2), 5), 0.1)

    def test_large_raw_approaches_scale(self):
        assert materialize_steps(GridParam(np.array([40.0]), 0.2), 2)[0] == pytest.approx(0.2)

    def test_hand_evaluated_sigmoid(self):
        steps = materialize_steps(GridParam(np.array([0.0, 1.3863]), 0.2), 3)
        np.testing.assert_allclose(steps, [0.1, 0.16], atol=1e-5)

    @given(st.lists(st.floats(-30, 30, allow_nan=False), min_size=1, max_size=20),
           st.floats(1e-3, 10.0))
    def test_bounded_for_finite_raw(self, raw, scale):
        steps = materialize_steps(GridParam(np.array(raw), scale), len(raw) + 1)
        assert np.all(steps > 0) and np.all(steps < scale)

    def test_from_steps_reproduces(self):
        target = np.array([0.1, 0.05, 0.2])
        g = GridParam.from_steps(target)
        assert g.scale == pytest.approx(0.4)
        np.testing.assert_allclose(materialize_steps(g, 4), target, rtol=1e-12)

    def test_jacobian_matches_fd(self):
        g = GridParam(np.array([-1.0, 0.3, 2.0]), 0.5)
        h = 1e-6
        fd = (0.5 / (1 + np.exp(-(g.raw + h))) - 0.5 / (1 + np.exp(-(g.raw - h)))) / (2 * h)
        np.testing.assert_allclose(g.jacobian(), fd, rtol=1e-7)

    def test_identity_requires_positive(self):
        with pytest.raises(SpecError):
            materialize_steps(GridParam(np.array([0.1, -0.1]), transform="identity"), 3)

    def test_unknown_transform(self):
        with pytest.raises(SpecError):
            GridParam(np.zeros(2), transform="softplus")


class TestJson:
    @given(st.integers(0, 2**32 - 1))
    def test_round_trip_bit_exact(self, seed):
        spec = random_spec(np.random.default_rng(seed), dim=int(seed % 2) + 1)
        assert_specs_equal(loads(dumps(spec)), spec)

    def test_grid_round_trip(self):
        spec = harmonic(n=6)
        spec = OdeSpec(**{**spec.__dict__, "grid": GridParam.from_steps(spec.steps)})
        back = loads(dumps(spec))
        assert back.grid is not None and np.array_equal(back.steps, spec.steps)

    def test_file_round_trip(self, tmp_path, rng):
        spec = random_spec(rng)
        save(spec, tmp_path / "s.json")
        assert_specs_equal(load(tmp_path / "s.json"), spec)

    def test_malformed_reports_location(self):
        with pytest.raises(SpecError, match="line 2 column"):
            loads('{"order": 2,\n "n_steps": }')

    def test_missing_field(self):
        with pytest.raises(SpecError, match="n_steps"):
            loads('{"order": 2, "coeffs": [1, 0, 1], "steps": 0.1}')

    def test_compact_form_broadcasts(self):
        spec = loads('{"order": 2, "n_steps": 4, "coeffs": [1, 0, 1], "steps": 0.1, '
                     '"init": [{"order": 0, "value": 1}], "nonlinear": [{"basis": "u^2", "phi": 0.5}]}')
        assert spec.coeffs.shape == (1, 4, 3)
        np.testing.assert_array_equal(spec.steps, [0.1, 0.1, 0.1])
        assert spec.nonlinear[0].phi.shape == (1, 4)

    def test_bad_shape(self):
        with pytest.raises(SpecError, match="coeffs"):
            loads('{"order": 2, "n_steps": 4, "coeffs": [[1, 0]], "steps": 0.1}')
