"""Shared fixtures and spec builders for the test suite."""

from __future__ import annotations

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from neurlp.basis import Monomial
from neurlp.ode_spec import InitCondition, NonlinearTerm, OdeSpec

settings.register_profile(
    "default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_spec(rng: np.random.Generator, order: int | None = None, n: int | None = None,
                dim: int = 1, nonlinear: bool | None = None, time_invariant: bool | None = None,
                central_difference: bool = False) -> OdeSpec:
    """A random well-posed spec: leading coefficient bounded away from zero."""
    order = int(rng.integers(1, 4)) if order is None else order
    n = int(rng.integers(4, 16)) if n is None else n
    time_invariant = bool(rng.integers(2)) if time_invariant is None else time_invariant
    nonlinear = bool(rng.integers(2)) if nonlinear is None else nonlinear
    nt = 1 if time_invariant else n
    coeffs = rng.uniform(-0.5, 0.5, size=(dim, nt, order + 1))
    coeffs[..., order] = rng.uniform(0.5, 1.5, size=(dim, nt))
    init = []
    for a in range(dim):
        for i in range(order):
            init.append(InitCondition(a, i, float(rng.uniform(-1, 1)), pinned=bool(rng.integers(2))))
    terms = []
    if nonlinear:
        terms.append(NonlinearTerm(Monomial({(0, 0): 2}), rng.uniform(-0.3, 0.3, size=(dim, nt))))
    return OdeSpec(
        order=order, n_steps=n, dim=dim, coeffs=coeffs, rhs=rng.uniform(-1, 1, size=(dim, nt)),
        steps=rng.uniform(0.05, 0.2, size=n - 1), init=init, nonlinear=terms,
        time_invariant=time_invariant, central_difference=central_difference,
    )


def harmonic(n: int = 100, h: float = 0.1, **kw) -> OdeSpec:
    """``u'' + u = 0`` with ``u(0) = 1, u'(0) = 0``."""
    return OdeSpec.constant([1.0, 0.0, 1.0], n, h, init=[1.0, 0.0], **kw)


def third_order(n: int = 100, h: float = 0.1) -> OdeSpec:
    """``u''' + u'' + u' = 0`` with ``u(0) = 0, u'(0) = 1, u''(0) = 0``."""
    return OdeSpec.constant([0.0, 1.0, 1.0, 1.0], n, h, init=[0.0, 1.0, 0.0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance reporting -----------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.fixture
def criterion(request):
    """``record(number, ok, detail)``: prints one PASS/FAIL line and asserts ``ok``.

    ``ok=None`` records SKIP and skips the test (for criteria whose hardware
    precondition is not met).
    """

    def record(number: int, ok: bool | None, detail: str) -> None:
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        _CRITERIA[number] = (status, detail)
        print(f"criterion {number}: {status} -- {detail}")
        if ok is None:
            pytest.skip(detail)
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {status} -- {detail}")
