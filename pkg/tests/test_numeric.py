from __future__ import annotations

import math

import numpy as np
import pytest

from odesearch import expr as ex
from odesearch import numeric as nm
from odesearch.numeric import Divergence, GridError, TrajectoryData


def _traj(times, values) -> TrajectoryData:
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    return TrajectoryData(times=np.asarray(times, dtype=float), states=values)


# ----------------------------------------------------- derivative kernel ---

def test_derivatives_quadratic_exact():
    t = np.arange(0.0, 1.05, 0.1)
    traj = nm.estimate_derivatives(_traj(t, t**2))
    assert np.max(np.abs(traj.derivs[:, 0] - 2 * t)) <= 1e-10


def test_derivatives_constant_zero():
    t = np.arange(0.0, 1.05, 0.1)
    traj = nm.estimate_derivatives(_traj(t, np.full_like(t, 3.7)))
    assert np.max(np.abs(traj.derivs)) <= 1e-12  # zero up to rounding


def test_derivatives_degree4_polynomials_exact_everywhere():
    rng = np.random.default_rng(0)
    t = np.linspace(0.0, 1.0, 11)
    for _ in range(25):
        coeffs = rng.uniform(-2, 2, size=5)
        values = sum(c * t**p for p, c in enumerate(coeffs))
        exact = sum(p * c * t ** (p - 1) for p, c in enumerate(coeffs) if p >= 1)
        traj = nm.estimate_derivatives(_traj(t, values))
        assert np.max(np.abs(traj.derivs[:, 0] - exact)) <= 1e-9


def test_derivatives_sin_interior_truncation_bound():
    t = np.arange(0.0, 10.05, 0.1)
    traj = nm.estimate_derivatives(_traj(t, np.sin(t)))
    interior = slice(2, -2)
    err = np.max(np.abs(traj.derivs[interior, 0] - np.cos(t)[interior]))
    assert err <= 1.0 * 0.1**4  # classical bound with C < 1
    assert err <= 1e-5


def test_derivatives_grid_errors():
    with pytest.raises(GridError):
        nm.estimate_derivatives(_traj([0.0, 0.1, 0.2, 0.3], np.zeros(4)))
    with pytest.raises(GridError):
        _traj([0.0, 0.1, 0.25, 0.3, 0.4], np.zeros(5))


def test_trajectory_requires_matching_shapes():
    with pytest.raises(GridError):
        TrajectoryData(times=np.arange(3.0), states=np.zeros((4, 1)))


# -------------------------------------------------------- constant fitting ---

def test_fit_constants_growth_coefficient():
    X = np.linspace(0.5, 5.0, 30)[:, None]
    y = 0.23 * X[:, 0]
    consts, mse = nm.fit_constants(ex.parse("C*x_0", 1), X, y)
    assert abs(consts[0] - 0.23) <= 1e-6
    assert mse <= 1e-12


def test_fit_constants_no_slots():
    X = np.linspace(0.0, 1.0, 10)[:, None]
    consts, mse = nm.fit_constants(ex.Variable(0), X, X[:, 0])
    assert consts == ()
    assert mse == 0.0


def test_fit_constants_affine():
    X = np.linspace(-1.0, 3.0, 20)[:, None]
    y = 2.0 * X[:, 0] + 5.0
    consts, mse = nm.fit_constants(ex.parse("C*x_0 + C", 1), X, y)
    assert abs(consts[0] - 2.0) <= 1e-6
    assert abs(consts[1] - 5.0) <= 1e-6


def test_fit_constants_matches_least_squares_oracle():
    rng = np.random.default_rng(12)
    forms = [
        ("C*x_0 + C", lambda X: np.column_stack([X[:, 0], np.ones(len(X))])),
        ("C*x_0 + C*x_1", lambda X: X[:, :2]),
        ("C*sin(x_0) + C*x_1", lambda X: np.column_stack([np.sin(X[:, 0]), X[:, 1]])),
        ("C*exp(x_0) + C*x_1 + C", lambda X: np.column_stack(
            [np.exp(X[:, 0]), X[:, 1], np.ones(len(X))])),
    ]
    for trial in range(20):
        text, design = forms[trial % len(forms)]
        X = rng.uniform(-2, 2, size=(40, 2))
        target = rng.uniform(-3, 3, size=design(X).shape[1])
        y = design(X) @ target
        consts, _ = nm.fit_constants(ex.parse(text, 2), X, y)
        oracle, *_ = np.linalg.lstsq(design(X), y, rcond=None)
        assert np.max(np.abs(np.asarray(consts) - oracle)) <= 1e-5


def test_fit_constants_pinned_literal_start():
    X = np.linspace(1.0, 4.0, 25)[:, None]
    y = 3.0 * X[:, 0]
    e = ex.parse("2.9*x_0", 1)  # literal becomes a placeholder pinned at 2.9
    assert ex.placeholder_inits(e) == (2.9,)
    consts, _ = nm.fit_constants(e, X, y)
    assert abs(consts[0] - 3.0) <= 1e-6


def test_fit_constants_trace_monotone():
    X = np.linspace(-2.0, 2.0, 30)[:, None]
    y = 1.7 * X[:, 0] - 0.4
    trace: list[float] = []
    nm.fit_constants(ex.parse("C*x_0 + C", 1), X, y, init=[5.0, -5.0], trace=trace)
    assert len(trace) >= 2
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


def test_fit_constants_all_nan_is_infinite_objective():
    X = np.full((10, 1), -1.0)
    y = np.zeros(10)
    consts, mse = nm.fit_constants(ex.parse("log(x_0)*C", 1), X, y)
    assert mse == math.inf
    assert len(consts) == 1


def test_numeric_gradient_matches_higher_order_oracle():
    def objective(c):
        return math.sin(c[0]) * math.exp(0.3 * c[1]) + c[0] ** 2 - 0.5 * c[1]

    def oracle(c, i, h=1e-4):
        # fourth-order central difference, step chosen for ~1e-10 accuracy
        up2, up1, dn1, dn2 = (c.copy() for _ in range(4))
        up2[i] += 2 * h
        up1[i] += h
        dn1[i] -= h
        dn2[i] -= 2 * h
        return (-objective(up2) + 8 * objective(up1) - 8 * objective(dn1) + objective(dn2)) / (12 * h)

    rng = np.random.default_rng(4)
    for _ in range(25):
        c = rng.uniform(-2, 2, size=2)
        got = nm._central_gradient(objective, c)
        want = np.array([oracle(c, 0), oracle(c, 1)])
        assert np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-8)) <= 1e-4


def test_bfgs_gradient_matches_higher_order_oracle():
    # the gradient actually handed to BFGS (batched probes, one numpy pass)
    rng = np.random.default_rng(6)
    X = rng.uniform(0.2, 3.0, size=(30, 2))
    e = ex.parse("C*sin(x_0) + C*log(x_1) + C", 2)
    target = np.array([1.3, -0.7, 0.4])
    y = target[0] * np.sin(X[:, 0]) + target[1] * np.log(X[:, 1]) + target[2]
    objective, gradient = nm.make_mse_problem(e, X, y)

    def oracle(c, i, h=1e-4):
        up2, up1, dn1, dn2 = (np.array(c, dtype=float) for _ in range(4))
        up2[i] += 2 * h
        up1[i] += h
        dn1[i] -= h
        dn2[i] -= 2 * h
        return (-objective(up2) + 8 * objective(up1) - 8 * objective(dn1) + objective(dn2)) / (12 * h)

    for _ in range(20):
        c = rng.uniform(-2, 2, size=3)
        got = gradient(c)
        want = np.array([oracle(c, i) for i in range(3)])
        assert np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-8)) <= 1e-4


# ------------------------------------------------------------- integration ---

def _harmonic_exact(times):
    w = math.sqrt(2.1)
    return 0.40 * np.cos(w * times) + (-0.03 / w) * np.sin(w * times)


def test_integrate_harmonic_matches_analytic():
    eqs = [
        (ex.parse("x_1", 2, ex.SIMULATION), ()),
        (ex.parse("-2.1*x_0", 2, ex.SIMULATION), ()),
    ]
    traj = nm.integrate(eqs, [0.40, -0.03], 10.0, 0.1)
    assert isinstance(traj, TrajectoryData)
    assert np.max(np.abs(traj.states[:, 0] - _harmonic_exact(traj.times))) <= 1e-6


def test_integrate_fixed_point():
    eqs = [(ex.parse("x_0 - x_0", 1, ex.SIMULATION), ())]
    traj = nm.integrate(eqs, [4.2], 10.0, 0.1)
    assert np.allclose(traj.states, 4.2, rtol=0, atol=1e-12)


def test_integrate_blowup_returns_divergence():
    eqs = [(ex.parse("x_0*x_0", 1, ex.SIMULATION), ())]
    result = nm.integrate(eqs, [1.0], 10.0, 0.1)  # x(t) = 1/(1-t) blows up at t=1
    assert isinstance(result, Divergence)


def test_integrate_nan_rhs_returns_divergence():
    eqs = [(ex.parse("log(x_0)", 1, ex.SIMULATION), ())]
    result = nm.integrate(eqs, [-1.0], 10.0, 0.1)
    assert isinstance(result, Divergence)


def test_integrate_tolerance_convergence():
    eqs = [
        (ex.parse("x_1", 2, ex.SIMULATION), ()),
        (ex.parse("-2.1*x_0", 2, ex.SIMULATION), ()),
    ]
    base = nm.integrate(eqs, [0.40, -0.03], 10.0, 0.1)
    tight = nm.integrate(eqs, [0.40, -0.03], 10.0, 0.1, rtol=0.5e-8, atol=0.5e-10)
    assert abs(base.states[-1, 0] - tight.states[-1, 0]) <= 1e-7


def test_integrate_argument_validation():
    with pytest.raises(ValueError):
        nm.integrate([(ex.Variable(0), ())], [1.0], -1.0, 0.1)
