"""Numerical kernels: derivative estimation, constant fitting, ODE integration."""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import minimize

from .expr import (
    ArityError,
    Expr,
    compile_scalar,
    compile_vector,
    placeholder_count,
    placeholder_inits,
    to_masked_string,
)

DEFAULT_RTOL = 1e-8
DEFAULT_ATOL = 1e-10
BLOWUP_LIMIT = 1e6

BFGS_MAX_ITER = 100
BFGS_GTOL = 1e-8
BFGS_RESTARTS = 2  # extra random starts after the provided init
_GRAD_STEP = 1e-6


class GridError(Exception):
    """Trajectory grid is non-uniform or too short."""


@dataclass(frozen=True)
class Divergence:
    """Returned (never raised) when an integration blows up, hits a domain
    violation, or the step size underflows.  Downstream this maps to a
    trajectory fitness of -inf."""

    reason: str = ""


@dataclass(frozen=True)
class TrajectoryData:
    """Uniformly sampled state time series, optionally with estimated
    per-variable time derivatives."""

    times: np.ndarray
    states: np.ndarray
    derivs: np.ndarray | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)
        if times.ndim != 1 or states.ndim != 2 or states.shape[0] != times.shape[0]:
            raise GridError("times must be (N,) and states (N, D)")
        if times.shape[0] >= 2:
            steps = np.diff(times)
            dt = steps[0]
            if dt <= 0 or np.any(np.abs(steps - dt) > 1e-12 * max(abs(dt), 1.0)):
                raise GridError("time grid must be strictly increasing and uniform")
        if self.derivs is not None:
            derivs = np.asarray(self.derivs, dtype=float)
            object.__setattr__(self, "derivs", derivs)
            if derivs.shape != states.shape:
                raise GridError("derivs must match the shape of states")

    @property
    def n_samples(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


# ---------------------------------------------------------------------------
# derivative estimation
# ---------------------------------------------------------------------------

def estimate_derivatives(traj: TrajectoryData) -> TrajectoryData:
    """Fill ``derivs`` with fourth-order finite differences.

    Interior points use the five-point central stencil
    (-f[i+2] + 8 f[i+1] - 8 f[i-1] + f[i-2]) / (12 dt); the two points at each
    boundary use the matching one-sided five-point stencils, so the scheme is
    exact for polynomials up to degree 4 at every grid point.
    """
    if traj.n_samples < 5:
        raise GridError("need at least 5 samples for fourth-order differences")
    s = traj.states
    dt = traj.dt
    d = np.empty_like(s)
    d[2:-2] = (-s[4:] + 8.0 * s[3:-1] - 8.0 * s[1:-3] + s[:-4]) / (12.0 * dt)
    d[0] = (-25.0 * s[0] + 48.0 * s[1] - 36.0 * s[2] + 16.0 * s[3] - 3.0 * s[4]) / (12.0 * dt)
    d[1] = (-3.0 * s[0] - 10.0 * s[1] + 18.0 * s[2] - 6.0 * s[3] + s[4]) / (12.0 * dt)
    d[-2] = (-s[-5] + 6.0 * s[-4] - 18.0 * s[-3] + 10.0 * s[-2] + 3.0 * s[-1]) / (12.0 * dt)
    d[-1] = (3.0 * s[-5] - 16.0 * s[-4] + 36.0 * s[-3] - 48.0 * s[-2] + 25.0 * s[-1]) / (12.0 * dt)
    return replace(traj, derivs=d)


# ---------------------------------------------------------------------------
# constant fitting
# ---------------------------------------------------------------------------

def _central_gradient(f, c: np.ndarray) -> np.ndarray:
    """Central finite-difference gradient with per-coordinate step
    1e-6 * (1 + |c_i|)."""
    g = np.empty_like(c)
    for i in range(c.size):
        h = _GRAD_STEP * (1.0 + abs(c[i]))
        up = c.copy()
        dn = c.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2.0 * h)
    return g


def make_mse_problem(e: Expr, X, y):
    """Objective c -> MSE(y, e(X; c)) and its central-difference gradient.

    The gradient evaluates all 2n probe points in a single vectorized pass
    (constants enter the compiled expression as per-row arrays), which is the
    hot path of constant fitting.  Probe steps are 1e-6 * (1 + |c_i|).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    fn = compile_vector(e)
    n_samples = X.shape[0]
    tiled: dict[int, np.ndarray] = {}

    def objective(c) -> float:
        with np.errstate(all="ignore"):
            r = fn(X, tuple(c)) - y
            m = float(np.mean(r * r))
        return m if math.isfinite(m) else math.inf

    def gradient(c) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        n = c.size
        h = _GRAD_STEP * (1.0 + np.abs(c))
        probes = np.repeat(c[None, :], 2 * n, axis=0)
        for i in range(n):
            probes[2 * i, i] += h[i]
            probes[2 * i + 1, i] -= h[i]
        if n not in tiled:
            tiled[n] = np.tile(X, (2 * n, 1))
        columns = tuple(np.repeat(probes[:, k], n_samples) for k in range(n))
        with np.errstate(all="ignore"):
            out = fn(tiled[n], columns).reshape(2 * n, n_samples)
            m = np.mean((out - y[None, :]) ** 2, axis=1)
        m = np.where(np.isfinite(m), m, np.inf)
        return (m[0::2] - m[1::2]) / (2.0 * h)

    return objective, gradient


def _restart_rng(e: Expr) -> np.random.Generator:
    # Seed derived from the expression content so fits are reproducible at
    # any thread count and cacheable by callers.
    key = f"{to_masked_string(e)}|{placeholder_inits(e)}"
    digest = hashlib.blake2b(key.encode(), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "big"))


def fit_constants(
    e: Expr,
    X,
    y,
    init: Sequence[float] | None = None,
    trace: list | None = None,
) -> tuple[tuple[float, ...], float]:
    """Fit the expression's constant placeholders by minimising the mean
    squared error against ``y`` with BFGS (numerically differentiated).

    Three starts are tried: the provided ``init`` (default: the expression's
    pinned inits, i.e. all ones for bare placeholders) plus two draws uniform
    in [-2, 2] per slot; the lowest-MSE iterate wins.  A fit where every
    sample evaluates to NaN scores +inf.  Never raises on non-convergence.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = placeholder_count(e)
    objective, gradient = make_mse_problem(e, X, y)

    if n == 0:
        return (), objective(())

    if init is None:
        start = np.asarray(placeholder_inits(e), dtype=float)
    else:
        start = np.asarray(init, dtype=float)
        if start.size != n:
            raise ArityError(f"init length {start.size} does not match placeholder count {n}")

    rng = _restart_rng(e)
    starts = [start] + [rng.uniform(-2.0, 2.0, size=n) for _ in range(BFGS_RESTARTS)]

    best_c = start
    best_mse = objective(start)
    for s in starts:
        if best_mse <= 1e-16:
            break  # already at numerical noise; further restarts cannot help
        try:
            with np.errstate(all="ignore"), warnings.catch_warnings():
                # line-search non-convergence is handled by keeping the best
                # iterate, so scipy's RuntimeWarnings here are pure noise
                warnings.simplefilter("ignore", RuntimeWarning)
                res = minimize(
                    objective,
                    s,
                    method="BFGS",
                    jac=gradient,
                    options={"maxiter": BFGS_MAX_ITER, "gtol": BFGS_GTOL, "norm": np.inf},
                    callback=(None if trace is None else (lambda ck: trace.append(objective(ck)))),
                )
        except (ValueError, FloatingPointError):
            continue
        mse = objective(res.x)
        if mse < best_mse:
            best_mse = mse
            best_c = res.x
    return tuple(float(v) for v in np.atleast_1d(best_c)), float(best_mse)


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

class _BlowUp(Exception):
    pass


def integrate(
    equations: Sequence[tuple[Expr, Sequence[float]]],
    x0: Sequence[float],
    t_end: float,
    dt_out: float,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
) -> TrajectoryData | Divergence:
    """Integrate dx_i/dt = f_i(x) with adaptive explicit Runge-Kutta
    (Dormand-Prince 5(4) via scipy's RK45), sampled at 0, dt_out, ..., t_end.

    Returns :class:`Divergence` instead of raising when any state exceeds
    1e6 in magnitude, an equation evaluates to NaN, or the step size
    underflows.
    """
    if t_end <= 0 or dt_out <= 0:
        raise ValueError("t_end and dt_out must be positive")
    x0 = np.asarray(x0, dtype=float)
    fns = [compile_scalar(e) for e, _ in equations]
    consts = [tuple(float(v) for v in c) for _, c in equations]
    n_out = int(round(t_end / dt_out))
    grid = np.linspace(0.0, float(t_end), n_out + 1)

    def rhs(t, x):
        if np.max(np.abs(x)) > BLOWUP_LIMIT:
            raise _BlowUp("state magnitude exceeded 1e6")
        xs = tuple(map(float, x))  # plain floats keep the scalar path exact
        out = [fn(xs, c) for fn, c in zip(fns, consts)]
        for v in out:
            if v != v:  # NaN
                raise _BlowUp("equation evaluated to NaN")
        return out

    try:
        sol = solve_ivp(rhs, (0.0, float(t_end)), x0, method="RK45",
                        t_eval=grid, rtol=rtol, atol=atol)
    except _BlowUp as stop:
        return Divergence(str(stop))
    if not sol.success:
        return Divergence(sol.message)
    states = sol.y.T
    if not np.isfinite(states).all() or np.max(np.abs(states)) > BLOWUP_LIMIT:
        return Divergence("non-finite or out-of-range trajectory")
    return TrajectoryData(times=grid, states=np.ascontiguousarray(states))
