"""Along-path speed estimators.

All estimators share one model: state x = (d, s), transition
x+ = A(dt) x + b(dt) u with nominal acceleration u, and scalar measurements
y = d.  ``mhe_solve`` minimizes the batch objective

    J = (x_0 - x~)' Psi^-1 (x_0 - x~)
      + sum_i (y_i - d_i)^2 / Omega
      + sum_i (x_{i+1} - A x_i - b u)' Q^-1 (x_{i+1} - A x_i - b u)

over the whole state sequence, optionally subject to bounds on every speed;
with the bounds off, its minimizer coincides with the Rauch-Tung-Striebel
smoother seeded from the same prior, which is the cross-check the test
suite leans on.  Weights are stored as covariance-like matrices and enter J
through their inverses.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .tracks import KinematicState, MeasurementSeries


@dataclass(frozen=True)
class EstimatorConfig:
    """Weights and solver settings shared by every estimator.

    ``horizon`` is ``"full"`` for batch smoothing or an integer window
    length for the receding mode.  ``speed_bounds`` is (min, max) or None.
    """

    Q: np.ndarray = field(default_factory=lambda: np.eye(2))
    Omega: float = 1.0
    Psi: np.ndarray = field(default_factory=lambda: np.eye(2))
    horizon: int | str = "full"
    u_nominal: float = 0.0
    speed_bounds: tuple[float, float] | None = None
    solver_tol: float = 1e-8
    max_iter: int = 50


@dataclass(frozen=True)
class Prior:
    """Arrival-cost anchor: believed state at the first window index."""

    x_tilde: np.ndarray

    def __post_init__(self):
        xt = np.asarray(self.x_tilde, dtype=float)
        if xt.shape != (2,):
            raise ConfigError(f"prior state must be (2,), got {xt.shape}")
        object.__setattr__(self, "x_tilde", xt)


@dataclass(frozen=True)
class StateEstimate:
    """Estimator output: one state per measurement plus solve diagnostics."""

    states: tuple
    objective: float
    converged: bool
    active_constraints: tuple = ()


def default_prior(series: MeasurementSeries) -> Prior:
    """Prior from the data itself: first distance and first naive speed."""
    _check_series(series)
    s0 = (series.d[1] - series.d[0]) / (series.times[1] - series.times[0])
    return Prior(np.array([series.d[0], s0]))


def _check_series(series: MeasurementSeries) -> None:
    if len(series) < 2:
        raise DataError("estimation needs at least 2 measurements")


def _check_spd(name: str, m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape != (2, 2) or np.abs(m - m.T).max() > 1e-9:
        raise ConfigError(f"{name} must be a symmetric 2x2 matrix")
    if np.any(np.linalg.eigvalsh(m) <= 0.0):
        raise ConfigError(f"{name} must be positive definite")
    return m


def _validate_config(config: EstimatorConfig) -> None:
    _check_spd("Q", config.Q)
    _check_spd("Psi", config.Psi)
    if not config.Omega > 0.0:
        raise ConfigError(f"Omega must be positive, got {config.Omega}")
    if config.speed_bounds is not None:
        lo, hi = config.speed_bounds
        if not lo <= hi:
            raise ConfigError(f"speed bounds {config.speed_bounds} are empty")
    if not config.solver_tol > 0.0:
        raise ConfigError("solver_tol must be positive")
    if config.max_iter < 1:
        raise ConfigError("max_iter must be at least 1")


def _step_matrices(dts: np.ndarray, u: float):
    mats = []
    for dt in dts:
        a = np.array([[1.0, dt], [0.0, 1.0]])
        b = np.array([0.5 * u * dt * dt, u * dt])
        mats.append((a, b))
    return mats


def _stack_residual_system(series, config, prior):
    """Square-root-weighted residual stacking: J(z) = ||S z - v||^2."""
    n = len(series)
    steps = _step_matrices(np.diff(series.times), config.u_nominal)
    rows = 2 + n + 2 * (n - 1)
    s_mat = np.zeros((rows, 2 * n))
    v = np.zeros(rows)

    l_psi = np.linalg.cholesky(np.linalg.inv(config.Psi)).T
    s_mat[0:2, 0:2] = l_psi
    v[0:2] = l_psi @ prior.x_tilde

    w = 1.0 / np.sqrt(config.Omega)
    for i in range(n):
        s_mat[2 + i, 2 * i] = w
        v[2 + i] = w * series.d[i]

    l_q = np.linalg.cholesky(np.linalg.inv(config.Q)).T
    for i, (a, b) in enumerate(steps):
        r = 2 + n + 2 * i
        s_mat[r:r + 2, 2 * i:2 * i + 2] = -l_q @ a
        s_mat[r:r + 2, 2 * i + 2:2 * i + 4] = l_q
        v[r:r + 2] = l_q @ b
    return s_mat, v


def _solve_bound_qp(h_mat, f, lo, hi, z_start, tol, max_iter):
    """Primal active-set minimization of z'Hz - 2f'z under box bounds.

    Ties when several bounds could enter or leave the working set resolve
    to the lowest variable index so reruns are bit-reproducible.
    """
    dim = len(f)
    z = np.clip(z_start, lo, hi)
    pinned = lo == hi
    w_lo = (z <= lo) & np.isfinite(lo)
    w_hi = (z >= hi) & np.isfinite(hi) & ~w_lo
    iterations = 0

    while iterations < max_iter:
        iterations += 1
        fixed = w_lo | w_hi
        z_eq = np.where(w_lo, lo, np.where(w_hi, hi, 0.0))
        free = ~fixed
        if free.any():
            h_ff = h_mat[np.ix_(free, free)]
            rhs = f[free] - h_mat[np.ix_(free, fixed)] @ z_eq[fixed]
            z_eq[free] = np.linalg.solve(h_ff, rhs)

        p = z_eq - z
        scale = max(1.0, np.abs(z).max())
        if np.abs(p).max() <= 1e-13 * scale:
            grad = 2.0 * (h_mat @ z - f)
            mult = np.where(w_lo, grad, np.where(w_hi, -grad, np.inf))
            mult[pinned] = np.inf
            worst = int(np.argmin(mult))
            if mult[worst] >= -tol:
                return z, True
            if w_lo[worst]:
                w_lo[worst] = False
            else:
                w_hi[worst] = False
            continue

        alpha = 1.0
        blocker = -1
        blocker_side = ""
        for i in range(dim):
            if fixed[i] or p[i] == 0.0:
                continue
            if p[i] > 0.0 and np.isfinite(hi[i]):
                step = (hi[i] - z[i]) / p[i]
                side = "hi"
            elif p[i] < 0.0 and np.isfinite(lo[i]):
                step = (lo[i] - z[i]) / p[i]
                side = "lo"
            else:
                continue
            if step < alpha - 1e-15:
                alpha, blocker, blocker_side = step, i, side
        if blocker < 0:
            z = z_eq
            continue
        z = z + max(alpha, 0.0) * p
        if blocker_side == "hi":
            z[blocker] = hi[blocker]
            w_hi[blocker] = True
        else:
            z[blocker] = lo[blocker]
            w_lo[blocker] = True

    return z, False


def _kkt_satisfied(h_mat, f, z, lo, hi, tol):
    grad = 2.0 * (h_mat @ z - f)
    scale = tol * max(1.0, np.abs(f).max())
    at_lo = np.isfinite(lo) & (z <= lo + 1e-9)
    at_hi = np.isfinite(hi) & (z >= hi - 1e-9)
    free = ~(at_lo | at_hi)
    if free.any() and np.abs(grad[free]).max() > scale:
        return False
    if np.any(grad[at_lo & ~at_hi] < -scale):
        return False
    if np.any(-grad[at_hi & ~at_lo] < -scale):
        return False
    return True


def _to_estimate(series, config, prior, z, converged):
    s_mat, v = _stack_residual_system(series, config, prior)
    residual = s_mat @ z - v
    objective = float(residual @ residual)
    states = tuple(KinematicState(z[2 * i], z[2 * i + 1]) for i in range(len(series)))

    active = []
    if config.speed_bounds is not None:
        lo, hi = config.speed_bounds
        for i in range(len(series)):
            s = z[2 * i + 1]
            if np.isfinite(lo) and s <= lo + 1e-9:
                active.append((i, "lower"))
            elif np.isfinite(hi) and s >= hi - 1e-9:
                active.append((i, "upper"))
    return StateEstimate(states, objective, converged, tuple(active))


def mhe_solve(series: MeasurementSeries, config: EstimatorConfig | None = None,
              prior: Prior | None = None) -> StateEstimate:
    """Full-horizon moving-horizon estimate over the whole series.

    Solves the batch quadratic program exactly: unconstrained via a QR
    least-squares solve of the stacked residual system, with speed bounds
    via a primal active-set iteration on the same quadratic.
    """
    config = config or EstimatorConfig()
    _check_series(series)
    _validate_config(config)
    prior = prior or default_prior(series)

    s_mat, v = _stack_residual_system(series, config, prior)
    z_free = np.linalg.lstsq(s_mat, v, rcond=None)[0]

    if config.speed_bounds is None:
        return _to_estimate(series, config, prior, z_free, True)

    n = len(series)
    lo = np.full(2 * n, -np.inf)
    hi = np.full(2 * n, np.inf)
    lo[1::2], hi[1::2] = config.speed_bounds

    if np.all(z_free >= lo - 1e-12) and np.all(z_free <= hi + 1e-12):
        z = np.clip(z_free, lo, hi)
        return _to_estimate(series, config, prior, z, True)

    h_mat = s_mat.T @ s_mat
    f = s_mat.T @ v
    tol = config.solver_tol * max(1.0, np.abs(f).max())
    z, ok = _solve_bound_qp(h_mat, f, lo, hi, z_free, tol, config.max_iter)
    converged = ok and _kkt_satisfied(h_mat, f, z, lo, hi, config.solver_tol)
    return _to_estimate(series, config, prior, z, converged)


def mhe_receding(series: MeasurementSeries, config: EstimatorConfig,
                 prior: Prior | None = None) -> StateEstimate:
    """Receding-horizon variant: slide a fixed-length window over the data.

    Window k covers measurements {k - N + 1, ..., k} with N =
    ``config.horizon``.  The first window is seeded from ``prior`` and
    contributes all of its smoothed states; every later window takes its
    arrival prior from the previous window's smoothed state at the new
    window start and contributes only its newest state, so the output
    length always equals the measurement count and N = len(series)
    reproduces ``mhe_solve``.
    """
    _check_series(series)
    if isinstance(config.horizon, str) or not isinstance(config.horizon, (int, np.integer)):
        raise ConfigError("receding mode requires an integer horizon")
    n = len(series)
    window_len = int(config.horizon)
    if window_len < 2 or window_len > n:
        raise ConfigError(
            f"horizon must be in [2, {n}] for this series, got {window_len}"
        )
    _validate_config(config)
    prior = prior or default_prior(series)

    first = mhe_solve(series.window(0, window_len), config, prior)
    states = list(first.states)
    active = list(first.active_constraints)
    converged = first.converged
    prev = first.states

    for k in range(window_len, n):
        start = k - window_len + 1
        window = series.window(start, k + 1)
        window_prior = Prior(prev[1].as_array())
        est = mhe_solve(window, config, window_prior)
        states.append(est.states[-1])
        active.extend(
            (k, side) for idx, side in est.active_constraints
            if idx == window_len - 1
        )
        converged = converged and est.converged
        prev = est.states

    z = np.array([[st.d, st.s] for st in states]).reshape(-1)
    s_mat, v = _stack_residual_system(series, config, prior)
    residual = s_mat @ z - v
    return StateEstimate(tuple(states), float(residual @ residual), converged,
                         tuple(active))


def _kf_forward(series, config, prior):
    n = len(series)
    steps = _step_matrices(np.diff(series.times), config.u_nominal)
    h_row = np.array([1.0, 0.0])
    eye = np.eye(2)

    x = prior.x_tilde.copy()
    p = np.array(config.Psi, dtype=float)
    x_pred = [x.copy()]
    p_pred = [p.copy()]
    x_filt = []
    p_filt = []

    for k in range(n):
        if k > 0:
            a, b = steps[k - 1]
            x = a @ x + b
            p = a @ p @ a.T + config.Q
            x_pred.append(x.copy())
            p_pred.append(p.copy())
        innov_var = p[0, 0] + config.Omega
        gain = p[:, 0] / innov_var
        x = x + gain * (series.d[k] - x[0])
        ikh = eye - np.outer(gain, h_row)
        p = ikh @ p @ ikh.T + config.Omega * np.outer(gain, gain)
        x_filt.append(x.copy())
        p_filt.append(p.copy())

    return (np.array(x_filt), np.array(p_filt), np.array(x_pred),
            np.array(p_pred), steps)


def kf_filter(series: MeasurementSeries, config: EstimatorConfig | None = None,
              prior: Prior | None = None) -> StateEstimate:
    """Causal Kalman filter with the update at the first timestamp.

    The prior is the believed state at the first measurement time; y_0
    updates it before any prediction, mirroring the arrival cost of the
    batch problem.
    """
    config = config or EstimatorConfig()
    _check_series(series)
    _validate_config(config)
    prior = prior or default_prior(series)
    x_filt, _, _, _, _ = _kf_forward(series, config, prior)
    z = x_filt.reshape(-1)
    s_mat, v = _stack_residual_system(series, config, prior)
    residual = s_mat @ z - v
    states = tuple(KinematicState(x[0], x[1]) for x in x_filt)
    return StateEstimate(states, float(residual @ residual), True)


def rts_smooth(series: MeasurementSeries, config: EstimatorConfig | None = None,
               prior: Prior | None = None) -> StateEstimate:
    """Rauch-Tung-Striebel smoother: KF forward pass plus backward recursion.

    With matching weights and prior, its state sequence is the minimizer of
    the unconstrained full-horizon objective.
    """
    config = config or EstimatorConfig()
    _check_series(series)
    _validate_config(config)
    prior = prior or default_prior(series)
    x_filt, p_filt, x_pred, p_pred, steps = _kf_forward(series, config, prior)

    n = len(series)
    x_smooth = x_filt.copy()
    for k in range(n - 2, -1, -1):
        a, _ = steps[k]
        gain = p_filt[k] @ a.T @ np.linalg.inv(p_pred[k + 1])
        x_smooth[k] = x_filt[k] + gain @ (x_smooth[k + 1] - x_pred[k + 1])

    z = x_smooth.reshape(-1)
    s_mat, v = _stack_residual_system(series, config, prior)
    residual = s_mat @ z - v
    states = tuple(KinematicState(x[0], x[1]) for x in x_smooth)
    return StateEstimate(states, float(residual @ residual), True)


def naive_speed(series: MeasurementSeries) -> np.ndarray:
    """Forward-difference speeds; the last value repeats to keep the length."""
    _check_series(series)
    rates = np.diff(series.d) / np.diff(series.times)
    return np.concatenate([rates, rates[-1:]])
