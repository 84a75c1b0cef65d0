"""Executable oracles for the model's qualitative guarantees.

Three trajectory-level properties are checked on sampled solutions:
component-wise non-negativity, quota-threshold invariance (once a quota
reaches its minimum it never drops back below), and the closed forms of
the nutrient-limited regime (exponential biomass decay at rate a + m_D
and quota growth equal to the pure uptake integral). Tolerances absorb
the O(dt^4) discretization error of the sampled trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_simpson

from .model import ParameterSet, uptake_rate_N
from .solver import IntegrationConfig, Trajectory, integrate


class PreconditionNotMet(RuntimeError):
    """The trajectory never enters the regime the oracle checks."""


@dataclass(frozen=True)
class RegimeReport:
    """Outcome of one trajectory property check."""

    property_name: str
    interval: tuple[float, float]
    max_violation: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tol

    def as_line(self) -> str:
        return (
            f"{self.property_name},{self.interval[0]:.17g},{self.interval[1]:.17g},"
            f"{self.max_violation:.17g},{str(self.passed).lower()}"
        )


def check_positivity(traj: Trajectory, tol: float = 1e-9) -> RegimeReport:
    """Pass iff every sampled component is >= -tol."""
    worst = float(np.min(traj.states)) if traj.states.size else 0.0
    return RegimeReport(
        property_name="positivity",
        interval=(0.0, float(traj.times[-1]) if len(traj.times) else 0.0),
        max_violation=max(0.0, -worst),
        tol=tol,
    )


def _threshold_violation(times, values, q_min, tol):
    # first sample at/above the threshold, then worst later shortfall
    above = np.nonzero(values >= q_min)[0]
    if len(above) == 0:
        return None  # regime never entered: vacuous pass
    j0 = above[0]
    tail = values[j0:]
    return float(times[j0]), float(np.max(q_min - tail))


def check_quota_threshold(traj: Trajectory, P: ParameterSet, tol: float = 1e-9) -> RegimeReport:
    """Once a quota reaches its minimum it must stay >= minimum - tol.

    Checked for both quotas over the sampled trajectory; a quota that
    never reaches its minimum passes vacuously.
    """
    worst = 0.0
    t_enter = float(traj.times[-1]) if len(traj.times) else 0.0
    for idx, q_min in ((2, P.Q_min_N), (3, P.Q_min_C)):
        hit = _threshold_violation(traj.times, traj.states[:, idx], q_min, tol)
        if hit is None:
            continue
        t0, violation = hit
        t_enter = min(t_enter, t0)
        worst = max(worst, violation)
    return RegimeReport(
        property_name="quota_threshold",
        interval=(t_enter, float(traj.times[-1]) if len(traj.times) else 0.0),
        max_violation=worst,
        tol=tol,
    )


def limited_regime_oracle(
    X0, P: ParameterSet, cfg: IntegrationConfig, tol: float = 1e-6
) -> RegimeReport:
    """Closed-form check of the nitrogen-limited regime.

    Integrates from X0 (which must start with Q_N below Q_min_N), finds the
    initial window on which Q_N stays below Q_min_N at every sample, and
    verifies there that

    * D(t) = D(0) exp(-(a + m_D) t) to relative tolerance tol, and
    * Q_N(t) = Q_N(0) + integral of the N uptake rate, evaluated by
      composite Simpson on the integration grid, to relative tolerance tol.

    The trajectory is resampled at every dt step regardless of
    cfg.sample_period (the quadrature lives on the dt grid).

    Raises PreconditionNotMet if the limited regime is never entered.
    """
    x0 = np.asarray(X0, dtype=float)
    if x0[2] >= P.Q_min_N:
        raise PreconditionNotMet("Q_N(0) is not below Q_min_N")
    fine = IntegrationConfig(
        t_end=cfg.t_end,
        dt=cfg.dt,
        sample_period=cfg.dt,
        blowup_threshold=cfg.blowup_threshold,
    )
    traj = integrate(x0, P, fine)

    q_n = np.concatenate(([x0[2]], traj.states[:, 2]))
    below = q_n < P.Q_min_N
    if not np.all(below[:2]):
        raise PreconditionNotMet("limited regime exits before the first step")
    n_in = int(np.argmin(below)) if not np.all(below) else len(q_n)
    # samples 0 .. n_in-1 are inside the limited window
    times = np.concatenate(([0.0], traj.times))[:n_in]
    d = np.concatenate(([x0[4]], traj.states[:, 4]))[:n_in]
    n_conc = np.concatenate(([x0[0]], traj.states[:, 0]))[:n_in]
    q_n = q_n[:n_in]

    d_exact = x0[4] * np.exp(-(P.a + P.m_D) * times)
    d_scale = max(abs(x0[4]), float(np.max(np.abs(d_exact))))
    viol_d = 0.0 if d_scale == 0.0 else float(np.max(np.abs(d - d_exact))) / d_scale

    uptake = np.array([uptake_rate_N(v, P) for v in n_conc])
    q_exact = x0[2] + cumulative_simpson(uptake, x=times, initial=0.0)
    q_scale = max(abs(x0[2]), float(np.max(np.abs(q_exact))), P.Q_min_N)
    viol_q = float(np.max(np.abs(q_n - q_exact))) / q_scale

    return RegimeReport(
        property_name="limited_regime",
        interval=(0.0, float(times[-1])),
        max_violation=max(viol_d, viol_q),
        tol=tol,
    )


def fit_log_slope(times, values) -> float:
    """Least-squares slope of log(values) against time.

    Used to read exponential growth/decay rates off a trajectory window;
    all values must be strictly positive.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if np.any(v <= 0.0):
        raise ValueError("fit_log_slope needs strictly positive values")
    slope, _ = np.polyfit(t, np.log(v), 1)
    return float(slope)
