"""Fixed-step RK4 integration of the model, with forward sensitivities.

Integrations use the classical explicit Runge-Kutta 4 scheme with a fixed
step (default 0.01 day) and record the state every sample_period. The
sensitivity variant advances the coupled 6 + 66 dimensional system

    dX/dt = F(X, P),    dS/dt = (dF/dX) S + dF/dP,    S(0) = 0,

as a single augmented vector, so state and sensitivities share the same
RK4 stage points. Positive-part clipping happens inside the right-hand
side at every stage evaluation, never on the stored state.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numba import njit

from .model import (
    FREE_PARAMETER_NAMES,
    N_FREE,
    N_STATE,
    STATE_NAMES,
    ParameterSet,
    _jacobians_into,
    _rhs_into,
)

DEFAULT_DT = 0.01
DEFAULT_BLOWUP_THRESHOLD = 1.0e12


class BlowUp(RuntimeError):
    """A trajectory left the finite / sub-threshold region.

    Attributes
    ----------
    time : first integration time at which the divergence was detected.
    """

    def __init__(self, time: float):
        super().__init__(f"trajectory blew up at t = {time:g}")
        self.time = time


@dataclass(frozen=True)
class IntegrationConfig:
    """Grid for a fixed-step integration.

    sample_period must be a positive integer multiple of dt, and t_end a
    positive integer multiple of sample_period.
    """

    t_end: float
    dt: float = DEFAULT_DT
    sample_period: float = 1.0
    blowup_threshold: float = DEFAULT_BLOWUP_THRESHOLD

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.sample_period <= 0.0 or self.t_end <= 0.0:
            raise ValueError("sample_period and t_end must be positive")
        if self.steps_per_sample < 1 or self.n_samples < 1:
            raise ValueError("sample_period must hold >= 1 step and t_end >= 1 sample")
        if abs(self.steps_per_sample * self.dt - self.sample_period) > 1e-9 * self.sample_period:
            raise ValueError("sample_period must be an integer multiple of dt")
        if abs(self.n_samples * self.sample_period - self.t_end) > 1e-9 * self.t_end:
            raise ValueError("t_end must be an integer multiple of sample_period")

    @property
    def steps_per_sample(self) -> int:
        return int(round(self.sample_period / self.dt))

    @property
    def n_samples(self) -> int:
        return int(round(self.t_end / self.sample_period))


@dataclass(frozen=True)
class Trajectory:
    """Sampled solution; the initial state is kept apart from the samples.

    times[j] = (j+1) * sample_period, states[j] the state there, and
    sensitivities[j] (when present) the 6x11 matrix dX/dP there.
    """

    times: np.ndarray
    states: np.ndarray
    initial_state: np.ndarray
    dt: float
    sensitivities: Optional[np.ndarray] = None


def detect_blowup(X, threshold: float = DEFAULT_BLOWUP_THRESHOLD) -> bool:
    """True iff any entry is non-finite or strictly exceeds threshold in magnitude."""
    x = np.asarray(X, dtype=float)
    return bool(np.any(~np.isfinite(x)) or np.any(np.abs(x) > threshold))


def rk4_step(t: float, x, dt: float, f: Callable):
    """One classical RK4 step of dx/dt = f(t, x).

    Works for any state-like value supporting vector arithmetic; non-finite
    stage evaluations propagate into the result.
    """
    k1 = f(t, x)
    k2 = f(t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = f(t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = f(t + dt, x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@njit(cache=True)
def _aug_rhs(t, x, s, par, out_x, out_s, jx, jp, with_sens):
    _rhs_into(t, x, par, out_x)
    if with_sens:
        _jacobians_into(t, x, par, jx, jp)
        for i in range(6):
            for k in range(11):
                acc = jp[i, k]
                for l in range(6):
                    acc += jx[i, l] * s[l, k]
                out_s[i, k] = acc


@njit(cache=True)
def _integrate_loop(x0, par, dt, n_per, m, threshold, with_sens):
    # returns (status, fail_time, states, sens); status 0 = ok, 1 = blow-up
    states = np.empty((m, 6))
    n_sens = m if with_sens else 0
    sens = np.zeros((n_sens, 6, 11))

    x = x0.copy()
    s = np.zeros((6, 11))
    xt = np.empty(6)
    st = np.empty((6, 11))
    jx = np.empty((6, 6))
    jp = np.empty((6, 11))
    k1 = np.empty(6)
    k2 = np.empty(6)
    k3 = np.empty(6)
    k4 = np.empty(6)
    ks1 = np.empty((6, 11))
    ks2 = np.empty((6, 11))
    ks3 = np.empty((6, 11))
    ks4 = np.empty((6, 11))

    step = 0
    for j in range(m):
        for _ in range(n_per):
            t = step * dt
            half = 0.5 * dt

            _aug_rhs(t, x, s, par, k1, ks1, jx, jp, with_sens)

            for i in range(6):
                xt[i] = x[i] + half * k1[i]
            if with_sens:
                for i in range(6):
                    for k in range(11):
                        st[i, k] = s[i, k] + half * ks1[i, k]
            _aug_rhs(t + half, xt, st, par, k2, ks2, jx, jp, with_sens)

            for i in range(6):
                xt[i] = x[i] + half * k2[i]
            if with_sens:
                for i in range(6):
                    for k in range(11):
                        st[i, k] = s[i, k] + half * ks2[i, k]
            _aug_rhs(t + half, xt, st, par, k3, ks3, jx, jp, with_sens)

            for i in range(6):
                xt[i] = x[i] + dt * k3[i]
            if with_sens:
                for i in range(6):
                    for k in range(11):
                        st[i, k] = s[i, k] + dt * ks3[i, k]
            _aug_rhs(t + dt, xt, st, par, k4, ks4, jx, jp, with_sens)

            sixth = dt / 6.0
            for i in range(6):
                x[i] += sixth * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            if with_sens:
                for i in range(6):
                    for k in range(11):
                        s[i, k] += sixth * (
                            ks1[i, k] + 2.0 * ks2[i, k] + 2.0 * ks3[i, k] + ks4[i, k]
                        )

            step += 1

            ok = True
            for i in range(6):
                xi = x[i]
                if not np.isfinite(xi) or xi > threshold or xi < -threshold:
                    ok = False
            if ok and with_sens:
                for i in range(6):
                    for k in range(11):
                        if not np.isfinite(s[i, k]):
                            ok = False
            if not ok:
                return 1, step * dt, states, sens

        for i in range(6):
            states[j, i] = x[i]
        if with_sens:
            for i in range(6):
                for k in range(11):
                    sens[j, i, k] = s[i, k]

    return 0, 0.0, states, sens


def _run(X0, P: ParameterSet, cfg: IntegrationConfig, with_sens: bool) -> Trajectory:
    x0 = np.asarray(X0, dtype=float)
    if x0.shape != (N_STATE,):
        raise ValueError(f"initial state must have shape (6,), got {x0.shape}")
    if not np.all(np.isfinite(x0)):
        raise ValueError("non-finite initial state")
    status, t_fail, states, sens = _integrate_loop(
        x0,
        P.as_array(),
        cfg.dt,
        cfg.steps_per_sample,
        cfg.n_samples,
        cfg.blowup_threshold,
        with_sens,
    )
    if status != 0:
        raise BlowUp(t_fail)
    times = (1.0 + np.arange(cfg.n_samples)) * cfg.sample_period
    return Trajectory(
        times=times,
        states=states,
        initial_state=x0,
        dt=cfg.dt,
        sensitivities=sens if with_sens else None,
    )


def integrate(X0, P: ParameterSet, cfg: IntegrationConfig) -> Trajectory:
    """RK4 trajectory of the clipped system, sampled every sample_period.

    Raises BlowUp with the first offending time if any state component
    turns non-finite or exceeds cfg.blowup_threshold in magnitude.
    """
    return _run(X0, P, cfg, with_sens=False)


def integrate_with_sensitivity(X0, P: ParameterSet, cfg: IntegrationConfig) -> Trajectory:
    """Trajectory plus forward sensitivities dX/dP of the 11 free parameters.

    The sensitivity matrix starts at zero (the initial condition does not
    depend on P) and shares every RK4 stage with the state. Blow-up
    detection applies to the state; sensitivities only need to stay finite.
    """
    return _run(X0, P, cfg, with_sens=True)


# ---------------------------------------------------------------------------
# trajectory CSV
# ---------------------------------------------------------------------------

_SENS_COLUMNS = tuple(
    f"d{s}_d{p}" for s in STATE_NAMES for p in FREE_PARAMETER_NAMES
)


def write_trajectory_csv(traj: Trajectory, path, with_sensitivities: bool = False) -> None:
    """Write samples as CSV (17 significant digits, lossless round trip)."""
    if with_sensitivities and traj.sensitivities is None:
        raise ValueError("trajectory carries no sensitivities")
    header = ("t",) + STATE_NAMES
    if with_sensitivities:
        header = header + _SENS_COLUMNS
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for j, t in enumerate(traj.times):
            row = [f"{t:.17g}"] + [f"{v:.17g}" for v in traj.states[j]]
            if with_sensitivities:
                row += [f"{v:.17g}" for v in traj.sensitivities[j].ravel()]
            w.writerow(row)


def read_trajectory_csv(path) -> tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Read a trajectory CSV back as (times, states, sensitivities_or_None)."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = tuple(next(r))
        plain = ("t",) + STATE_NAMES
        if header == plain:
            with_sens = False
        elif header == plain + _SENS_COLUMNS:
            with_sens = True
        else:
            raise ValueError(f"{path}: unexpected trajectory CSV header")
        rows = [[float(v) for v in row] for row in r if row]
    data = np.asarray(rows, dtype=float)
    if data.size == 0:
        raise ValueError(f"{path}: no samples")
    times = data[:, 0]
    states = data[:, 1 : 1 + N_STATE]
    sens = None
    if with_sens:
        sens = data[:, 1 + N_STATE :].reshape(len(times), N_STATE, N_FREE)
    return times, states, sens
