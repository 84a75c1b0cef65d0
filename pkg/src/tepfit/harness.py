"""Virtual-chemostat target generation and seeded perturbation trials.

The target observations are synthesized by integrating the model at the
reference parameters (no observation noise). Each trial perturbs every
free parameter by an independent uniform relative factor in [-eps, eps],
runs the staged identification and records success (pipeline completed;
failure means an irrecoverable blow-up or singular normal matrix),
the final relative residual and the max relative parameter error
||P_num - P_tg||_inf / ||P_tg||_inf.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .identify import IdentificationConfig, ObservationSet, StageResult, staged_identify
from .model import FREE_PARAMETER_NAMES, N_FREE, ParameterSet
from .solver import DEFAULT_DT, IntegrationConfig, integrate

INITIAL_DIATOM = 1e-4  # 1e5 cell/L in model units of 1e9 cell/L


class EmptyInput(ValueError):
    """summarize was handed an empty record list."""


@dataclass(frozen=True)
class TrialRecord:
    """One seeded identification attempt."""

    seed: int
    epsilon: float
    theta: np.ndarray
    success: bool
    rel_residual: float   # last finite relative residual (nan if none)
    max_rel_error: float  # ||P_num - P_tg||_inf / ||P_tg||_inf, as a fraction
    wall_time: float


@dataclass(frozen=True)
class TrialStatistics:
    """Aggregate of one (epsilon, sampling period) batch."""

    epsilon: float
    sampling_period: float
    n_trials: int
    success_rate_pct: float
    mean_residual: float        # over all trials with a finite residual
    mean_max_error_pct: float   # over successful trials, in percent
    base_seed: int
    n_residual_excluded: int = 0  # trials that never produced a finite residual


def default_initial_state(P: ParameterSet) -> np.ndarray:
    """Bloom-start initial condition: inlet nutrients, minimal quotas, no TEP."""
    return np.array([P.N_in, P.C_in, P.Q_min_N, P.Q_min_C, INITIAL_DIATOM, 0.0])


def generate_target(
    P_tg: ParameterSet,
    X0=None,
    T: float = 50.0,
    delta_t: float = 1.0,
    dt: float = DEFAULT_DT,
) -> ObservationSet:
    """Noise-free observations of the target parameters, sampled every delta_t."""
    x0 = default_initial_state(P_tg) if X0 is None else np.asarray(X0, dtype=float)
    cfg = IntegrationConfig(t_end=T, dt=dt, sample_period=delta_t)
    traj = integrate(x0, P_tg, cfg)
    return ObservationSet(
        times=traj.times,
        states=traj.states,
        a=P_tg.a,
        N_in=P_tg.N_in,
        C_in=P_tg.C_in,
        alpha=P_tg.alpha,
        initial_state=x0,
        sample_period=delta_t,
        dt=dt,
    )


def perturb_parameters(P_tg, epsilon: float, seed: int) -> np.ndarray:
    """Componentwise P_tg * (1 + theta), theta ~ U[-epsilon, epsilon], seeded."""
    if epsilon < 0.0:
        raise ValueError("epsilon must be >= 0")
    base = np.asarray(P_tg, dtype=float)
    theta = np.random.default_rng(seed).uniform(-epsilon, epsilon, size=base.shape)
    return base * (1.0 + theta)


def _last_finite_residual(stages: Sequence[StageResult]) -> float:
    for st in reversed(stages):
        if math.isfinite(st.rel_residual):
            return st.rel_residual
        for ph in reversed(st.phases):
            if math.isfinite(ph.rel_residual):
                return ph.rel_residual
    return math.nan


def _run_one_trial(args) -> TrialRecord:
    obs, tg_free, epsilon, seed, cfg = args
    P0 = perturb_parameters(tg_free, epsilon, seed)
    theta = P0 / tg_free - 1.0
    start = time.perf_counter()
    P_num, stages = staged_identify(P0, obs, cfg)
    wall = time.perf_counter() - start
    failed = any(st.failed for st in stages)
    err = float(np.max(np.abs(P_num - tg_free)) / np.max(np.abs(tg_free)))
    return TrialRecord(
        seed=seed,
        epsilon=epsilon,
        theta=theta,
        success=not failed,
        rel_residual=_last_finite_residual(stages),
        max_rel_error=err,
        wall_time=wall,
    )


def run_trials(
    P_tg: ParameterSet,
    epsilon: float,
    n_trials: int,
    delta_t: float = 1.0,
    base_seed: int = 0,
    T: float = 50.0,
    dt: float = DEFAULT_DT,
    cfg: Optional[IdentificationConfig] = None,
    X0=None,
    workers: int = 1,
) -> list[TrialRecord]:
    """n_trials independent seeded identification attempts.

    Trial i uses seed base_seed + i; records come back in trial-index order
    regardless of execution order (workers > 1 runs trials in parallel
    processes). Failures are data, not errors.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    obs = generate_target(P_tg, X0=X0, T=T, delta_t=delta_t, dt=dt)
    if cfg is None:
        cfg = IdentificationConfig(T_final=T)
    tg_free = P_tg.free_vector()
    jobs = [(obs, tg_free, epsilon, base_seed + i, cfg) for i in range(n_trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_one_trial, jobs))
    return [_run_one_trial(job) for job in jobs]


def summarize(records: Sequence[TrialRecord],
              sampling_period: float = math.nan) -> TrialStatistics:
    """Success rate, mean residual and mean max error of one batch.

    The mean residual averages every trial that produced a finite residual
    (failed trials contribute their last finite value; trials with none are
    excluded and counted in n_residual_excluded). The mean max error
    averages successful trials only. sampling_period is carried through as
    batch metadata for the statistics CSV.
    """
    if len(records) == 0:
        raise EmptyInput("no trial records")
    n = len(records)
    n_success = sum(r.success for r in records)
    residuals = [r.rel_residual for r in records if math.isfinite(r.rel_residual)]
    errors = [r.max_rel_error for r in records if r.success]
    return TrialStatistics(
        epsilon=records[0].epsilon,
        sampling_period=sampling_period,
        n_trials=n,
        success_rate_pct=100.0 * n_success / n,
        mean_residual=float(np.mean(residuals)) if residuals else math.nan,
        mean_max_error_pct=100.0 * float(np.mean(errors)) if errors else math.nan,
        base_seed=records[0].seed,
        n_residual_excluded=n - len(residuals),
    )


def write_statistics_csv(stats: Sequence[TrialStatistics], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([
            "epsilon", "sampling_period", "n_trials", "success_rate_pct",
            "mean_residual", "mean_max_error_pct", "base_seed",
        ])
        for s in stats:
            w.writerow([
                f"{s.epsilon:.17g}", f"{s.sampling_period:.17g}", s.n_trials,
                f"{s.success_rate_pct:.17g}", f"{s.mean_residual:.17g}",
                f"{s.mean_max_error_pct:.17g}", s.base_seed,
            ])


def write_trials_csv(records: Sequence[TrialRecord], path) -> None:
    theta_cols = [f"theta_{n}" for n in FREE_PARAMETER_NAMES]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "epsilon", "success", "rel_residual",
                    "max_rel_error", "wall_time"] + theta_cols)
        for r in records:
            w.writerow(
                [r.seed, f"{r.epsilon:.17g}", str(r.success).lower(),
                 f"{r.rel_residual:.17g}", f"{r.max_rel_error:.17g}",
                 f"{r.wall_time:.6g}"]
                + [f"{v:.17g}" for v in r.theta]
            )
