"""Parameter identification from sampled chemostat observations.

The cost is the plain sum of squared residuals between the model solution
and the target samples over all six components and all sample instants.
Its Jacobian comes from the forward sensitivities, which gives both the
gradient 2 J^T r and the Gauss-Newton normal equations J^T J delta = -J^T r.

Three optimizers are combined by the staged driver: a couple of plain
gradient steps with a golden-section line search, a safeguarded
Gauss-Newton whose increment is treated as a descent direction (step
backtracked past any integration blow-up, then golden-section minimized),
and plain Gauss-Newton. Identification runs on a growing time window:
first [0, T_half], then one sampling day more at a time up to the full
horizon, each window warm-started from the previous one, and finishes
with a tight-tolerance Gauss-Newton on the full window.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .model import FREE_PARAMETER_NAMES, N_FREE, N_STATE, ParameterSet
from .solver import (
    DEFAULT_BLOWUP_THRESHOLD,
    DEFAULT_DT,
    BlowUp,
    IntegrationConfig,
    integrate,
    integrate_with_sensitivity,
)

_POSITIVE_FLOOR = 1e-12  # fraction of the current iterate used for projection


class SingularNormalMatrix(RuntimeError):
    """The Gauss-Newton normal matrix could not be factorized."""


@dataclass(frozen=True)
class ObservationSet:
    """Sampled target trajectory plus everything needed to replay it.

    times must be (1..m) * sample_period; states holds the target samples
    in canonical component order. a, N_in, C_in and alpha are problem data
    (not identified); initial_state is the shared initial condition of
    every trial integration. weights is an optional per-component residual
    weighting hook (defaults to 1 for every component).
    """

    times: np.ndarray
    states: np.ndarray
    a: float
    N_in: float
    C_in: float
    alpha: float
    initial_state: np.ndarray
    sample_period: float
    dt: float = DEFAULT_DT
    blowup_threshold: float = DEFAULT_BLOWUP_THRESHOLD
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        m = len(self.times)
        if m < 1:
            raise ValueError("need at least one observation sample")
        if self.states.shape != (m, N_STATE):
            raise ValueError(f"states must have shape ({m}, {N_STATE})")
        expected = (1.0 + np.arange(m)) * self.sample_period
        if np.max(np.abs(self.times - expected)) > 1e-9 * self.sample_period:
            raise ValueError("times must equal (1..m) * sample_period")

    @cached_property
    def effective_weights(self) -> np.ndarray:
        if self.weights is None:
            return np.ones(N_STATE)
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (N_STATE,):
            raise ValueError("weights must have shape (6,)")
        return w

    @cached_property
    def target_norm(self) -> float:
        """|X^tg|_2 over all samples and components (weighted if weights set)."""
        return float(np.linalg.norm(self.states * self.effective_weights))

    @property
    def n_samples(self) -> int:
        return len(self.times)

    def parameter_set(self, free) -> ParameterSet:
        """Assemble a full ParameterSet from an 11-vector of free parameters."""
        free = np.asarray(free, dtype=float)
        kw = dict(zip(FREE_PARAMETER_NAMES, free))
        return ParameterSet(a=self.a, N_in=self.N_in, C_in=self.C_in, alpha=self.alpha, **kw)

    def restrict(self, t_max: float) -> "ObservationSet":
        """Observations truncated to sample times <= t_max."""
        keep = self.times <= t_max + 1e-9 * self.sample_period
        if not np.any(keep):
            raise ValueError(f"no samples at or before t = {t_max}")
        return replace(self, times=self.times[keep], states=self.states[keep])

    def evaluate(self, P, with_jacobian: bool = False) -> "CostEvaluation":
        """Cost (and optionally residual Jacobian) of free parameters P."""
        P = np.asarray(P, dtype=float)
        if P.shape != (N_FREE,):
            raise ValueError(f"expected {N_FREE} free parameters, got shape {P.shape}")
        if np.any(P <= 0.0) or not np.all(np.isfinite(P)):
            raise ValueError("free parameters must be finite and strictly positive")
        params = self.parameter_set(P)
        cfg = IntegrationConfig(
            t_end=float(self.times[-1]),
            dt=self.dt,
            sample_period=self.sample_period,
            blowup_threshold=self.blowup_threshold,
        )
        run = integrate_with_sensitivity if with_jacobian else integrate
        traj = run(self.initial_state, params, cfg)
        w = self.effective_weights
        diff = (traj.states - self.states) * w
        residual = diff.ravel()  # sample-major, component-minor
        cost = float(residual @ residual)
        jac = None
        if with_jacobian:
            jac = (traj.sensitivities * w[None, :, None]).reshape(-1, N_FREE)
        return CostEvaluation(
            residual=residual,
            cost=cost,
            rel_residual=math.sqrt(cost) / self.target_norm,
            jacobian=jac,
        )


@dataclass(frozen=True)
class CostEvaluation:
    """Residual vector, squared-sum cost and optional residual Jacobian."""

    residual: np.ndarray
    cost: float
    rel_residual: float
    jacobian: Optional[np.ndarray] = None

    @property
    def gradient(self) -> np.ndarray:
        """Cost gradient 2 J^T r (requires the Jacobian)."""
        if self.jacobian is None:
            raise ValueError("evaluation was made without the Jacobian")
        return 2.0 * (self.jacobian.T @ self.residual)


@dataclass(frozen=True)
class IdentificationConfig:
    """Tolerances, caps and window layout of the staged identification."""

    T_half: float = 20.0
    window_step: float = 1.0
    T_final: float = 50.0
    gradient_pre_steps: int = 2
    mgn_max_iter: int = 50
    mgn_tol: float = 1e-4
    gn_max_iter: int = 50
    gn_tol: float = 1e-4
    final_gn_max_iter: int = 50
    final_gn_tol: float = 1e-10
    golden_rel_tol: float = 1e-3
    backtrack_max_halvings: int = 30
    bracket_h0: float = 1e-6
    bracket_max_doublings: int = 60

    def __post_init__(self):
        for name in ("mgn_tol", "gn_tol", "final_gn_tol", "golden_rel_tol", "bracket_h0"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if not self.T_half < self.T_final:
            raise ValueError("T_half must be smaller than T_final")
        if self.window_step <= 0.0:
            raise ValueError("window_step must be positive")

    def window_ends(self) -> list[float]:
        ends = []
        t = self.T_half
        while t < self.T_final - 1e-9:
            ends.append(t)
            t += self.window_step
        ends.append(self.T_final)
        return ends


@dataclass(frozen=True)
class PhaseResult:
    """Outcome of one optimizer phase on one window."""

    phase: str
    iterations: int
    rel_residual: float
    params: np.ndarray
    failed: bool = False
    cause: str = ""


@dataclass(frozen=True)
class StageResult:
    """Outcome of one time window of the staged identification."""

    window_end: float
    phases: tuple[PhaseResult, ...]
    params: np.ndarray
    rel_residual: float
    failed: bool
    cause: str = ""


# ---------------------------------------------------------------------------
# cost / step primitives
# ---------------------------------------------------------------------------

def evaluate_cost(P, obs: ObservationSet, with_jacobian: bool = False) -> CostEvaluation:
    """Residuals of P against the observations; integration blow-ups propagate."""
    return obs.evaluate(P, with_jacobian)


def stopping_criterion(ev: CostEvaluation, tol: float) -> bool:
    """True iff sqrt(cost) / |X^tg|_2 <= tol (inclusive)."""
    return ev.rel_residual <= tol


def gauss_newton_step(ev: CostEvaluation) -> np.ndarray:
    """Solve the normal equations J^T J delta = -J^T r.

    The (exactly symmetric) normal matrix is Jacobi-equilibrated and
    factorized by Cholesky. A parameter whose J column is identically zero
    does not influence the cost at all (this happens structurally, e.g.
    when a quota minimum never binds along the trajectory); the normal
    equations are then rank-deficient but consistent, and the minimum-norm
    solution keeps that increment at zero, so the solve is restricted to
    the active columns. Raises SingularNormalMatrix when the active block
    cannot be factorized.
    """
    if ev.jacobian is None:
        raise ValueError("evaluation was made without the Jacobian")
    J = ev.jacobian
    jtj = J.T @ J
    n = jtj.shape[0]
    i_up = np.triu_indices(n, k=1)
    jtj[(i_up[1], i_up[0])] = jtj[i_up]  # mirror: exact symmetry by construction
    g = J.T @ ev.residual
    d = np.diag(jtj).copy()
    if np.any(d < 0.0) or not np.all(np.isfinite(d)):
        raise SingularNormalMatrix("negative or non-finite normal-matrix diagonal")
    active = d > 0.0
    if not np.any(active):
        raise SingularNormalMatrix("all parameter columns vanish")
    scale = 1.0 / np.sqrt(d[active])
    eq = jtj[np.ix_(active, active)] * scale[:, None] * scale[None, :]
    try:
        factor = cho_factor(eq, lower=False)
    except LinAlgError as exc:
        raise SingularNormalMatrix(str(exc)) from exc
    y = cho_solve(factor, -(g[active] * scale))
    delta = np.zeros(n)
    delta[active] = y * scale
    if not np.all(np.isfinite(delta)):
        raise SingularNormalMatrix("non-finite Gauss-Newton increment")
    return delta


def golden_section(f, lo: float, hi: float, rel_tol: float, seed=None):
    """Golden-section minimization of f on [lo, hi].

    Stops when the bracket shrinks below rel_tol times its initial width
    and returns the best probed point as (x, f(x)); an optional seed
    (x, f(x)) pair joins the comparison. f may return inf for failed
    evaluations.
    """
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = float(lo), float(hi)
    width0 = b - a
    if width0 <= 0.0:
        raise ValueError("need lo < hi")
    best_x, best_f = seed if seed is not None else (math.nan, math.inf)
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for x, fx in ((c, fc), (d, fd)):
        if fx < best_f:
            best_x, best_f = x, fx
    while (b - a) > rel_tol * width0:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
            if fc < best_f:
                best_x, best_f = c, fc
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
            if fd < best_f:
                best_x, best_f = d, fd
    return best_x, best_f


def _project_positive(trial: np.ndarray, current: np.ndarray) -> np.ndarray:
    # non-positive trial components are pinned to a tiny fraction of the
    # (strictly positive) current iterate, which sets their scale; the
    # absolute clamp stops repeated flooring from underflowing to 0
    floor = np.maximum(_POSITIVE_FLOOR * np.abs(current), 1e-300)
    return np.where(trial > 0.0, trial, floor)


def _cost_or_inf(P, obs: ObservationSet) -> float:
    # non-finite trial parameters (overflowing line-search steps) count as
    # failed evaluations, same as an integration blow-up
    if not np.all(np.isfinite(P)):
        return math.inf
    try:
        return evaluate_cost(P, obs, with_jacobian=False).cost
    except BlowUp:
        return math.inf


# ---------------------------------------------------------------------------
# optimizer phases
# ---------------------------------------------------------------------------

def modified_gauss_newton(
    P0,
    obs: ObservationSet,
    cfg: Optional[IdentificationConfig] = None,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
) -> PhaseResult:
    """Safeguarded Gauss-Newton: the increment is a descent direction.

    Each iteration backtracks the step h over {1, 1/2, 1/4, ...} until the
    trial cost evaluates without blow-up, then golden-section minimizes
    h -> cost(P + h delta) over (0, h_safe]. Stops on the relative-residual
    tolerance, the iteration cap, or a stall (no cost-improving step, which
    for this deterministic iteration is a fixed point). Hard failures:
    entry blow-up, every backtracking step blowing up, or a singular
    normal matrix.
    """
    cfg = cfg or IdentificationConfig()
    tol = cfg.mgn_tol if tol is None else tol
    max_iter = cfg.mgn_max_iter if max_iter is None else max_iter
    phase = "modified_gn"
    P = np.asarray(P0, dtype=float).copy()

    try:
        ev0 = evaluate_cost(P, obs, with_jacobian=False)
    except BlowUp:
        return PhaseResult(phase, 0, math.nan, P, failed=True, cause="blow-up")
    if stopping_criterion(ev0, tol):
        return PhaseResult(phase, 0, ev0.rel_residual, P, failed=False)

    rel = ev0.rel_residual
    for it in range(max_iter):
        try:
            ev = evaluate_cost(P, obs, with_jacobian=True)
        except BlowUp:
            return PhaseResult(phase, it, rel, P, failed=True, cause="blow-up")
        rel = ev.rel_residual
        if stopping_criterion(ev, tol):
            return PhaseResult(phase, it, rel, P, failed=False)
        try:
            delta = gauss_newton_step(ev)
        except SingularNormalMatrix:
            return PhaseResult(phase, it, rel, P, failed=True, cause="singular_normal_matrix")

        h = 1.0
        h_safe = None
        f_safe = math.inf
        for _ in range(cfg.backtrack_max_halvings + 1):
            f = _cost_or_inf(_project_positive(P + h * delta, P), obs)
            if math.isfinite(f):
                h_safe, f_safe = h, f
                break
            h *= 0.5
        if h_safe is None:
            return PhaseResult(phase, it + 1, rel, P, failed=True, cause="blow-up")

        h_best, f_best = golden_section(
            lambda hh: _cost_or_inf(_project_positive(P + hh * delta, P), obs),
            0.0,
            h_safe,
            cfg.golden_rel_tol,
            seed=(h_safe, f_safe),
        )
        if not f_best < ev.cost:
            # fixed point: the same step would be recomputed forever
            return PhaseResult(phase, it + 1, rel, P, failed=False, cause="stalled")
        P = _project_positive(P + h_best * delta, P)
        rel = math.sqrt(f_best) / obs.target_norm

    return PhaseResult(phase, max_iter, rel, P, failed=False, cause="iteration_cap")


def _gradient_phase(
    P0,
    obs: ObservationSet,
    n_steps: int,
    cfg: IdentificationConfig,
    skip_tol: Optional[float] = None,
) -> PhaseResult:
    phase = "gradient"
    P = np.asarray(P0, dtype=float).copy()

    try:
        ev0 = evaluate_cost(P, obs, with_jacobian=False)
    except BlowUp:
        # unusable start: hand it back unchanged, the next phase decides
        return PhaseResult(phase, 0, math.nan, P, failed=False, cause="blow-up")
    rel = ev0.rel_residual
    if skip_tol is not None and rel <= skip_tol:
        return PhaseResult(phase, 0, rel, P, failed=False)

    steps = 0
    for _ in range(n_steps):
        try:
            ev = evaluate_cost(P, obs, with_jacobian=True)
        except BlowUp:
            break
        rel = ev.rel_residual
        g = ev.gradient
        if not np.any(g):
            break
        f0 = ev.cost
        direction = -g

        # bracket by doubling until the cost stops decreasing or blows up
        best_h, best_f = 0.0, f0
        h = cfg.bracket_h0
        f_prev = f0
        h_up = h
        for _ in range(cfg.bracket_max_doublings):
            f = _cost_or_inf(_project_positive(P + h * direction, P), obs)
            h_up = h
            if f < best_f:
                best_h, best_f = h, f
            if not f < f_prev:
                break
            f_prev = f
            h *= 2.0
        gh, gf = golden_section(
            lambda hh: _cost_or_inf(_project_positive(P + hh * direction, P), obs),
            0.0,
            h_up,
            cfg.golden_rel_tol,
            seed=(best_h, best_f) if best_h > 0.0 else None,
        )
        if gf < best_f:
            best_h, best_f = gh, gf
        if not (best_h > 0.0 and best_f < f0):
            break  # the search found no descent: keep P
        P = _project_positive(P + best_h * direction, P)
        rel = math.sqrt(best_f) / obs.target_norm
        steps += 1

    return PhaseResult(phase, steps, rel, P, failed=False)


def gradient_descent_steps(P0, obs: ObservationSet, n_steps: int,
                           cfg: Optional[IdentificationConfig] = None) -> np.ndarray:
    """n_steps of steepest descent with a golden-section line search.

    The cost never increases across accepted steps; returns P0 unchanged
    if the first evaluation blows up.
    """
    return _gradient_phase(P0, obs, n_steps, cfg or IdentificationConfig()).params


def _gauss_newton_phase(
    P0, obs: ObservationSet, tol: float, max_iter: int, phase: str
) -> PhaseResult:
    # plain Gauss-Newton; a blow-up aborts the phase carrying the last
    # parameters that evaluated finitely
    P = np.asarray(P0, dtype=float).copy()
    try:
        ev0 = evaluate_cost(P, obs, with_jacobian=False)
    except BlowUp:
        return PhaseResult(phase, 0, math.nan, P, failed=False, cause="blow-up")
    rel = ev0.rel_residual
    if stopping_criterion(ev0, tol):
        return PhaseResult(phase, 0, rel, P, failed=False)
    good_P, good_rel = P.copy(), rel

    its = 0
    cause = ""
    while its < max_iter:
        try:
            ev = evaluate_cost(P, obs, with_jacobian=True)
        except BlowUp:
            P, rel = good_P, good_rel
            cause = "blow-up"
            break
        good_P, good_rel = P.copy(), ev.rel_residual
        rel = ev.rel_residual
        if stopping_criterion(ev, tol):
            break
        try:
            delta = gauss_newton_step(ev)
        except SingularNormalMatrix:
            cause = "singular_normal_matrix"
            break
        P = _project_positive(P + delta, P)
        its += 1
    else:
        # cap reached with the last step not yet evaluated
        f = _cost_or_inf(P, obs)
        if math.isinf(f):
            P, rel = good_P, good_rel
            cause = "blow-up"
        else:
            rel = math.sqrt(f) / obs.target_norm
            cause = "iteration_cap"
    return PhaseResult(phase, its, rel, P, failed=False, cause=cause)


def gauss_newton(P0, obs: ObservationSet, tol: float = 1e-4, max_iter: int = 50) -> PhaseResult:
    """Plain Gauss-Newton iteration P <- P + delta down to a relative tolerance."""
    return _gauss_newton_phase(P0, obs, tol, max_iter, "gauss_newton")


# ---------------------------------------------------------------------------
# staged driver
# ---------------------------------------------------------------------------

def staged_identify(
    P0,
    obs_full: ObservationSet,
    cfg: Optional[IdentificationConfig] = None,
) -> tuple[np.ndarray, list[StageResult]]:
    """Growing-window identification with a tight final Gauss-Newton.

    For each window end in {T_half, T_half + step, ..., T_final}: restrict
    the observations, run the gradient pre-steps, the safeguarded
    Gauss-Newton and plain Gauss-Newton, carrying the parameters into the
    next window. After the last window, plain Gauss-Newton with the tight
    tolerance runs on the full window. A hard failure of the safeguarded
    Gauss-Newton (blow-up at every trial step, entry blow-up, singular
    normal matrix) aborts the march; the partial stage log is returned
    either way.
    """
    cfg = cfg or IdentificationConfig()
    if obs_full.times[-1] < cfg.T_final - 1e-9:
        raise ValueError("observations do not cover the final window")
    P = np.asarray(P0, dtype=float).copy()
    stages: list[StageResult] = []

    for t_w in cfg.window_ends():
        obs_w = obs_full.restrict(t_w)
        grad = _gradient_phase(P, obs_w, cfg.gradient_pre_steps, cfg, skip_tol=cfg.mgn_tol)
        P = grad.params
        mgn = modified_gauss_newton(P, obs_w, cfg)
        P = mgn.params
        if mgn.failed:
            stages.append(
                StageResult(t_w, (grad, mgn), P, mgn.rel_residual, failed=True, cause=mgn.cause)
            )
            return P, stages
        gn = _gauss_newton_phase(P, obs_w, cfg.gn_tol, cfg.gn_max_iter, "gauss_newton")
        P = gn.params
        stages.append(
            StageResult(t_w, (grad, mgn, gn), P, gn.rel_residual, failed=False)
        )

    final = _gauss_newton_phase(
        P, obs_full, cfg.final_gn_tol, cfg.final_gn_max_iter, "final_gn"
    )
    P = final.params
    stages.append(
        StageResult(cfg.T_final, (final,), P, final.rel_residual, failed=False)
    )
    return P, stages


def write_stage_log(stages, path) -> None:
    """Per-phase identification log as CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["window_end", "phase", "iterations", "rel_residual", "failed", "cause"])
        for st in stages:
            for ph in st.phases:
                w.writerow([
                    f"{st.window_end:.17g}",
                    ph.phase,
                    ph.iterations,
                    f"{ph.rel_residual:.17g}",
                    str(ph.failed).lower(),
                    ph.cause,
                ])
