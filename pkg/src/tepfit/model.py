"""Six-variable chemostat model of diatom growth and TEP release.

State vector, canonical component order::

    index  name  description                     unit
    0      N     dissolved nitrogen              umol/L
    1      C     dissolved inorganic carbon      umol/L
    2      Q_N   cellular nitrogen quota         1e-9 umol/cell
    3      Q_C   cellular carbon quota           1e-9 umol/cell
    4      D     diatom concentration            1e9 cell/L
    5      M     TEP concentration               g Xeq/L

Unit coherence: the 1e-9 per-cell and 1e9 cell/L scale factors cancel in
every product rate*D, so all arithmetic is done directly on the numeric
values above and no internal rescaling takes place anywhere.

The right-hand side is evaluated on the positive part of the state
(clip-then-evaluate). For non-negative initial conditions the clipped
flow coincides with the unclipped one and trajectories stay non-negative;
for signed intermediate values (RK4 stage overshoot) it keeps every rate
well defined.

Cell division and consumption are gated by a common limiter built from
Droop/Liebig terms of the form 1 - u+/max(u+, v+) with the convention
0/0 = 0; see :func:`limiter_A`.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterable

import numpy as np
from numba import njit

STATE_NAMES = ("N", "C", "Q_N", "Q_C", "D", "M")
N_STATE = 6

# indices into the internal 15-parameter array; must match ParameterSet
# field order (guarded by a unit test)
_A = 0
_N_IN = 1
_C_IN = 2
_V_MAX_N = 3
_V_MAX_C = 4
_K_N = 5
_K_C = 6
_M_D = 7
_Q_MIN_N = 8
_Q_MIN_C = 9
_MU_D = 10
_MU_M = 11
_THETA_D = 12
_THETA_M = 13
_ALPHA = 14


class ParameterFileError(ValueError):
    """Raised for malformed, incomplete or unknown-key parameter files."""


@dataclass(frozen=True)
class ParameterSet:
    """The 15 constant model parameters.

    a, N_in, C_in and alpha are chemostat data; the remaining 11 are the
    free parameters of the identification problem (see FREE_PARAMETER_NAMES
    for their canonical order).
    """

    a: float          # dilution rate [1/day]
    N_in: float       # inlet nitrogen [umol/L]
    C_in: float       # inlet carbon [umol/L]
    V_max_N: float    # max N uptake rate [1e-9 umol/cell/day]
    V_max_C: float    # max C uptake rate [1e-9 umol/cell/day]
    K_N: float        # N uptake half saturation [umol/L]
    K_C: float        # C uptake half saturation [umol/L]
    m_D: float        # diatom mortality rate [1/day]
    Q_min_N: float    # minimal N quota [1e-9 umol/cell]
    Q_min_C: float    # minimal C quota [1e-9 umol/cell]
    mu_D: float       # max diatom growth rate [1/day]
    mu_M: float       # max TEP production rate [1e-9 g Xeq/cell/day]
    Theta_D: float    # max N consumption for growth [1e-9 umol/cell/day]
    Theta_M: float    # max C consumption for TEP [1e-9 umol/cell/day]
    alpha: float      # C:N stoichiometric ratio [-]

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v):
                raise ValueError(f"parameter {f.name} is not finite: {v!r}")
            if f.name == "m_D":
                if v < 0.0:
                    raise ValueError(f"m_D must be >= 0, got {v!r}")
            elif v <= 0.0:
                raise ValueError(f"parameter {f.name} must be > 0, got {v!r}")

    def as_array(self) -> np.ndarray:
        """All 15 parameters as a float array in field order."""
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=float)

    def free_vector(self) -> np.ndarray:
        """The 11 free parameters in canonical FREE_PARAMETER_NAMES order."""
        return np.array([getattr(self, n) for n in FREE_PARAMETER_NAMES], dtype=float)

    def with_free(self, free: Iterable[float]) -> "ParameterSet":
        """New ParameterSet with the free parameters replaced."""
        free = np.asarray(tuple(free), dtype=float)
        if free.shape != (N_FREE,):
            raise ValueError(f"expected {N_FREE} free parameters, got shape {free.shape}")
        kw = {n: getattr(self, n) for n in FIXED_PARAMETER_NAMES}
        kw.update({n: float(v) for n, v in zip(FREE_PARAMETER_NAMES, free)})
        return ParameterSet(**kw)


PARAMETER_NAMES = tuple(f.name for f in fields(ParameterSet))

# canonical order of the 11 identified parameters; a, N_in, C_in, alpha are
# problem data and stay fixed
FREE_PARAMETER_NAMES = (
    "V_max_N", "K_N", "V_max_C", "K_C", "m_D",
    "Q_min_N", "Q_min_C", "mu_D", "mu_M", "Theta_D", "Theta_M",
)
FIXED_PARAMETER_NAMES = ("a", "N_in", "C_in", "alpha")
N_FREE = len(FREE_PARAMETER_NAMES)

# free-parameter slot -> index in the internal 15-array
FREE_PARAMETER_SLOTS = np.array(
    [PARAMETER_NAMES.index(n) for n in FREE_PARAMETER_NAMES], dtype=np.int64
)

# reference values of the desk-scale target problem
TARGET_PARAMETERS = ParameterSet(
    a=0.59,
    N_in=15.0,
    C_in=2000.0,
    V_max_N=70.0,
    V_max_C=400.0,
    K_N=1.25,
    K_C=1.5,
    m_D=0.1,
    Q_min_N=10.0,
    Q_min_C=0.5,
    mu_D=1.24,
    mu_M=8.2,
    Theta_D=4.5,
    Theta_M=1000.0,
    alpha=16.0,
)


# ---------------------------------------------------------------------------
# rate kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _limiter(a, b, c, d):
    # min(1 - a+/max(a+,b+), 1 - c+/max(c+,d+)), each quotient 0 when 0/0
    ap = a if a > 0.0 else 0.0
    bp = b if b > 0.0 else 0.0
    cp = c if c > 0.0 else 0.0
    dp = d if d > 0.0 else 0.0
    m1 = ap if ap > bp else bp
    q1 = 0.0 if m1 == 0.0 else ap / m1
    m2 = cp if cp > dp else dp
    q2 = 0.0 if m2 == 0.0 else cp / m2
    t1 = 1.0 - q1
    t2 = 1.0 - q2
    return t1 if t1 < t2 else t2


@njit(cache=True)
def _limiter_term_grad(u, v):
    # value and partials of g(u, v) = 1 - u+/max(u+, v+).
    # branch selection: d(x+)/dx = 0 at x = 0; at u+ = v+ ties the v branch
    # (max = v+) is used, which matches the forward-in-time branch when a
    # quota sits exactly on its minimum and is about to rise.
    up = u if u > 0.0 else 0.0
    vp = v if v > 0.0 else 0.0
    if up == 0.0 and vp == 0.0:
        return 1.0, 0.0, 0.0
    if up > vp:
        return 0.0, 0.0, 0.0
    g = 1.0 - up / vp
    du = -1.0 / vp if u > 0.0 else 0.0
    dv = up / (vp * vp) if v > 0.0 else 0.0
    return g, du, dv


@njit(cache=True)
def _limiter_grad(a, b, c, d):
    # value and 4 partials of the limiter. At a tie with value 0 (e.g. the
    # canonical start, both quotas on their minima) the limiter is
    # identically 0 in a neighborhood: each vanishing term pins the min
    # while the other one varies, so every partial is 0. A tie at positive
    # value is a transversal crossing; the second term's branch is kept
    # there to make the selection deterministic.
    g1, da, db = _limiter_term_grad(a, b)
    g2, dc, dd = _limiter_term_grad(c, d)
    if g1 < g2:
        return g1, da, db, 0.0, 0.0
    if g1 == g2 and g1 == 0.0:
        return 0.0, 0.0, 0.0, 0.0, 0.0
    return g2, 0.0, 0.0, dc, dd


@njit(cache=True)
def _rhs_into(t, x, p, out):
    # F(t, x+) of the clipped system; x may be signed
    N = x[0] if x[0] > 0.0 else 0.0
    C = x[1] if x[1] > 0.0 else 0.0
    QN = x[2] if x[2] > 0.0 else 0.0
    QC = x[3] if x[3] > 0.0 else 0.0
    D = x[4] if x[4] > 0.0 else 0.0
    M = x[5] if x[5] > 0.0 else 0.0

    tau_N = p[_V_MAX_N] * N / (p[_K_N] + N)
    tau_C = p[_V_MAX_C] * C / (p[_K_C] + C)
    a_d = _limiter(p[_Q_MIN_C], QC, p[_Q_MIN_N], QN)
    a_m = _limiter(p[_Q_MIN_C], QC, p[_ALPHA] * QN, QC)
    tau_D = p[_MU_D] * a_d
    tau_M = p[_MU_M] * a_m
    sigma_N = p[_THETA_D] * a_d
    sigma_M = p[_THETA_M] * a_m

    out[0] = p[_A] * (p[_N_IN] - N) - tau_N * D
    out[1] = p[_A] * (p[_C_IN] - C) - tau_C * D
    out[2] = tau_N - sigma_N - tau_D * QN
    out[3] = tau_C - p[_ALPHA] * sigma_N - sigma_M - tau_D * QC
    out[4] = (tau_D - p[_A] - p[_M_D]) * D
    out[5] = tau_M * D - p[_A] * M


@njit(cache=True)
def _jacobians_into(t, x, p, jx, jp):
    # piecewise-analytic d F(t, x+)/dx (6x6, into jx) and dF/dP for the 11
    # free parameters (6x11, into jp). Computed at y = x+, then each state
    # column is masked by d(x+)/dx.
    mN = 1.0 if x[0] > 0.0 else 0.0
    mC = 1.0 if x[1] > 0.0 else 0.0
    mQN = 1.0 if x[2] > 0.0 else 0.0
    mQC = 1.0 if x[3] > 0.0 else 0.0
    mD = 1.0 if x[4] > 0.0 else 0.0
    mM = 1.0 if x[5] > 0.0 else 0.0

    N = x[0] * mN
    C = x[1] * mC
    QN = x[2] * mQN
    QC = x[3] * mQC
    D = x[4] * mD

    a = p[_A]
    alpha = p[_ALPHA]
    mu_D = p[_MU_D]
    mu_M = p[_MU_M]
    th_D = p[_THETA_D]
    th_M = p[_THETA_M]

    den_N = p[_K_N] + N
    tau_N = p[_V_MAX_N] * N / den_N
    dtauN_dN = p[_V_MAX_N] * p[_K_N] / (den_N * den_N)
    dtauN_dV = N / den_N
    dtauN_dK = -p[_V_MAX_N] * N / (den_N * den_N)

    den_C = p[_K_C] + C
    tau_C = p[_V_MAX_C] * C / den_C
    dtauC_dC = p[_V_MAX_C] * p[_K_C] / (den_C * den_C)
    dtauC_dV = C / den_C
    dtauC_dK = -p[_V_MAX_C] * C / (den_C * den_C)

    # growth/N-consumption limiter: arguments (Q_min_C, Q_C, Q_min_N, Q_N)
    a_d, dad_qmc, dad_qc, dad_qmn, dad_qn = _limiter_grad(
        p[_Q_MIN_C], QC, p[_Q_MIN_N], QN
    )
    # TEP limiter: arguments (Q_min_C, Q_C, alpha*Q_N, Q_C)
    a_m, dam_qmc, dam_b, dam_c, dam_d = _limiter_grad(
        p[_Q_MIN_C], QC, alpha * QN, QC
    )
    dam_qc = dam_b + dam_d
    dam_qn = dam_c * alpha

    tau_D = mu_D * a_d
    tau_M = mu_M * a_m

    for i in range(6):
        for j in range(6):
            jx[i, j] = 0.0
        for k in range(11):
            jp[i, k] = 0.0

    # row 0: F1 = a(N_in - N) - tau_N D
    jx[0, 0] = (-a - dtauN_dN * D) * mN
    jx[0, 4] = -tau_N * mD
    jp[0, 0] = -dtauN_dV * D            # V_max_N
    jp[0, 1] = -dtauN_dK * D            # K_N

    # row 1: F2 = a(C_in - C) - tau_C D
    jx[1, 1] = (-a - dtauC_dC * D) * mC
    jx[1, 4] = -tau_C * mD
    jp[1, 2] = -dtauC_dV * D            # V_max_C
    jp[1, 3] = -dtauC_dK * D            # K_C

    # row 2: F3 = tau_N - Theta_D A_D - mu_D A_D Q_N
    w3 = th_D + mu_D * QN
    jx[2, 0] = dtauN_dN * mN
    jx[2, 2] = (-w3 * dad_qn - tau_D) * mQN
    jx[2, 3] = -w3 * dad_qc * mQC
    jp[2, 0] = dtauN_dV
    jp[2, 1] = dtauN_dK
    jp[2, 5] = -w3 * dad_qmn            # Q_min_N
    jp[2, 6] = -w3 * dad_qmc            # Q_min_C
    jp[2, 7] = -a_d * QN                # mu_D
    jp[2, 9] = -a_d                     # Theta_D

    # row 3: F4 = tau_C - alpha Theta_D A_D - Theta_M A_M - mu_D A_D Q_C
    w4 = alpha * th_D + mu_D * QC
    jx[3, 1] = dtauC_dC * mC
    jx[3, 2] = (-w4 * dad_qn - th_M * dam_qn) * mQN
    jx[3, 3] = (-w4 * dad_qc - th_M * dam_qc - tau_D) * mQC
    jp[3, 2] = dtauC_dV
    jp[3, 3] = dtauC_dK
    jp[3, 5] = -w4 * dad_qmn
    jp[3, 6] = -w4 * dad_qmc - th_M * dam_qmc
    jp[3, 7] = -a_d * QC
    jp[3, 9] = -alpha * a_d
    jp[3, 10] = -a_m                    # Theta_M

    # row 4: F5 = (mu_D A_D - a - m_D) D
    jx[4, 2] = mu_D * dad_qn * D * mQN
    jx[4, 3] = mu_D * dad_qc * D * mQC
    jx[4, 4] = (tau_D - a - p[_M_D]) * mD
    jp[4, 4] = -D                       # m_D
    jp[4, 5] = mu_D * dad_qmn * D
    jp[4, 6] = mu_D * dad_qmc * D
    jp[4, 7] = a_d * D

    # row 5: F6 = mu_M A_M D - a M
    jx[5, 2] = mu_M * dam_qn * D * mQN
    jx[5, 3] = mu_M * dam_qc * D * mQC
    jx[5, 4] = tau_M * mD
    jx[5, 5] = -a * mM
    jp[5, 6] = mu_M * dam_qmc * D
    jp[5, 8] = a_m * D                  # mu_M


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def limiter_A(a: float, b: float, c: float, d: float) -> float:
    """min(1 - a+/max(a+,b+), 1 - c+/max(c+,d+)) with the 0/0 = 0 convention.

    Defined on all of R^4 and always in [0, 1].
    """
    return float(_limiter(float(a), float(b), float(c), float(d)))


def uptake_rate_N(N: float, P: ParameterSet) -> float:
    """Saturating nitrogen uptake rate V_max_N * N+/(K_N + N+)."""
    Np = max(float(N), 0.0)
    return P.V_max_N * Np / (P.K_N + Np)


def uptake_rate_C(C: float, P: ParameterSet) -> float:
    """Saturating carbon uptake rate V_max_C * C+/(K_C + C+)."""
    Cp = max(float(C), 0.0)
    return P.V_max_C * Cp / (P.K_C + Cp)


def growth_rate(Q_C: float, Q_N: float, P: ParameterSet) -> float:
    """Quota-limited division rate mu_D * A(Q_min_C, Q_C, Q_min_N, Q_N).

    Zero whenever either quota is at or below its minimum; tends to mu_D
    for large quotas.
    """
    return P.mu_D * limiter_A(P.Q_min_C, Q_C, P.Q_min_N, Q_N)


def mucilage_rate(Q_C: float, Q_N: float, P: ParameterSet) -> float:
    """TEP release rate mu_M * A(Q_min_C, Q_C, alpha*Q_N+, Q_C).

    Active only when the carbon quota exceeds both its minimum and
    alpha times the nitrogen quota.
    """
    QNp = max(float(Q_N), 0.0)
    return P.mu_M * limiter_A(P.Q_min_C, Q_C, P.alpha * QNp, Q_C)


def consumption_N(Q_C: float, Q_N: float, P: ParameterSet) -> float:
    """Nitrogen consumption for growth, Theta_D * A(Q_min_C, Q_C, Q_min_N, Q_N)."""
    return P.Theta_D * limiter_A(P.Q_min_C, Q_C, P.Q_min_N, Q_N)


def consumption_M(Q_C: float, Q_N: float, P: ParameterSet) -> float:
    """Carbon consumption for TEP, Theta_M * A(Q_min_C, Q_C, alpha*Q_N+, Q_C)."""
    QNp = max(float(Q_N), 0.0)
    return P.Theta_M * limiter_A(P.Q_min_C, Q_C, P.alpha * QNp, Q_C)


@dataclass(frozen=True)
class RateValues:
    """All model rates evaluated at one (clipped) state."""

    tau_N: float
    tau_C: float
    tau_D: float
    tau_M: float
    sigma_N: float
    sigma_M: float
    sigma_C: float


def rates(X, P: ParameterSet) -> RateValues:
    """Evaluate every rate at the positive part of state X."""
    x = np.asarray(X, dtype=float)
    N, C, Q_N, Q_C = x[0], x[1], x[2], x[3]
    sigma_N = consumption_N(Q_C, Q_N, P)
    sigma_M = consumption_M(Q_C, Q_N, P)
    return RateValues(
        tau_N=uptake_rate_N(N, P),
        tau_C=uptake_rate_C(C, P),
        tau_D=growth_rate(Q_C, Q_N, P),
        tau_M=mucilage_rate(Q_C, Q_N, P),
        sigma_N=sigma_N,
        sigma_M=sigma_M,
        sigma_C=P.alpha * sigma_N + sigma_M,
    )


def rhs(t: float, X, P: ParameterSet) -> np.ndarray:
    """Right-hand side F(t, X+) of the clipped system.

    Raises ValueError on non-finite input (the integrator reports that as
    an evaluation failure).
    """
    x = np.asarray(X, dtype=float)
    if x.shape != (N_STATE,):
        raise ValueError(f"state must have shape (6,), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite state passed to rhs")
    out = np.empty(N_STATE)
    _rhs_into(float(t), x, P.as_array(), out)
    return out


def jac_state(t: float, X, P: ParameterSet) -> np.ndarray:
    """Piecewise-analytic Jacobian of rhs with respect to the state (6x6)."""
    x = np.asarray(X, dtype=float)
    jx = np.empty((N_STATE, N_STATE))
    jp = np.empty((N_STATE, N_FREE))
    _jacobians_into(float(t), x, P.as_array(), jx, jp)
    return jx


def jac_params(t: float, X, P: ParameterSet) -> np.ndarray:
    """Jacobian of rhs with respect to the 11 free parameters (6x11).

    Columns follow FREE_PARAMETER_NAMES.
    """
    x = np.asarray(X, dtype=float)
    jx = np.empty((N_STATE, N_STATE))
    jp = np.empty((N_STATE, N_FREE))
    _jacobians_into(float(t), x, P.as_array(), jx, jp)
    return jp


# ---------------------------------------------------------------------------
# parameter files
# ---------------------------------------------------------------------------

def load_parameters(path) -> ParameterSet:
    """Read a `name = value` parameter file.

    Every ParameterSet field must appear exactly once; unknown keys are an
    error. Blank lines and lines starting with '#' are ignored.
    """
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParameterFileError(f"{path}:{lineno}: expected 'name = value', got {raw!r}")
            name, _, text = line.partition("=")
            name = name.strip()
            if name not in PARAMETER_NAMES:
                raise ParameterFileError(f"{path}:{lineno}: unknown parameter {name!r}")
            if name in values:
                raise ParameterFileError(f"{path}:{lineno}: duplicate parameter {name!r}")
            try:
                values[name] = float(text.strip())
            except ValueError as exc:
                raise ParameterFileError(f"{path}:{lineno}: bad value for {name!r}: {text.strip()!r}") from exc
    missing = [n for n in PARAMETER_NAMES if n not in values]
    if missing:
        raise ParameterFileError(f"{path}: missing parameters: {', '.join(missing)}")
    try:
        return ParameterSet(**values)
    except ValueError as exc:
        raise ParameterFileError(f"{path}: {exc}") from exc


def save_parameters(P: ParameterSet, path) -> None:
    """Write a parameter file that load_parameters reads back exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for name in PARAMETER_NAMES:
            fh.write(f"{name} = {getattr(P, name):.17g}\n")
