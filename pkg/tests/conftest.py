import numpy as np
import pytest

from tepfit import harness, model, solver


@pytest.fixture(scope="session")
def table2() -> model.ParameterSet:
    return model.TARGET_PARAMETERS


@pytest.fixture(scope="session")
def x0_target(table2):
    return harness.default_initial_state(table2)


@pytest.fixture(scope="session")
def target_traj(table2, x0_target) -> solver.Trajectory:
    cfg = solver.IntegrationConfig(t_end=50.0, dt=0.01, sample_period=1.0)
    return solver.integrate(x0_target, table2, cfg)


@pytest.fixture(scope="session")
def target_sens_traj(table2, x0_target) -> solver.Trajectory:
    cfg = solver.IntegrationConfig(t_end=50.0, dt=0.01, sample_period=1.0)
    return solver.integrate_with_sensitivity(x0_target, table2, cfg)


@pytest.fixture(scope="session")
def target_obs(table2):
    return harness.generate_target(table2, T=50.0, delta_t=1.0)


def fd_state_jacobian(t, x, P, rel_step=1e-6):
    """Independent central-difference oracle for the state Jacobian."""
    x = np.asarray(x, dtype=float)
    J = np.zeros((6, 6))
    for j in range(6):
        h = rel_step * max(abs(x[j]), 1.0)
        xp = x.copy()
        xp[j] += h
        xm = x.copy()
        xm[j] -= h
        J[:, j] = (model.rhs(t, xp, P) - model.rhs(t, xm, P)) / (2.0 * h)
    return J


def fd_param_jacobian(t, x, P, rel_step=1e-6):
    """Independent central-difference oracle for the free-parameter Jacobian."""
    free = P.free_vector()
    J = np.zeros((6, model.N_FREE))
    for k in range(model.N_FREE):
        h = rel_step * free[k]
        fp = free.copy()
        fp[k] += h
        fm = free.copy()
        fm[k] -= h
        J[:, k] = (model.rhs(t, x, P.with_free(fp)) - model.rhs(t, x, P.with_free(fm))) / (2.0 * h)
    return J


def fd_sensitivity(x0, P, cfg, sample_index, rel_step=1e-6):
    """Forward sensitivity at one sample via two extra integrations per parameter."""
    free = P.free_vector()
    S = np.zeros((6, model.N_FREE))
    for k in range(model.N_FREE):
        h = rel_step * free[k]
        fp = free.copy()
        fp[k] += h
        fm = free.copy()
        fm[k] -= h
        xp = solver.integrate(x0, P.with_free(fp), cfg).states[sample_index]
        xm = solver.integrate(x0, P.with_free(fm), cfg).states[sample_index]
        S[:, k] = (xp - xm) / (2.0 * h)
    return S
