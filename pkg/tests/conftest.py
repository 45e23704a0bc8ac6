"""Shared fixtures: expensive reference solutions are computed once per
session, and finite-difference helpers are exposed as fixtures."""

import numpy as np
import pytest

from dpopt.oracle import solve_centralized
from dpopt.problems import compute_dual_bound, make_demand_response


def central_diff_jacobian(func, x, out_dim, h=1e-6):
    """Central finite-difference Jacobian of ``func`` at ``x``."""
    x = np.asarray(x, dtype=float)
    jac = np.zeros((out_dim, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        jac[:, j] = (np.asarray(func(x + e)) - np.asarray(func(x - e))) / (2 * h)
    return jac


@pytest.fixture
def fd_jacobian():
    return central_diff_jacobian


@pytest.fixture(scope="session")
def dr_instance():
    """The reference demand-response instance with its dual radius set."""
    inst = make_demand_response(num_agents=5, horizon=4, seed=11)
    radius, _ = compute_dual_bound(inst)
    inst.dual_radius = radius
    return inst


@pytest.fixture(scope="session")
def dr_solution(dr_instance):
    """Centralized saddle point of the reference demand-response instance."""
    from dpopt.oracle import check_optimality

    sol = solve_centralized(dr_instance)
    assert check_optimality(dr_instance, sol.xs, sol.lam, tol=1e-3).ok
    return sol
