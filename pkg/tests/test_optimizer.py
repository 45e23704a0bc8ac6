"""Optimizer engine: step semantics, invariants, runs, and regressions."""

import numpy as np
import pytest

from dpopt.backend import numba_available
from dpopt.errors import ConfigError, StepTooLargeError
from dpopt.optimizer import (
    OptimizerConfig,
    initialize_state,
    optimizer_round,
    perturbation_step,
    primal_dual_step,
    resolve_dual_set,
    resolve_steps,
    run_optimizer,
    tracking_step,
)
from dpopt.oracle import solve_centralized
from dpopt.problems import toy_separable, toy_single
from dpopt.schedules import NoiseSchedule, PowerSchedule
from dpopt.sets import DualBall
from dpopt.topology import metropolis_weights


CHI = PowerSchedule(1.0, 0.9, damping=0.1)
GAMMA = PowerSchedule(0.1, 1.0, damping=0.1)
THETA = PowerSchedule(0.1, 0.96, damping=0.1)
NU = NoiseSchedule(1.0, 0.1, 0.2)


def pair_topology():
    return metropolis_weights(2, [(0, 1)])


def toy_config(**kwargs):
    defaults = dict(horizon=100, chi=CHI, gamma=GAMMA, theta=THETA,
                    noise=NU, seed=0)
    defaults.update(kwargs)
    return OptimizerConfig(**defaults)


def zero_noise_config(**kwargs):
    return toy_config(noise=None, noise_enabled=False, **kwargs)


# ---------------------------------------------------------------------------
# perturbation step


def test_perturbation_fixed_point():
    # At a point with zero primal gradient and zero tracked constraint the
    # perturbed pair reproduces the iterate.
    inst = toy_separable()
    ball = DualBall(radius=1.0, dim=1)
    x = np.array([0.0])
    lam = np.array([0.5])
    y = np.zeros(2)          # aggregate gradient 2*(m*y) vanishes
    z = np.zeros(1)
    # constraint pull is g_mat^T lam = lam, so cancel it via lam = 0
    alpha, beta = perturbation_step(inst, 0, x, np.zeros(1), y, z,
                                    rho1=0.1, rho2=0.1, dual_set=ball)
    assert np.allclose(alpha, x, atol=1e-15)
    assert np.allclose(beta, np.zeros(1), atol=1e-15)
    # nonzero lam moves alpha along the constraint gradient only
    alpha, _ = perturbation_step(inst, 0, x, lam, y, z,
                                 rho1=0.1, rho2=0.1, dual_set=ball)
    assert alpha == pytest.approx(-0.1 * 0.5, abs=1e-15)


def test_perturbation_hand_example_single_agent():
    # f(x)=x, g(x)=x-1, F(s)=s^2 on [-1,1]: at x=1, y=f(x)=1, lam=0 the
    # primal pull is dF(y)=2, so alpha = clip(1 - 0.1*2) = 0.8.
    inst = toy_single()
    ball = DualBall(radius=2.0, dim=1)
    alpha, beta = perturbation_step(
        inst, 0, np.array([1.0]), np.zeros(1), np.array([1.0]),
        np.array([0.0]), rho1=0.1, rho2=0.1, dual_set=ball)
    assert alpha == pytest.approx(0.8, abs=1e-15)
    assert np.allclose(beta, 0.0, atol=1e-15)


def test_perturbation_dual_orthant_clip():
    inst = toy_single()
    ball = DualBall(radius=2.0, dim=1)
    _, beta = perturbation_step(
        inst, 0, np.array([0.0]), np.zeros(1), np.array([0.0]),
        np.array([-1.0]), rho1=0.1, rho2=1.0, dual_set=ball)
    assert beta == pytest.approx(0.0, abs=1e-15)


def test_perturbation_dual_ball_boundary():
    inst = toy_single()
    ball = DualBall(radius=0.5, dim=1)
    _, beta = perturbation_step(
        inst, 0, np.array([0.0]), np.array([0.4]), np.array([0.0]),
        np.array([5.0]), rho1=0.1, rho2=1.0, dual_set=ball)
    assert np.linalg.norm(beta) == pytest.approx(0.5, rel=1e-12)


# ---------------------------------------------------------------------------
# one full round against independent arithmetic


def test_round_matches_hand_arithmetic():
    inst = toy_separable()
    topo = pair_topology()
    W, wd = topo.array, topo.diagonal
    ball = DualBall(radius=5.0, dim=1)
    rho1, rho2 = 0.03, 0.002
    chi_k, gamma_k, theta_k = 0.5, 0.05, 0.1

    xs = [np.array([0.6]), np.array([-0.4])]
    lam = np.array([[0.2], [0.05]])
    y = inst.local_objective_values(xs)
    z = inst.local_constraint_values(xs)
    zero1 = np.zeros((2, 1))
    zero2 = np.zeros((2, 2))

    xs_n, lam_n, y_n, z_n = optimizer_round(
        inst, ball, W, wd, xs, lam, y, z, rho1, rho2,
        chi_k, gamma_k, theta_k, zero1, zero2, zero1)

    # independent evaluation of the documented update formulas
    m = 2
    f_mats = [np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]])]
    g_mats = [np.array([[1.0]]), np.array([[1.0]])]

    def f(i, v):
        return f_mats[i] @ v

    def g(i, v):
        return g_mats[i] @ v - 1.0

    def proj_x(v):
        return np.clip(v, -1.0, 1.0)

    def proj_d(v):
        v = np.maximum(v, 0.0)
        n = np.linalg.norm(v)
        return v if n <= 5.0 else v * (5.0 / n)

    pulls, alphas, betas = [], [], []
    for i in range(m):
        grad_agg = 2.0 * (m * y[i])            # grad of ||s||^2 at m*y_i
        pull = f_mats[i].T @ grad_agg
        pulls.append(pull)
        alphas.append(proj_x(xs[i] - rho1 * (pull + g_mats[i].T @ lam[i])))
        betas.append(proj_d(lam[i] + rho2 * m * z[i]))
    exp_x = [proj_x(xs[i] - gamma_k * (pulls[i] + g_mats[i].T @ betas[i]))
             for i in range(m)]
    mixed_lam = W @ lam
    exp_lam = np.stack([
        proj_d(lam[i] + chi_k * mixed_lam[i] + gamma_k * g(i, alphas[i]))
        for i in range(m)])
    keep = 1.0 - theta_k
    f_new = np.stack([f(i, exp_x[i]) for i in range(m)])
    f_old = np.stack([f(i, xs[i]) for i in range(m)])
    g_new = np.stack([g(i, exp_x[i]) for i in range(m)])
    g_old = np.stack([g(i, xs[i]) for i in range(m)])
    exp_y = keep * y + chi_k * (W @ y) + f_new - keep * f_old
    exp_z = keep * z + chi_k * (W @ z) + g_new - keep * g_old

    for got, want in zip(xs_n, exp_x):
        assert np.allclose(got, want, atol=1e-12)
    assert np.allclose(lam_n, exp_lam, atol=1e-12)
    assert np.allclose(y_n, exp_y, atol=1e-12)
    assert np.allclose(z_n, exp_z, atol=1e-12)


def test_round_is_a_fixed_point_at_the_saddle():
    # x at the optimum, trackers at their values, lam equal across agents at
    # an interior multiplier with zero constraint pull: nothing should move
    # except the known lam ascent along g(x*) (negative here, clipped at 0).
    inst = toy_separable()
    topo = pair_topology()
    ball = DualBall(radius=1.0, dim=1)
    xs = [np.zeros(1), np.zeros(1)]
    lam = np.zeros((2, 1))
    y = inst.local_objective_values(xs)
    z = inst.local_constraint_values(xs)
    xs_n, lam_n, y_n, z_n = optimizer_round(
        inst, ball, topo.array, topo.diagonal, xs, lam, y, z,
        0.03, 0.002, 0.5, 0.05, 0.1,
        np.zeros((2, 1)), np.zeros((2, 2)), np.zeros((2, 1)))
    for got, want in zip(xs_n, xs):
        assert np.allclose(got, want, atol=1e-15)
    assert np.allclose(lam_n, lam, atol=1e-15)   # g(x*) < 0 clips at 0
    assert np.allclose(y_n, y, atol=1e-15)
    assert np.allclose(z_n, z, atol=1e-15)


def test_dual_update_lands_on_ball_boundary_when_pushed():
    inst = toy_separable()
    topo = pair_topology()
    ball = DualBall(radius=0.3, dim=1)
    xs = [np.array([1.0]), np.array([1.0])]   # g_i(x) = 0 at the box edge
    lam = np.full((2, 1), 0.29)
    y = inst.local_objective_values(xs)
    alphas = [np.array([1.0]), np.array([1.0])]
    betas = lam.copy()
    # gamma * g_i(alpha) = 0 here, so push through a fake constraint instead
    _, lam_n = primal_dual_step(
        inst, ball, topo.array, topo.diagonal, xs, lam, y,
        [np.array([5.0]), np.array([5.0])], betas, 0.5, 1.0,
        np.zeros((2, 1)))
    # alpha=5 clips inside local_constraint_values? no: evaluated as given,
    # g(5) = 4, so lam jumps by gamma*4 and must land on the boundary.
    assert np.allclose(np.linalg.norm(lam_n, axis=1), 0.3, rtol=1e-12)


# ---------------------------------------------------------------------------
# tracking identities


def test_tracking_fixed_point():
    inst = toy_separable()
    topo = pair_topology()
    xs = [np.array([0.25]), np.array([0.25])]
    y = inst.local_objective_values(xs)
    z = inst.local_constraint_values(xs)
    # equal trackers across agents mix to zero only if they are equal; here
    # they differ per agent, so use theta=0 and x frozen with equal trackers
    y_eq = np.tile(y.mean(axis=0), (2, 1))
    z_eq = np.tile(z.mean(axis=0), (2, 1))
    y_n, z_n = tracking_step(
        inst, topo.array, topo.diagonal, xs, xs, y_eq, z_eq,
        chi_k=0.5, theta_k=0.0, obj_noise=np.zeros((2, 2)),
        con_noise=np.zeros((2, 1)))
    assert np.allclose(y_n, y_eq, atol=1e-15)
    assert np.allclose(z_n, z_eq, atol=1e-15)


def test_tracking_mean_shift_identity_zero_noise():
    rng = np.random.default_rng(0)
    inst = toy_separable()
    topo = pair_topology()
    xs_old = [rng.uniform(-1, 1, 1) for _ in range(2)]
    xs_new = [rng.uniform(-1, 1, 1) for _ in range(2)]
    y = rng.normal(size=(2, 2))
    z = rng.normal(size=(2, 1))
    theta_k = 0.3
    y_n, z_n = tracking_step(
        inst, topo.array, topo.diagonal, xs_old, xs_new, y, z,
        chi_k=0.6, theta_k=theta_k, obj_noise=np.zeros((2, 2)),
        con_noise=np.zeros((2, 1)))
    f_new = inst.local_objective_values(xs_new)
    f_old = inst.local_objective_values(xs_old)
    g_new = inst.local_constraint_values(xs_new)
    g_old = inst.local_constraint_values(xs_old)
    lhs_y = (y_n - f_new).sum(axis=0)
    rhs_y = (1 - theta_k) * (y - f_old).sum(axis=0)
    assert np.allclose(lhs_y, rhs_y, atol=1e-12)
    lhs_z = (z_n - g_new).sum(axis=0)
    rhs_z = (1 - theta_k) * (z - g_old).sum(axis=0)
    assert np.allclose(lhs_z, rhs_z, atol=1e-12)


def test_tracking_mean_shift_identity_with_noise():
    # With broadcast noise the identity gains exactly the mixed-noise term
    # chi * sum_i [ (W @ xi)_i - w_ii * xi_i ]; reconstruct it from draws.
    rng = np.random.default_rng(1)
    inst = toy_separable()
    topo = pair_topology()
    W, wd = topo.array, topo.diagonal
    xs = [rng.uniform(-1, 1, 1) for _ in range(2)]
    y = rng.normal(size=(2, 2))
    z = rng.normal(size=(2, 1))
    xi = rng.normal(size=(2, 2))
    ups = rng.normal(size=(2, 1))
    chi_k, theta_k = 0.6, 0.3
    y_n, z_n = tracking_step(
        inst, W, wd, xs, xs, y, z, chi_k=chi_k, theta_k=theta_k,
        obj_noise=xi, con_noise=ups)
    f_val = inst.local_objective_values(xs)
    g_val = inst.local_constraint_values(xs)
    noise_y = chi_k * ((W @ xi) - wd[:, None] * xi).sum(axis=0)
    noise_z = chi_k * ((W @ ups) - wd[:, None] * ups).sum(axis=0)
    assert np.allclose((y_n - f_val).sum(axis=0),
                       (1 - theta_k) * (y - f_val).sum(axis=0) + noise_y,
                       atol=1e-12)
    assert np.allclose((z_n - g_val).sum(axis=0),
                       (1 - theta_k) * (z - g_val).sum(axis=0) + noise_z,
                       atol=1e-12)


# ---------------------------------------------------------------------------
# step-size and dual-set resolution


def test_step_caps_enforced():
    inst = toy_separable()
    cfg = zero_noise_config(rho1=10.0)
    with pytest.raises(StepTooLargeError):
        resolve_steps(inst, cfg, dual_radius=1.0)
    ok = zero_noise_config(rho1=10.0, override_certificates=True)
    rho1, _ = resolve_steps(inst, ok, dual_radius=1.0)
    assert rho1 == 10.0


def test_defaults_come_from_instance_constants():
    inst = toy_separable()
    cfg = zero_noise_config()
    rho1, rho2 = resolve_steps(inst, cfg, dual_radius=1.0)
    assert rho1 > 0 and rho2 > 0


def test_nonaffine_instance_needs_explicit_steps():
    from dpopt.accountant import make_adjacent_variant

    base = toy_separable()
    bumped = make_adjacent_variant(base, 0, center=np.zeros(1), radius=0.5)
    with pytest.raises(ConfigError):
        resolve_steps(bumped, zero_noise_config(), dual_radius=1.0)
    rho1, rho2 = resolve_steps(
        bumped, zero_noise_config(rho1=0.05, rho2=0.01), dual_radius=1.0)
    assert (rho1, rho2) == (0.05, 0.01)


def test_dual_set_resolution_order():
    inst = toy_separable()
    inst.dual_radius = 3.0
    assert resolve_dual_set(inst, zero_noise_config()).radius == 3.0
    assert resolve_dual_set(
        inst, zero_noise_config(dual_radius=7.0)).radius == 7.0
    inst.dual_radius = None
    assert resolve_dual_set(inst, zero_noise_config()).radius > 0


def test_initialize_state_modes():
    inst = toy_separable()
    ball = DualBall(radius=1.0, dim=1)
    xs, lam, y, z, mode = initialize_state(
        inst, ball, zero_noise_config())
    assert mode == "fixed"
    assert np.allclose(y, inst.local_objective_values(xs), atol=1e-15)
    assert np.allclose(z, inst.local_constraint_values(xs), atol=1e-15)
    _, _, _, _, mode = initialize_state(inst, ball, toy_config())
    assert mode == "seeded"
    explicit = ([np.array([9.0]), np.array([-9.0])], np.full((2, 1), 9.0))
    xs, lam, _, _, mode = initialize_state(
        inst, ball, toy_config(init=explicit))
    assert mode == "explicit"
    assert xs[0] == pytest.approx(1.0)      # projected into the box
    assert np.linalg.norm(lam[0]) <= 1.0 + 1e-12


# ---------------------------------------------------------------------------
# full runs


def test_zero_noise_run_frozen_decades():
    # Regression anchor: exact errors frozen from a verified zero-noise run.
    inst = toy_separable()
    sol = solve_centralized(inst)
    run = run_optimizer(inst, pair_topology(),
                        zero_noise_config(horizon=10_000),
                        reference=sol.xs)
    assert run.at(100, "err_x") == pytest.approx(
        0.009480230446468913, rel=1e-12)
    assert run.at(1000, "err_x") == pytest.approx(
        0.0001338289979873733, rel=1e-12)
    assert run.at(10_000, "err_x") == pytest.approx(
        1.5376715185616795e-06, rel=1e-12)
    assert (run.columns["gap_margin"] >= -1e-8).all()
    assert np.isinf(run.columns["eps_hat"]).all()


def test_zero_noise_run_ignores_seed():
    inst = toy_separable()
    topo = pair_topology()
    a = run_optimizer(inst, topo, zero_noise_config(horizon=300, seed=0))
    b = run_optimizer(inst, topo, zero_noise_config(horizon=300, seed=77))
    for name in a.columns:
        assert np.array_equal(a.columns[name], b.columns[name],
                              equal_nan=True), name


def test_noisy_run_decades_shrink():
    inst = toy_separable()
    sol = solve_centralized(inst)
    topo = pair_topology()
    errs = np.zeros(3)
    for seed in range(5):
        run = run_optimizer(inst, topo, toy_config(horizon=10_000,
                                                   seed=seed),
                            reference=sol.xs)
        errs += np.array([run.at(100, "err_x"), run.at(1000, "err_x"),
                          run.at(10_000, "err_x")])
    assert errs[0] > errs[1] > errs[2]


def test_noisy_run_budget_column():
    inst = toy_separable()
    run = run_optimizer(inst, pair_topology(), toy_config(horizon=200))
    eps = run.columns["eps_hat"]
    assert np.isfinite(eps).all()
    assert (np.diff(eps) >= -1e-12).all()
    assert np.array_equal(run.columns["nu_k"], NU.values(run.ks))


def test_run_metadata_and_feasibility():
    inst = toy_separable()
    run = run_optimizer(inst, pair_topology(), toy_config(horizon=150))
    meta = run.metadata
    assert meta["mode"] == "optimizer"
    assert meta["rho1"] > 0 and meta["rho2"] > 0 and meta["dual_radius"] > 0
    final = meta["final_state"]
    for row in final["x"]:
        assert np.all(np.abs(np.asarray(row)) <= 1.0 + 1e-12)
    lam = np.asarray(final["lam"])
    assert (lam >= -1e-15).all()
    assert (np.linalg.norm(lam, axis=1)
            <= meta["dual_radius"] * (1 + 1e-12)).all()
    assert np.isnan(run.columns["err_x"]).all()   # no reference supplied


def test_every_round_stays_feasible_on_reference_path():
    inst = toy_separable()
    topo = pair_topology()
    ball = resolve_dual_set(inst, toy_config())
    cfg = toy_config(horizon=50)
    rho1, rho2 = resolve_steps(inst, cfg, ball.radius)
    xs, lam, y, z, _ = initialize_state(inst, ball, cfg)
    rng = np.random.default_rng(5)
    for k in range(1, 51):
        zeta = rng.normal(size=(2, 1))
        xi = rng.normal(size=(2, 2))
        ups = rng.normal(size=(2, 1))
        xs, lam, y, z = optimizer_round(
            inst, ball, topo.array, topo.diagonal, xs, lam, y, z,
            rho1, rho2, CHI.value(k), GAMMA.value(k), THETA.value(k),
            zeta, xi, ups)
        for i, x in enumerate(xs):
            assert inst.agents[i].domain.contains(x, tol=1e-12)
        for row in lam:
            assert (row >= -1e-12).all()
            assert np.linalg.norm(row) <= ball.radius * (1 + 1e-12)


def test_bitwise_determinism_and_chunking():
    inst = toy_separable()
    topo = pair_topology()
    a = run_optimizer(inst, topo, toy_config(horizon=400, seed=3))
    b = run_optimizer(inst, topo, toy_config(horizon=400, seed=3))
    c = run_optimizer(inst, topo, toy_config(horizon=400, seed=3,
                                             max_chunk=7))
    for name in a.columns:
        assert np.array_equal(a.columns[name], b.columns[name],
                              equal_nan=True), name
        assert np.array_equal(a.columns[name], c.columns[name],
                              equal_nan=True), name
    assert a.metadata["final_state"] == c.metadata["final_state"]


def test_reference_path_matches_kernels():
    inst = toy_separable()
    topo = pair_topology()
    a = run_optimizer(inst, topo, toy_config(horizon=300, seed=8))
    b = run_optimizer(inst, topo, toy_config(horizon=300, seed=8,
                                             force_reference_path=True))
    assert b.metadata["backend"] == "reference"
    for name in a.columns:
        assert np.allclose(a.columns[name], b.columns[name],
                           rtol=1e-10, atol=1e-12, equal_nan=True), name


@pytest.mark.skipif(not numba_available(), reason="numba not installed")
def test_backends_agree():
    inst = toy_separable()
    topo = pair_topology()
    a = run_optimizer(inst, topo, toy_config(horizon=300, seed=8,
                                             backend="numpy"))
    b = run_optimizer(inst, topo, toy_config(horizon=300, seed=8,
                                             backend="numba"))
    for name in a.columns:
        assert np.array_equal(a.columns[name], b.columns[name],
                              equal_nan=True), name
    assert a.metadata["final_state"] == b.metadata["final_state"]


def test_bumped_instance_runs_on_reference_path():
    from dpopt.accountant import make_adjacent_variant

    base = toy_separable()
    bumped = make_adjacent_variant(base, 0, center=np.zeros(1), radius=0.5)
    cfg = toy_config(horizon=50, rho1=0.05, rho2=0.01, dual_radius=1.0)
    run = run_optimizer(bumped, pair_topology(), cfg)
    assert run.metadata["backend"] == "reference"
    assert np.isnan(run.columns["gap_margin"]).all()


def test_per_channel_noise_schedules():
    inst = toy_separable()
    quiet = NoiseSchedule(0.5, 0.1, 0.2)
    loud = NoiseSchedule(2.0, 0.1, 0.2)
    cfg = toy_config(horizon=100, noise=None, noise_dual=quiet,
                     noise_objective=loud, noise_constraint=loud)
    run = run_optimizer(inst, pair_topology(), cfg)
    assert np.array_equal(run.columns["nu_k"], quiet.values(run.ks))
    shared = run_optimizer(inst, pair_topology(),
                           toy_config(horizon=100, noise=quiet))
    assert run.at(100, "eps_hat") < shared.at(100, "eps_hat")


def test_noise_needs_a_schedule():
    with pytest.raises(ConfigError):
        OptimizerConfig(horizon=10, chi=CHI, gamma=GAMMA, theta=THETA,
                        noise=None, noise_enabled=True)


def test_invalid_schedules_need_override():
    from dpopt.errors import CertificateError

    inst = toy_separable()
    bad_theta = PowerSchedule(0.1, 0.3)
    cfg = dict(horizon=20, chi=CHI, gamma=GAMMA, theta=bad_theta,
               noise=None, noise_enabled=False)
    with pytest.raises(CertificateError):
        run_optimizer(inst, pair_topology(), OptimizerConfig(**cfg))
    run = run_optimizer(inst, pair_topology(), OptimizerConfig(
        override_certificates=True, **cfg))
    assert run.metadata["certificate_ok"] is False
