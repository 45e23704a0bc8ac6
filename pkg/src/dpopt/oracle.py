"""Reference solvers and optimality checks (no network, no noise).

These are the independent yardsticks the distributed engines are measured
against:

* :func:`minimize_lagrangian` -- projected gradient on ``x -> L(x, lam)``
  for a fixed multiplier (feeds the dual-radius formula);
* :func:`solve_centralized` -- a perturbed primal-dual saddle iteration on
  the full instance, run to numerical convergence;
* :func:`grid_reference` -- a zooming Cartesian grid search that certifies
  the constrained minimum for small box instances without using gradients;
* :func:`check_optimality` -- projection fixed-point residuals plus sampled
  variational-inequality, feasibility and complementarity checks;
* :func:`saddle_gap` -- the one-round perturbation inequality underlying the
  engine's step caps, evaluated at a given state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UnsupportedFormError
from .problems import AffineMap, estimate_constants
from .sets import Box, DualBall


def _primal_step(instance):
    cap = estimate_constants(instance).primal_step_cap
    return cap if np.isfinite(cap) else 1.0


class _Stacked:
    """Batched evaluation over stacked kernel arrays (m, ...) -- the fast
    path the oracles use when the instance is kernel-ready."""

    def __init__(self, instance):
        ka = instance.kernel_arrays()
        self.f_mat, self.f_off = ka["f_mat"], ka["f_off"]
        self.g_mat, self.g_off = ka["g_mat"], ka["g_off"]
        self.lower, self.upper = ka["lower"], ka["upper"]

    def f_values(self, x):
        return np.einsum("amd,ad->am", self.f_mat, x) + self.f_off

    def g_values(self, x):
        return np.einsum("apd,ad->ap", self.g_mat, x) + self.g_off

    def primal_grad(self, grad_f, lam):
        return (np.einsum("amd,m->ad", self.f_mat, grad_f)
                + np.einsum("apd,p->ad", self.g_mat, lam))

    def project(self, x):
        return np.clip(x, self.lower, self.upper)


def minimize_lagrangian(instance, lam, max_iters=20000, tol=1e-12,
                        vectorized=None):
    """Minimize ``x -> L(x, lam)`` over the product domain.

    Projected gradient with the step at the smoothness cap.  Returns
    ``(xs, value)``.  Affine/quadratic instances only (the step rule relies
    on the derived constants).
    """
    lam = np.asarray(lam, dtype=float)
    eta = _primal_step(instance)
    if vectorized is None:
        vectorized = instance.kernel_ready()

    if vectorized:
        ev = _Stacked(instance)
        x = ev.project(np.zeros_like(ev.lower))
        for _ in range(max_iters):
            grad_f = instance.aggregate.gradient(ev.f_values(x).sum(axis=0))
            x_new = ev.project(x - eta * ev.primal_grad(grad_f, lam))
            move = float(np.linalg.norm((x_new - x).ravel(), 1))
            x = x_new
            if move < tol * max(eta, 1e-12):
                break
        xs = [x[i] for i in range(instance.num_agents)]
        return xs, instance.lagrangian_value(xs, lam)

    xs = [(a.domain.project(np.zeros(a.dim))) for a in instance.agents]
    for _ in range(max_iters):
        totals = instance.local_objective_values(xs).sum(axis=0)
        grad_f = instance.aggregate.gradient(totals)
        move = 0.0
        new_xs = []
        for i, a in enumerate(instance.agents):
            grad = (a.objective_map.jacobian(xs[i]).T @ grad_f
                    + a.constraint_map.jacobian(xs[i]).T @ lam)
            x_new = a.domain.project(xs[i] - eta * grad)
            move += float(np.linalg.norm(x_new - xs[i], 1))
            new_xs.append(x_new)
        xs = new_xs
        if move < tol * max(eta, 1e-12):
            break
    return xs, instance.lagrangian_value(xs, lam)


@dataclass
class CentralizedSolution:
    """Saddle point estimate from :func:`solve_centralized`."""

    xs: list
    lam: np.ndarray
    rounds: int
    residual: float
    converged: bool


def solve_centralized(instance, rho1=None, rho2=None, max_rounds=200_000,
                      tol=1e-6, vectorized=None):
    """Perturbed primal-dual saddle iteration with exact coordination.

    Each round: form perturbation points with the capped steps
    ``(rho1, rho2)``, then take the diminishing-step primal-dual update
    evaluated at the perturbed partner.  Stops when the combined state
    movement falls below ``tol`` relative to the current step.  This is the
    centralized limit of the distributed engine (no network, no noise) and
    converges to a constrained saddle point on the affine/quadratic family.
    """
    consts = estimate_constants(instance)
    if rho1 is None:
        rho1 = consts.primal_step_cap if np.isfinite(
            consts.primal_step_cap) else 1.0
    if rho2 is None:
        rho2 = consts.dual_step_cap if np.isfinite(
            consts.dual_step_cap) else 1.0
    if instance.dual_radius is not None:
        radius = instance.dual_radius
    else:
        from .problems import compute_dual_bound

        radius, _ = compute_dual_bound(instance)
    ball = DualBall(radius=radius, dim=instance.constraint_dim)
    if vectorized is None:
        vectorized = instance.kernel_ready()

    if vectorized:
        ev = _Stacked(instance)
        x = ev.project(np.zeros_like(ev.lower))
        lam = np.zeros(instance.constraint_dim)
        residual = np.inf
        for k in range(1, max_rounds + 1):
            gamma = 0.5 / (1.0 + 0.05 * k)
            grad_f = instance.aggregate.gradient(ev.f_values(x).sum(axis=0))
            constraint_sum = ev.g_values(x).sum(axis=0)
            alpha = ev.project(x - rho1 * ev.primal_grad(grad_f, lam))
            beta = ball.project(lam + rho2 * constraint_sum)
            x_new = ev.project(x - gamma * ev.primal_grad(grad_f, beta))
            lam_new = ball.project(lam + gamma * ev.g_values(alpha).sum(axis=0))
            residual = (sum(float(np.linalg.norm(x_new[i] - x[i]))
                            for i in range(x.shape[0]))
                        + float(np.linalg.norm(lam_new - lam)))
            x, lam = x_new, lam_new
            if residual < tol * gamma:
                xs = [x[i] for i in range(instance.num_agents)]
                return CentralizedSolution(xs=xs, lam=lam, rounds=k,
                                           residual=residual, converged=True)
        xs = [x[i] for i in range(instance.num_agents)]
        return CentralizedSolution(xs=xs, lam=lam, rounds=max_rounds,
                                   residual=residual, converged=False)

    xs = [(a.domain.project(np.zeros(a.dim))) for a in instance.agents]
    lam = np.zeros(instance.constraint_dim)
    residual = np.inf
    for k in range(1, max_rounds + 1):
        gamma = 0.5 / (1.0 + 0.05 * k)
        totals = instance.local_objective_values(xs).sum(axis=0)
        grad_f = instance.aggregate.gradient(totals)
        constraint_sum = instance.constraint_total(xs)

        alphas = []
        for i, a in enumerate(instance.agents):
            grad = (a.objective_map.jacobian(xs[i]).T @ grad_f
                    + a.constraint_map.jacobian(xs[i]).T @ lam)
            alphas.append(a.domain.project(xs[i] - rho1 * grad))
        beta = ball.project(lam + rho2 * constraint_sum)

        new_xs = []
        for i, a in enumerate(instance.agents):
            grad = (a.objective_map.jacobian(xs[i]).T @ grad_f
                    + a.constraint_map.jacobian(xs[i]).T @ beta)
            new_xs.append(a.domain.project(xs[i] - gamma * grad))
        new_lam = ball.project(
            lam + gamma * instance.local_constraint_values(alphas).sum(axis=0))

        residual = sum(float(np.linalg.norm(a - b))
                       for a, b in zip(new_xs, xs))
        residual += float(np.linalg.norm(new_lam - lam))
        xs, lam = new_xs, new_lam
        if residual < tol * gamma:
            return CentralizedSolution(xs=xs, lam=lam, rounds=k,
                                       residual=residual, converged=True)
    return CentralizedSolution(xs=xs, lam=lam, rounds=max_rounds,
                               residual=residual, converged=False)


# ---------------------------------------------------------------------------
# grid search


def grid_minimize(func, lower, upper, feasible=None, points=9, passes=4,
                  max_effective_dims=8):
    """Zooming Cartesian grid minimization over a box.

    ``func`` maps a candidate batch ``(n, D)`` to values ``(n,)``;
    ``feasible`` (optional) maps the batch to a boolean mask.  Coordinates
    with ``lower == upper`` are frozen.  Each pass lays ``points`` ticks per
    free coordinate and zooms a two-cell window around the incumbent.
    Returns ``(argmin, value)``.
    """
    lower = np.asarray(lower, dtype=float).copy()
    upper = np.asarray(upper, dtype=float).copy()
    if lower.shape != upper.shape or lower.ndim != 1:
        raise ValueError("lower/upper must be equal-length vectors")
    free = np.nonzero(upper > lower)[0]
    if free.size > max_effective_dims:
        raise UnsupportedFormError(
            f"{free.size} free coordinates exceed the grid budget "
            f"({max_effective_dims}); use a gradient method")
    base_lower, base_upper = lower.copy(), upper.copy()

    best = None
    best_val = np.inf
    for _ in range(passes):
        axes = [np.linspace(lower[j], upper[j], points) for j in free]
        if free.size:
            mesh = np.meshgrid(*axes, indexing="ij")
            cand = np.tile(lower, (mesh[0].size, 1))
            for col, j in enumerate(free):
                cand[:, j] = mesh[col].ravel()
        else:
            cand = lower[None, :]
        if feasible is not None:
            mask = np.asarray(feasible(cand), dtype=bool)
            cand = cand[mask]
            if cand.shape[0] == 0:
                raise UnsupportedFormError(
                    "no feasible grid point; refine the grid or widen the box")
        vals = np.asarray(func(cand), dtype=float)
        j = int(np.argmin(vals))
        if vals[j] < best_val:
            best_val = float(vals[j])
            best = cand[j].copy()
        cell = (upper - lower) / max(points - 1, 1)
        lower = np.maximum(best - 2.0 * cell, base_lower)
        upper = np.minimum(best + 2.0 * cell, base_upper)
    return best, best_val


def grid_reference(instance, points=9, passes=4, feasibility_slack=0.0):
    """Constrained minimum of an affine/quadratic box instance by grid.

    Flattens all agents into one vector, filters grid candidates by
    ``sum_i g_i(x_i) <= feasibility_slack`` and minimizes the aggregate
    objective.  Gradient-free, so it is an independent check on the
    saddle-point solvers.  Returns ``(xs, value)``.
    """
    mats_f, offs_f, mats_g, offs_g, lows, highs = [], [], [], [], [], []
    for a in instance.agents:
        if not isinstance(a.objective_map, AffineMap) or not isinstance(
                a.constraint_map, AffineMap) or not isinstance(a.domain, Box):
            raise UnsupportedFormError(
                "grid reference needs affine maps and box domains")
        mats_f.append(a.objective_map.matrix)
        offs_f.append(a.objective_map.offset)
        mats_g.append(a.constraint_map.matrix)
        offs_g.append(a.constraint_map.offset)
        lows.append(a.domain.lower)
        highs.append(a.domain.upper)
    design_f = np.concatenate(mats_f, axis=1)      # (M, D_total)
    total_f = np.sum(offs_f, axis=0)
    design_g = np.concatenate(mats_g, axis=1)      # (P, D_total)
    total_g = np.sum(offs_g, axis=0)
    lower = np.concatenate(lows)
    upper = np.concatenate(highs)
    agg = instance.aggregate

    def func(cand):
        y = cand @ design_f.T + total_f
        return np.einsum("nM,MN,nN->n", y, agg.matrix, y) \
            + y @ agg.linear + agg.constant

    def feasible(cand):
        g = cand @ design_g.T + total_g
        return np.all(g <= feasibility_slack, axis=1)

    flat, value = grid_minimize(func, lower, upper, feasible=feasible,
                                points=points, passes=passes)
    xs = []
    start = 0
    for a in instance.agents:
        xs.append(flat[start:start + a.dim])
        start += a.dim
    return xs, float(value)


# ---------------------------------------------------------------------------
# optimality checks


@dataclass
class OptimalityReport:
    """Evidence that ``(xs, lam)`` is a constrained saddle point.

    ``stationarity_residual`` / ``dual_residual`` are projection fixed-point
    distances (authoritative); ``vi_min`` is the smallest sampled directional
    derivative toward feasible directions (should be >= -tol);
    ``feasibility_max`` is the largest coupled-constraint component;
    ``complementarity`` is ``|lam . sum g|``.
    """

    stationarity_residual: float
    dual_residual: float
    vi_min: float
    feasibility_max: float
    complementarity: float
    tol: float
    ok: bool

    def summary(self):
        mark = "optimal within tol" if self.ok else "NOT optimal"
        return (f"{mark}: stationarity={self.stationarity_residual:.3e} "
                f"dual={self.dual_residual:.3e} vi_min={self.vi_min:.3e} "
                f"feasibility={self.feasibility_max:.3e} "
                f"complementarity={self.complementarity:.3e} "
                f"(tol={self.tol:.1e})")


def check_optimality(instance, xs, lam, tol=1e-3, samples=200, seed=0):
    """Certify a candidate saddle point; see :class:`OptimalityReport`."""
    xs = instance._xs_list(xs)
    lam = np.asarray(lam, dtype=float)
    if instance.dual_radius is None:
        raise ValueError("instance needs dual_radius for the dual check")
    ball = DualBall(radius=instance.dual_radius, dim=instance.constraint_dim)
    consts = estimate_constants(instance)
    eta = consts.primal_step_cap if np.isfinite(
        consts.primal_step_cap) else 1.0
    eta_d = consts.dual_step_cap if np.isfinite(consts.dual_step_cap) else 1.0

    totals = instance.local_objective_values(xs).sum(axis=0)
    grad_f = instance.aggregate.gradient(totals)
    constraint_sum = instance.constraint_total(xs)

    stat = 0.0
    vi_min = np.inf
    rng = np.random.default_rng(seed)
    for i, a in enumerate(instance.agents):
        grad = (a.objective_map.jacobian(xs[i]).T @ grad_f
                + a.constraint_map.jacobian(xs[i]).T @ lam)
        fixed = a.domain.project(xs[i] - eta * grad)
        stat += float(np.linalg.norm(fixed - xs[i])) / max(eta, 1e-12)
        for _ in range(samples):
            v = a.domain.sample(rng)
            vi_min = min(vi_min, float(grad @ (v - xs[i])))

    dual_fixed = ball.project(lam + eta_d * constraint_sum)
    dual_res = float(np.linalg.norm(dual_fixed - lam)) / max(eta_d, 1e-12)
    feas = float(constraint_sum.max())
    compl = abs(float(lam @ constraint_sum))

    ok = (stat <= tol and dual_res <= tol and vi_min >= -tol
          and feas <= tol and compl <= tol * (1.0 + float(np.linalg.norm(lam))))
    return OptimalityReport(
        stationarity_residual=stat, dual_residual=dual_res,
        vi_min=vi_min, feasibility_max=feas, complementarity=compl,
        tol=tol, ok=ok)


# ---------------------------------------------------------------------------
# saddle gap


@dataclass
class GapReport:
    """One-round perturbation inequality at a state; ``margin >= 0`` (up to
    rounding) certifies the step caps at this point."""

    lhs: float
    rhs: float
    margin: float


def saddle_gap(instance, xs, lam, rho1, rho2, dual_radius=None):
    """Evaluate the perturbation inequality at ``(xs, lam)``.

    With ``alpha_hat``/``beta_hat`` the capped perturbation points computed
    from exact aggregates,

        L(x, beta_hat) - L(alpha_hat, lam)
            >= (1/rho1 - K_x) * sum_i ||x_i - alpha_hat_i||^2
               + (1/rho2) * ||lam - beta_hat||^2,

    where ``K_x`` is the primal gradient's Lipschitz bound
    (objective part plus ``dual_radius`` times the constraint curvature,
    which vanishes for affine constraints).  Returns lhs, rhs and their
    difference; the inequality holds for any positive steps, while
    nonnegative *rhs* additionally requires ``rho1`` at or below the cap.

    ``dual_radius`` falls back to the instance's stored value.
    """
    xs = instance._xs_list(xs)
    lam = np.asarray(lam, dtype=float)
    if dual_radius is None:
        dual_radius = instance.dual_radius
    if dual_radius is None:
        raise ValueError("instance needs dual_radius")
    dual_radius = float(dual_radius)
    ball = DualBall(radius=dual_radius, dim=instance.constraint_dim)
    consts = estimate_constants(instance)

    totals = instance.local_objective_values(xs).sum(axis=0)
    grad_f = instance.aggregate.gradient(totals)
    constraint_sum = instance.constraint_total(xs)

    alphas = []
    dist_x = 0.0
    for i, a in enumerate(instance.agents):
        grad = (a.objective_map.jacobian(xs[i]).T @ grad_f
                + a.constraint_map.jacobian(xs[i]).T @ lam)
        alpha = a.domain.project(xs[i] - rho1 * grad)
        dist_x += float(np.sum((xs[i] - alpha) ** 2))
        alphas.append(alpha)
    beta = ball.project(lam + rho2 * constraint_sum)
    dist_lam = float(np.sum((lam - beta) ** 2))

    lhs = (instance.lagrangian_value(xs, beta)
           - instance.lagrangian_value(alphas, lam))
    curvature = (consts.objective_grad_lipschitz
                 + dual_radius * consts.constraint_grad_lipschitz)
    rhs = (1.0 / rho1 - curvature) * dist_x + (1.0 / rho2) * dist_lam
    return GapReport(lhs=lhs, rhs=rhs, margin=lhs - rhs)
