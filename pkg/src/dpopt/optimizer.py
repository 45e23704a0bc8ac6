"""Differentially-private distributed constrained optimizer engine.

Each agent holds a decision variable in its own convex domain, a multiplier
estimate in the shared dual ball, and two tracker vectors estimating the
network-wide objective and constraint aggregates.  A round runs three stages
in fixed order:

1. **Perturbation** -- from round-start values, each agent takes one capped
   projected gradient step in the primal and one in the dual, producing
   auxiliary points ``(alpha_i, beta_i)``.
2. **Primal/dual update** -- the primal step descends through the aggregate
   gradient evaluated at ``m * y_i`` (the tracker's estimate of the true
   sum) using ``beta_i``; the dual step mixes the neighbors' noisy
   multiplier broadcasts, scaled by the decaying ``chi_k``, and ascends
   along ``g_i(alpha_i)``.
3. **Tracking** -- ``y_i`` and ``z_i`` mix noisy neighbor broadcasts and
   absorb the local value change ``f_i(x^{k+1}) - (1-theta_k) f_i(x^k)``;
   the damping ``theta_k`` geometrically forgets injected noise at the cost
   of a small tracking bias, which is what keeps the privacy budget finite.

Only the multiplier and the two trackers are ever broadcast, each obscured
by fresh Laplace noise per agent per round; decision variables stay local.
An agent's own noise never feeds back into its own update.

``run_optimizer`` executes on stacked-array kernels (numpy or numba) when
the instance is kernel-ready, and through the per-agent reference path
otherwise; both produce matching trajectories to accumulation-order
rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .accountant import optimizer_epsilon_trace
from .backend import active_backend, get_kernels
from .errors import (CertificateError, ConfigError, DimensionMismatchError,
                     StepTooLargeError, UnsupportedFormError)
from .metrics import RunMetrics, log_grid, segment_rounds
from .oracle import saddle_gap
from .problems import compute_dual_bound, estimate_constants
from .schedules import (Schedule, laplace_from_uniform,
                        validate_optimizer_schedules,
                        validate_privacy_finiteness)
from .sets import DualBall

INIT_STREAM = 0
NOISE_STREAM = 1
FIXED_INIT_SEED = 20240613


@dataclass
class OptimizerConfig:
    """Run parameters for :func:`run_optimizer`.

    ``rho1``/``rho2`` default to the instance's saddle-inequality caps.
    ``init`` is ``"auto"`` (seeded random when noise is on, fixed-seed random
    when off), ``"seeded"``, ``"fixed"``, or an explicit ``(xs, lam)`` pair.
    ``adjacency_bound`` feeds the privacy ledger.  The per-channel noise
    schedules default to the shared ``noise``.
    """

    horizon: int
    chi: Schedule
    gamma: Schedule
    theta: Schedule
    noise: Schedule | None = None
    noise_enabled: bool = True
    rho1: float | None = None
    rho2: float | None = None
    dual_radius: float | None = None
    seed: int = 0
    init: object = "auto"
    adjacency_bound: float = 1.0
    override_certificates: bool = False
    backend: str | None = None
    max_chunk: int = 2048
    force_reference_path: bool = False
    noise_dual: Schedule | None = None
    noise_objective: Schedule | None = None
    noise_constraint: Schedule | None = None

    def __post_init__(self):
        if int(self.horizon) < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        self.horizon = int(self.horizon)
        if self.noise_enabled and self.noise is None and not (
                self.noise_dual and self.noise_objective
                and self.noise_constraint):
            raise ConfigError(
                "noise_enabled requires a noise schedule (shared or all "
                "three channels)")
        if not float(self.adjacency_bound) > 0:
            raise ConfigError(
                f"adjacency_bound must be positive, got "
                f"{self.adjacency_bound}")
        if int(self.max_chunk) < 1:
            raise ConfigError(f"max_chunk must be >= 1, got {self.max_chunk}")
        self.max_chunk = int(self.max_chunk)

    def channel_noises(self):
        """The ``(dual, objective, constraint)`` noise schedules."""
        return (self.noise_dual or self.noise,
                self.noise_objective or self.noise,
                self.noise_constraint or self.noise)


# ---------------------------------------------------------------------------
# composable reference-path steps


def perturbation_step(instance, i, x_i, lam_i, y_i, z_i, rho1, rho2,
                      dual_set):
    """Agent ``i``'s capped perturbation points from round-start values.

    ``alpha_i`` is one primal projected gradient step (aggregate gradient
    taken at ``m * y_i``); ``beta_i`` is one dual ascent step along the
    tracked constraint estimate ``m * z_i``.
    """
    m = instance.num_agents
    x_i = np.asarray(x_i, dtype=float)
    grad = instance.agent_gradient(i, x_i, m * np.asarray(y_i), lam_i)
    alpha = instance.agents[i].domain.project(x_i - rho1 * grad)
    beta = dual_set.project(
        np.asarray(lam_i, dtype=float) + rho2 * m * np.asarray(z_i))
    return alpha, beta


def primal_dual_step(instance, dual_set, weights, wdiag, xs, lam, y,
                     alphas, betas, chi_k, gamma_k, dual_noise):
    """All agents' primal and dual updates for one round.

    The primal descent reuses the round-start tracker ``y`` and this round's
    ``beta_i``; the dual update mixes neighbors' noisy multipliers (own
    noise removed) and ascends along ``g_i(alpha_i)``.
    """
    m = instance.num_agents
    lam_obs = weights @ (lam + dual_noise)
    g_alpha = instance.local_constraint_values(alphas)
    xs_new = []
    lam_new = np.empty_like(lam)
    for i in range(m):
        grad = instance.agent_gradient(
            i, xs[i], m * np.asarray(y[i]), betas[i])
        xs_new.append(
            instance.agents[i].domain.project(xs[i] - gamma_k * grad))
        lam_new[i] = dual_set.project(
            lam[i] + chi_k * (lam_obs[i] - wdiag[i] * dual_noise[i])
            + gamma_k * g_alpha[i])
    return xs_new, lam_new


def tracking_step(instance, weights, wdiag, xs_old, xs_new, y, z,
                  chi_k, theta_k, obj_noise, con_noise):
    """Both tracker recursions for one round.

    Each tracker mixes noisy neighbor broadcasts, forgets a ``theta_k``
    fraction of its own state, and absorbs the local map's value change
    between the old and new primal points.
    """
    f_new = instance.local_objective_values(xs_new)
    f_old = instance.local_objective_values(xs_old)
    g_new = instance.local_constraint_values(xs_new)
    g_old = instance.local_constraint_values(xs_old)
    keep = 1.0 - theta_k
    y_new = (keep * y
             + chi_k * (weights @ (y + obj_noise)
                        - wdiag[:, None] * obj_noise)
             + f_new - keep * f_old)
    z_new = (keep * z
             + chi_k * (weights @ (z + con_noise)
                        - wdiag[:, None] * con_noise)
             + g_new - keep * g_old)
    return y_new, z_new


def optimizer_round(instance, dual_set, weights, wdiag, xs, lam, y, z,
                    rho1, rho2, chi_k, gamma_k, theta_k,
                    dual_noise, obj_noise, con_noise):
    """One full round (perturbation, primal/dual, tracking); pure."""
    m = instance.num_agents
    alphas = []
    betas = np.empty_like(lam)
    for i in range(m):
        alpha, beta = perturbation_step(
            instance, i, xs[i], lam[i], y[i], z[i], rho1, rho2, dual_set)
        alphas.append(alpha)
        betas[i] = beta
    xs_new, lam_new = primal_dual_step(
        instance, dual_set, weights, wdiag, xs, lam, y, alphas, betas,
        chi_k, gamma_k, dual_noise)
    y_new, z_new = tracking_step(
        instance, weights, wdiag, xs, xs_new, y, z, chi_k, theta_k,
        obj_noise, con_noise)
    return xs_new, lam_new, y_new, z_new


# ---------------------------------------------------------------------------
# run orchestration


def resolve_dual_set(instance, config):
    """The multiplier ball for a run: config override, instance value, or
    freshly computed from the Slater point."""
    radius = config.dual_radius
    if radius is None:
        radius = instance.dual_radius
    if radius is None:
        radius, _ = compute_dual_bound(instance)
    return DualBall(radius=float(radius), dim=instance.constraint_dim)


def resolve_steps(instance, config, dual_radius):
    """Perturbation step sizes, defaulted and capped.

    Defaults come from the instance's smoothness constants.  Explicit values
    above the caps raise :class:`StepTooLargeError` unless certificates are
    overridden; non-affine instances cannot derive caps and therefore
    require explicit values.
    """
    try:
        consts = estimate_constants(instance)
    except UnsupportedFormError:
        consts = None
    if config.rho1 is None or config.rho2 is None:
        if consts is None:
            raise ConfigError(
                "rho1/rho2 must be set explicitly for instances without "
                "derivable step caps (non-affine maps)")
        rho1 = config.rho1 if config.rho1 is not None else consts.primal_step_cap
        rho2 = config.rho2 if config.rho2 is not None else consts.dual_step_cap
    else:
        rho1, rho2 = config.rho1, config.rho2
    rho1, rho2 = float(rho1), float(rho2)
    if not (rho1 > 0 and rho2 > 0):
        raise ConfigError(f"step sizes must be positive, got {rho1}, {rho2}")
    if consts is not None and not config.override_certificates:
        slack = 1.0 + 1e-9
        if rho1 > consts.primal_step_cap * slack:
            raise StepTooLargeError(
                f"rho1={rho1:.6g} exceeds the saddle-inequality cap "
                f"{consts.primal_step_cap:.6g}")
        if rho2 > consts.dual_step_cap * slack:
            raise StepTooLargeError(
                f"rho2={rho2:.6g} exceeds the saddle-inequality cap "
                f"{consts.dual_step_cap:.6g}")
    return rho1, rho2


def initialize_state(instance, dual_set, config):
    """Initial ``(xs, lam, y, z)``; trackers start at the local map values.

    Modes follow the consensus engine: with noise disabled, ``"auto"`` draws
    from a fixed internal seed so zero-noise trajectories are independent of
    the configured seed.
    """
    m = instance.num_agents
    init = config.init
    if isinstance(init, tuple):
        xs_raw, lam_raw = init
        xs = [instance.agents[i].domain.project(
            np.asarray(xs_raw[i], dtype=float)) for i in range(m)]
        lam = np.stack([dual_set.project(np.asarray(lam_raw[i], dtype=float))
                        for i in range(m)])
        mode = "explicit"
    else:
        if init == "auto":
            init = "seeded" if config.noise_enabled else "fixed"
        if init == "seeded":
            rng = np.random.default_rng(
                np.random.SeedSequence((config.seed, INIT_STREAM)))
        elif init == "fixed":
            rng = np.random.default_rng(FIXED_INIT_SEED)
        else:
            raise ConfigError(
                f"init must be 'auto', 'seeded', 'fixed' or an (xs, lam) "
                f"pair, got {init!r}")
        xs = [instance.agents[i].domain.sample(rng) for i in range(m)]
        lam = np.stack([dual_set.sample(rng) for _ in range(m)])
        mode = init
    y = instance.local_objective_values(xs)
    z = instance.local_constraint_values(xs)
    return xs, lam, y, z, mode


def _certify(config):
    certs = {"schedules": validate_optimizer_schedules(
        config.chi, config.theta, config.gamma)}
    if config.noise_enabled:
        worst = None
        for sched in config.channel_noises():
            cert = validate_privacy_finiteness(
                config.theta, sched, chi=config.chi)
            if worst is None or (worst.ok and not cert.ok):
                worst = cert
        certs["privacy"] = worst
    ok = all(c.ok for c in certs.values())
    if not ok and not config.override_certificates:
        failed = {name: c.failed_names() for name, c in certs.items()
                  if not c.ok}
        raise CertificateError(
            f"schedule certificate failed: {failed}; pass "
            "override_certificates=True to run anyway")
    return certs, ok


def _stacked_error(xs, reference):
    if reference is None:
        return np.nan
    return float(np.sqrt(sum(
        float(((np.asarray(x) - np.asarray(r)) ** 2).sum())
        for x, r in zip(xs, reference))))


def run_optimizer(instance, topology, config, reference=None):
    """Execute an optimizer run and sample diagnostics on the log grid.

    Columns: ``err_x`` (stacked distance to ``reference``, ``nan`` without
    one), the three disagreement columns ``cons_lambda``/``cons_y``/
    ``cons_z`` (worst agent distance to the network mean), the aggregate
    constraint's worst component ``constraint_max``, the one-round saddle
    inequality margin ``gap_margin`` (``nan`` when the instance's smoothness
    constants are unavailable), the accountant's ``eps_hat`` partial sum
    (``inf`` with noise disabled), and the dual-channel noise scale
    ``nu_k``.

    The final iterates land in ``metadata["final_state"]``.
    """
    m = instance.num_agents
    if topology.size != m:
        raise DimensionMismatchError(
            f"topology has {topology.size} agents, instance has {m}")
    certs, cert_ok = _certify(config)
    dual_set = resolve_dual_set(instance, config)
    rho1, rho2 = resolve_steps(instance, config, dual_set.radius)
    try:
        constants = estimate_constants(instance)
    except UnsupportedFormError:
        constants = None

    xs, lam, y, z, init_mode = initialize_state(instance, dual_set, config)
    rng_noise = np.random.default_rng(
        np.random.SeedSequence((config.seed, NOISE_STREAM)))

    n_obj, n_con = instance.objective_dim, instance.constraint_dim
    width = m * (2 * n_con + n_obj)
    weights, wdiag = topology.array, topology.diagonal
    nu_dual, nu_obj, nu_con = config.channel_noises()

    use_kernels = instance.kernel_ready() and not config.force_reference_path
    backend = active_backend(config.backend) if use_kernels else "reference"
    if use_kernels:
        kernels = get_kernels(config.backend)
        arrays = instance.kernel_arrays()
        x_arr = np.stack(xs)

    ks = log_grid(config.horizon)
    eps = (optimizer_epsilon_trace(
               config.chi, config.gamma, config.theta,
               (nu_dual, nu_obj, nu_con), config.adjacency_bound,
               topology.min_self_weight, ks)
           if config.noise_enabled else np.full(ks.shape, np.inf))
    nu_col = (nu_dual.values(ks) if nu_dual is not None
              else np.full(ks.shape, np.nan))

    names = ("err_x", "cons_lambda", "cons_y", "cons_z", "constraint_max",
             "gap_margin")
    cols = {name: np.empty(ks.shape[0]) for name in names}

    def disagreement(block):
        dev = block - block.mean(axis=0)
        return float(np.sqrt((dev * dev).sum(axis=1)).max())

    prev = 0
    for idx, mark in enumerate(ks):
        for lo, hi in segment_rounds(prev, int(mark), config.max_chunk):
            rounds = np.arange(lo + 1, hi + 1)
            n = rounds.shape[0]
            chis = config.chi.values(rounds)
            gammas = config.gamma.values(rounds)
            thetas = config.theta.values(rounds)
            if config.noise_enabled:
                block = rng_noise.random((n, width))
                zeta = laplace_from_uniform(
                    block[:, :m * n_con],
                    nu_dual.values(rounds)[:, None]).reshape(n, m, n_con)
                xi = laplace_from_uniform(
                    block[:, m * n_con:m * (n_con + n_obj)],
                    nu_obj.values(rounds)[:, None]).reshape(n, m, n_obj)
                ups = laplace_from_uniform(
                    block[:, m * (n_con + n_obj):],
                    nu_con.values(rounds)[:, None]).reshape(n, m, n_con)
            else:
                zeta = np.zeros((n, m, n_con))
                xi = np.zeros((n, m, n_obj))
                ups = np.zeros((n, m, n_con))
            if use_kernels:
                x_arr, lam, y, z = kernels.optimizer_chunk(
                    x_arr, lam, y, z,
                    arrays["f_mat"], arrays["f_off"], arrays["g_mat"],
                    arrays["g_off"], arrays["lower"], arrays["upper"],
                    arrays["agg_mat"], arrays["agg_lin"], dual_set.radius,
                    weights, wdiag, rho1, rho2, chis, gammas, thetas,
                    zeta, xi, ups)
            else:
                for t in range(n):
                    xs, lam, y, z = optimizer_round(
                        instance, dual_set, weights, wdiag, xs, lam, y, z,
                        rho1, rho2, float(chis[t]), float(gammas[t]),
                        float(thetas[t]), zeta[t], xi[t], ups[t])
        if use_kernels:
            xs = [x_arr[i] for i in range(m)]
        cols["err_x"][idx] = _stacked_error(xs, reference)
        cols["cons_lambda"][idx] = disagreement(lam)
        cols["cons_y"][idx] = disagreement(y)
        cols["cons_z"][idx] = disagreement(z)
        cols["constraint_max"][idx] = instance.feasibility_margin(xs)
        if constants is not None:
            cols["gap_margin"][idx] = saddle_gap(
                instance, xs, lam.mean(axis=0), rho1, rho2,
                dual_radius=dual_set.radius).margin
        else:
            cols["gap_margin"][idx] = np.nan
        prev = int(mark)

    cols["eps_hat"] = eps
    cols["nu_k"] = nu_col
    metadata = {
        "mode": "optimizer",
        "agents": m,
        "horizon": config.horizon,
        "seed": config.seed,
        "backend": backend,
        "init": init_mode,
        "noise_enabled": config.noise_enabled,
        "adjacency_bound": config.adjacency_bound,
        "rho1": rho1,
        "rho2": rho2,
        "dual_radius": dual_set.radius,
        "schedules": {
            "chi": config.chi.to_dict(),
            "gamma": config.gamma.to_dict(),
            "theta": config.theta.to_dict(),
            "noise": config.noise.to_dict() if config.noise else None,
        },
        "topology": {
            "size": m,
            "min_self_weight": topology.min_self_weight,
            "contraction_factor": topology.contraction_factor,
        },
        "certificate_ok": cert_ok,
        "certificates": {k: c.to_dict() for k, c in certs.items()},
        "final_state": {
            "x": [np.asarray(v).tolist() for v in xs],
            "lam": lam.tolist(),
            "y": y.tolist(),
            "z": z.tolist(),
        },
    }
    return RunMetrics(mode="optimizer", ks=ks, columns=cols,
                      metadata=metadata)
