"""Differentially-private constrained consensus engine.

``m`` agents hold states in one shared convex set.  Each round every agent
broadcasts its state plus fresh Laplace noise (one draw per agent per round,
heard identically by all neighbors), mixes the received observations through
a zero-row-sum weight matrix scaled by the decaying factor ``chi_k``, adds
its exogenous input signal scaled by ``gamma_k``, and projects back onto the
set.  An agent's own noise never feeds back into its own update.

With a valid schedule certificate the disagreement ``max_i ||x_i - xbar||``
vanishes despite the injected noise, and the privacy accountant's cumulative
budget stays finite; ``run_consensus`` logs both along a logarithmic round
grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .accountant import consensus_epsilon_trace
from .backend import active_backend, get_kernels
from .errors import ConfigError, CertificateError, DimensionMismatchError
from .metrics import RunMetrics, log_grid, segment_rounds
from .schedules import (Schedule, laplace_from_uniform,
                        validate_consensus_schedules,
                        validate_privacy_finiteness)

# Sub-stream indices for per-run random state: initialization and noise are
# separate generators so zero-noise runs consume no noise randomness at all.
INIT_STREAM = 0
NOISE_STREAM = 1
# Zero-noise runs initialize from this fixed seed, making their trajectories
# independent of the configured seed (the deterministic-reduction contract).
FIXED_INIT_SEED = 20240613


@dataclass
class ConsensusConfig:
    """Run parameters for :func:`run_consensus`.

    ``init`` is ``"auto"`` (seeded random when noise is on, fixed-seed random
    when off), ``"seeded"``, ``"fixed"``, or an explicit ``(m, d)`` array.
    ``input_bound`` is the adjacency constant handed to the privacy
    accountant (per-round input signals must stay below it in norm).
    """

    horizon: int
    chi: Schedule
    gamma: Schedule
    noise: Schedule | None = None
    noise_enabled: bool = True
    seed: int = 0
    init: object = "auto"
    input_bound: float = 1.0
    override_certificates: bool = False
    backend: str | None = None
    max_chunk: int = 4096
    force_reference_path: bool = False

    def __post_init__(self):
        if int(self.horizon) < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        self.horizon = int(self.horizon)
        if self.noise_enabled and self.noise is None:
            raise ConfigError("noise_enabled requires a noise schedule")
        if not float(self.input_bound) > 0:
            raise ConfigError(
                f"input_bound must be positive, got {self.input_bound}")
        if int(self.max_chunk) < 1:
            raise ConfigError(f"max_chunk must be >= 1, got {self.max_chunk}")
        self.max_chunk = int(self.max_chunk)


def consensus_step(states, topology, domain, chi_k, gamma_k,
                   noises=None, inputs=None):
    """One synchronous consensus round; pure reference implementation.

    ``states`` is ``(m, d)``; ``noises`` and ``inputs`` are ``(m, d)`` or
    ``None`` for zeros.  Every agent mixes its neighbors' noisy observations
    (the ``- w_ii * noise_i`` term removes the agent's own broadcast noise,
    which it never hears), adds its input, and projects onto the shared set.
    """
    states = np.asarray(states, dtype=float)
    m = topology.size
    if states.shape != (m, domain.dim):
        raise DimensionMismatchError(
            f"states have shape {states.shape}, expected {(m, domain.dim)}")
    if not (chi_k > 0 and gamma_k > 0):
        raise ConfigError(
            f"schedule values must be positive, got chi={chi_k}, "
            f"gamma={gamma_k}")
    noises = (np.zeros_like(states) if noises is None
              else np.asarray(noises, dtype=float))
    inputs = (np.zeros_like(states) if inputs is None
              else np.asarray(inputs, dtype=float))
    if noises.shape != states.shape or inputs.shape != states.shape:
        raise DimensionMismatchError(
            "noises and inputs must match the state shape")
    weights = topology.array
    mixed = states + chi_k * (weights @ (states + noises)
                              - topology.diagonal[:, None] * noises)
    mixed = mixed + gamma_k * inputs
    return np.stack([domain.project(mixed[i]) for i in range(m)])


def _materialize_inputs(inputs, rounds, m, d, bound):
    """Input signals for the given rounds as an ``(n, m, d)`` block."""
    n = rounds.shape[0]
    if inputs is None:
        return np.zeros((n, m, d))
    if callable(inputs):
        block = np.stack(
            [np.asarray(inputs(int(k)), dtype=float) for k in rounds])
    else:
        block = np.broadcast_to(
            np.asarray(inputs, dtype=float), (n, m, d)).copy()
    if block.shape != (n, m, d):
        raise DimensionMismatchError(
            f"inputs materialized to shape {block.shape}, expected "
            f"{(n, m, d)}")
    worst = float(np.sqrt((block * block).sum(axis=2)).max())
    if worst > bound * (1.0 + 1e-12):
        raise ConfigError(
            f"input signal norm {worst:.6g} exceeds input_bound {bound}; "
            "raise input_bound so the privacy ledger stays valid")
    return block


def _resolve_init(config, domain, m):
    """Initial ``(m, d)`` states plus the mode actually used."""
    init = config.init
    if isinstance(init, np.ndarray):
        if init.shape != (m, domain.dim):
            raise DimensionMismatchError(
                f"init array has shape {init.shape}, expected "
                f"{(m, domain.dim)}")
        return np.stack([domain.project(init[i]) for i in range(m)]), "array"
    if init == "auto":
        init = "seeded" if config.noise_enabled else "fixed"
    if init == "seeded":
        rng = np.random.default_rng(
            np.random.SeedSequence((config.seed, INIT_STREAM)))
    elif init == "fixed":
        rng = np.random.default_rng(FIXED_INIT_SEED)
    else:
        raise ConfigError(
            f"init must be 'auto', 'seeded', 'fixed' or an array, "
            f"got {init!r}")
    return np.stack([domain.sample(rng) for _ in range(m)]), init


def _certify(config):
    """Schedule certificates; raises unless all pass or overridden."""
    certs = {"schedules": validate_consensus_schedules(config.chi,
                                                       config.gamma)}
    if config.noise_enabled:
        certs["privacy"] = validate_privacy_finiteness(
            config.gamma, config.noise, chi=config.chi)
    ok = all(c.ok for c in certs.values())
    if not ok and not config.override_certificates:
        failed = {name: c.failed_names() for name, c in certs.items()
                  if not c.ok}
        raise CertificateError(
            f"schedule certificate failed: {failed}; pass "
            "override_certificates=True to run anyway")
    return certs, ok


def run_consensus(topology, domain, config, inputs=None):
    """Execute a consensus run and sample diagnostics on the log grid.

    Columns: ``cons_max`` (worst disagreement), the two running sums
    ``sum_chi_err_sq`` (``sum_k chi_k sum_i ||x_i - xbar||^2``) and
    ``sum_gamma_err`` (``sum_k gamma_k sum_i ||x_i - xbar||``) whose
    finiteness the convergence theory asserts, ``noise_rms`` (that round's
    drawn noise), the accountant's ``eps_hat`` partial sum (``inf`` with
    noise disabled), and the noise scale ``nu_k``.
    """
    m, d = topology.size, domain.dim
    certs, cert_ok = _certify(config)
    spec = (None if config.force_reference_path else domain.kernel_spec())
    backend = (active_backend(config.backend) if spec is not None
               else "reference")
    kernels = get_kernels(config.backend) if spec is not None else None

    state, init_mode = _resolve_init(config, domain, m)
    rng_noise = np.random.default_rng(
        np.random.SeedSequence((config.seed, NOISE_STREAM)))

    ks = log_grid(config.horizon)
    eps = (consensus_epsilon_trace(
               config.chi, config.gamma, config.noise,
               input_bound=config.input_bound,
               min_self_weight=topology.min_self_weight, ks=ks)
           if config.noise_enabled else np.full(ks.shape, np.inf))
    nu_col = (config.noise.values(ks) if config.noise is not None
              else np.full(ks.shape, np.nan))

    cols = {name: np.empty(ks.shape[0])
            for name in ("cons_max", "sum_chi_err_sq", "sum_gamma_err",
                         "noise_rms")}
    weights, wdiag = topology.array, topology.diagonal
    acc_chi_sq = acc_gamma = 0.0
    last_noise = np.zeros((m, d))
    prev = 0
    for idx, mark in enumerate(ks):
        for lo, hi in segment_rounds(prev, int(mark), config.max_chunk):
            rounds = np.arange(lo + 1, hi + 1)
            n = rounds.shape[0]
            chis = config.chi.values(rounds)
            gammas = config.gamma.values(rounds)
            if config.noise_enabled:
                scales = config.noise.values(rounds)
                block = laplace_from_uniform(
                    rng_noise.random((n, m * d)), scales[:, None])
                noise = block.reshape(n, m, d)
            else:
                noise = np.zeros((n, m, d))
            inp = _materialize_inputs(inputs, rounds, m, d,
                                      config.input_bound)
            if kernels is not None:
                state, a1, a2 = kernels.consensus_chunk(
                    state, weights, wdiag, spec[0], spec[1], spec[2],
                    chis, gammas, noise, inp)
            else:
                a1 = a2 = 0.0
                for t in range(n):
                    state = consensus_step(
                        state, topology, domain, float(chis[t]),
                        float(gammas[t]), noise[t], inp[t])
                    dev = state - state.mean(axis=0)
                    sq = (dev * dev).sum(axis=1)
                    a1 += float(chis[t]) * float(sq.sum())
                    a2 += float(gammas[t]) * float(np.sqrt(sq).sum())
            acc_chi_sq += a1
            acc_gamma += a2
            last_noise = noise[-1]
        dev = state - state.mean(axis=0)
        cols["cons_max"][idx] = float(
            np.sqrt((dev * dev).sum(axis=1)).max())
        cols["sum_chi_err_sq"][idx] = acc_chi_sq
        cols["sum_gamma_err"][idx] = acc_gamma
        cols["noise_rms"][idx] = (
            float(np.sqrt((last_noise * last_noise).mean()))
            if config.noise_enabled else 0.0)
        prev = int(mark)

    cols["eps_hat"] = eps
    cols["nu_k"] = nu_col
    metadata = {
        "mode": "consensus",
        "agents": m,
        "dim": d,
        "horizon": config.horizon,
        "seed": config.seed,
        "backend": backend,
        "init": init_mode,
        "noise_enabled": config.noise_enabled,
        "input_bound": config.input_bound,
        "inputs": ("none" if inputs is None
                   else "callable" if callable(inputs) else "constant"),
        "schedules": {
            "chi": config.chi.to_dict(),
            "gamma": config.gamma.to_dict(),
            "noise": config.noise.to_dict() if config.noise else None,
        },
        "topology": {
            "size": m,
            "min_self_weight": topology.min_self_weight,
            "contraction_factor": topology.contraction_factor,
        },
        "domain": repr(domain),
        "certificate_ok": cert_ok,
        "certificates": {k: c.to_dict() for k, c in certs.items()},
        "final_state": state.tolist(),
    }
    return RunMetrics(mode="consensus", ks=ks, columns=cols,
                      metadata=metadata)
