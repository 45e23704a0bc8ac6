"""Consensus engine: hand examples, invariants, and run diagnostics."""

import numpy as np
import pytest

from dpopt.backend import numba_available
from dpopt.consensus import ConsensusConfig, consensus_step, run_consensus
from dpopt.errors import CertificateError, ConfigError
from dpopt.schedules import ConstantSchedule, NoiseSchedule, PowerSchedule
from dpopt.sets import Box, FullSpace
from dpopt.topology import metropolis_weights


CHI = PowerSchedule(1.0, 0.9, damping=0.1)
GAMMA = PowerSchedule(0.1, 1.0, damping=0.1)
NU = NoiseSchedule(1.0, 0.1, 0.2)


def pair_topology():
    return metropolis_weights(2, [(0, 1)])


def ring_topology(m=6, scale=0.9):
    edges = [(i, (i + 1) % m) for i in range(m)] + [(0, 3)]
    return metropolis_weights(m, edges, scale=scale)


def box_config(**kwargs):
    defaults = dict(horizon=200, chi=CHI, gamma=GAMMA, noise=NU, seed=0)
    defaults.update(kwargs)
    return ConsensusConfig(**defaults)


# The running sums are accumulated in execution order, so regrouping the
# rounds into different chunks (or a different backend's SIMD sum) moves
# their last bits; every state-derived column must stay exactly equal.
EXACT_COLUMNS = ("cons_max", "noise_rms", "eps_hat", "nu_k")
SUMMED_COLUMNS = ("sum_chi_err_sq", "sum_gamma_err")


def assert_runs_equivalent(a, b):
    for name in EXACT_COLUMNS:
        assert np.array_equal(a.columns[name], b.columns[name],
                              equal_nan=True), name
    for name in SUMMED_COLUMNS:
        assert np.allclose(a.columns[name], b.columns[name],
                           rtol=1e-12, atol=1e-12), name
    assert a.metadata["final_state"] == b.metadata["final_state"]


# ---------------------------------------------------------------------------
# single-step reference semantics


def test_step_fixed_point_on_agreement():
    topo = pair_topology()
    states = np.array([[3.0, -1.0], [3.0, -1.0]])
    out = consensus_step(states, topo, FullSpace(2), 0.5, 0.1)
    assert np.allclose(out, states, atol=1e-15)


def test_step_hand_example_full_space():
    topo = pair_topology()
    out = consensus_step(np.array([[0.0], [2.0]]), topo, FullSpace(1),
                         0.5, 1.0)
    assert np.allclose(out, [[0.5], [1.5]], atol=1e-15)


def test_step_hand_example_clipped_by_box():
    topo = pair_topology()
    out = consensus_step(np.array([[0.0], [2.0]]), topo,
                         Box([0.0], [1.0]), 0.5, 1.0)
    assert np.allclose(out, [[0.5], [1.0]], atol=1e-15)


def test_step_own_noise_never_fed_back():
    # Agent i's update must not involve its own broadcast noise: with only
    # agent 0 noisy, agent 0's new state equals the zero-noise value.
    topo = pair_topology()
    states = np.array([[0.0], [2.0]])
    noises = np.array([[5.0], [0.0]])
    noisy = consensus_step(states, topo, FullSpace(1), 0.5, 1.0,
                           noises=noises)
    clean = consensus_step(states, topo, FullSpace(1), 0.5, 1.0)
    assert noisy[0, 0] == pytest.approx(clean[0, 0], abs=1e-15)
    # agent 1 hears agent 0's noise through the mixing weight
    assert noisy[1, 0] == pytest.approx(clean[1, 0] + 0.5 * 0.5 * 5.0,
                                        abs=1e-15)


def test_step_applies_inputs_with_gamma():
    topo = pair_topology()
    out = consensus_step(np.array([[1.0], [1.0]]), topo, FullSpace(1),
                         0.5, 0.25, inputs=np.array([[2.0], [-2.0]]))
    assert np.allclose(out, [[1.5], [0.5]], atol=1e-15)


def test_step_mean_preserved_unconstrained():
    rng = np.random.default_rng(3)
    topo = ring_topology()
    states = rng.normal(size=(6, 3))
    out = states
    for _ in range(50):
        out = consensus_step(out, topo, FullSpace(3), 0.7, 1.0)
    assert np.allclose(out.mean(axis=0), states.mean(axis=0), atol=1e-12)


def test_step_rejects_bad_shapes_and_schedule_values():
    topo = pair_topology()
    from dpopt.errors import DimensionMismatchError

    with pytest.raises(DimensionMismatchError):
        consensus_step(np.zeros((3, 1)), topo, FullSpace(1), 0.5, 1.0)
    with pytest.raises(ConfigError):
        consensus_step(np.zeros((2, 1)), topo, FullSpace(1), 0.0, 1.0)


# ---------------------------------------------------------------------------
# full runs


def test_zero_noise_contraction():
    topo = ring_topology()
    dom = Box(np.zeros(2), np.full(2, 20.0))
    cfg = box_config(horizon=10_000, noise=None, noise_enabled=False)
    run = run_consensus(topo, dom, cfg)
    assert run.at(10_000, "cons_max") < 1e-3 * run.at(1, "cons_max")
    assert np.isinf(run.at(10_000, "eps_hat"))
    assert np.isnan(run.at(10_000, "nu_k"))


def test_noisy_median_consensus_decreases():
    # The median-over-seeds disagreement curve must drop by 10x between the
    # first decade of rounds and the last.
    topo = ring_topology()
    dom = Box(np.zeros(2), np.full(2, 20.0))
    runs = [run_consensus(topo, dom, box_config(horizon=10_000, seed=seed))
            for seed in range(20)]
    ks = runs[0].ks
    med = np.median(np.stack([r.columns["cons_max"] for r in runs]), axis=0)
    first = np.median(med[ks <= 10])
    last = np.median(med[ks > 1000])
    assert last < first / 10.0


def test_frozen_noisy_run_values():
    # Regression anchor: exact values frozen from a verified run so that
    # refactors of the kernels or the noise stream are caught immediately.
    topo = ring_topology()
    dom = Box(np.zeros(2), np.full(2, 20.0))
    run = run_consensus(topo, dom, box_config(horizon=2000, seed=5))
    assert run.at(2000, "cons_max") == pytest.approx(
        0.054072046543233394, rel=1e-12)
    assert run.at(2000, "eps_hat") == pytest.approx(
        8.666636124609035, rel=1e-12)
    assert run.at(2000, "sum_chi_err_sq") == pytest.approx(
        150.53246318815275, rel=1e-12)
    assert run.at(2000, "sum_gamma_err") == pytest.approx(
        10.426352482124852, rel=1e-12)


def test_running_sums_are_nondecreasing():
    topo = ring_topology()
    dom = Box(np.zeros(2), np.full(2, 20.0))
    run = run_consensus(topo, dom, box_config(horizon=500, seed=1))
    for name in ("sum_chi_err_sq", "sum_gamma_err", "eps_hat"):
        col = run.columns[name]
        assert (np.diff(col) >= -1e-12).all(), name


def test_final_state_feasible():
    topo = ring_topology()
    dom = Box(np.zeros(2), np.full(2, 20.0))
    run = run_consensus(topo, dom, box_config(horizon=300, seed=2))
    final = np.asarray(run.metadata["final_state"])
    for row in final:
        assert dom.contains(row, tol=1e-12)


def test_bitwise_determinism():
    topo = ring_topology()
    dom = Box(np.zeros(2), np.full(2, 20.0))
    a = run_consensus(topo, dom, box_config(horizon=400, seed=9))
    b = run_consensus(topo, dom, box_config(horizon=400, seed=9))
    for name in a.columns:
        assert np.array_equal(a.columns[name], b.columns[name],
                              equal_nan=True), name
    assert a.metadata["final_state"] == b.metadata["final_state"]


def test_chunking_does_not_change_the_stream():
    topo = ring_topology()
    dom = Box(np.zeros(2), np.full(2, 20.0))
    a = run_consensus(topo, dom, box_config(horizon=400, seed=9))
    b = run_consensus(topo, dom, box_config(horizon=400, seed=9,
                                            max_chunk=7))
    assert_runs_equivalent(a, b)


def test_reference_path_matches_kernels():
    topo = ring_topology()
    dom = Box(np.zeros(2), np.full(2, 20.0))
    a = run_consensus(topo, dom, box_config(horizon=300, seed=4))
    b = run_consensus(topo, dom, box_config(horizon=300, seed=4,
                                            force_reference_path=True))
    assert b.metadata["backend"] == "reference"
    for name in a.columns:
        assert np.allclose(a.columns[name], b.columns[name],
                           rtol=1e-10, atol=1e-12), name


@pytest.mark.skipif(not numba_available(), reason="numba not installed")
def test_backends_agree():
    topo = ring_topology()
    dom = Box(np.zeros(2), np.full(2, 20.0))
    a = run_consensus(topo, dom, box_config(horizon=300, seed=4,
                                            backend="numpy"))
    b = run_consensus(topo, dom, box_config(horizon=300, seed=4,
                                            backend="numba"))
    assert_runs_equivalent(a, b)


def test_zero_noise_trajectory_ignores_seed():
    topo = ring_topology()
    dom = Box(np.zeros(2), np.full(2, 20.0))
    a = run_consensus(topo, dom, box_config(
        horizon=200, noise=None, noise_enabled=False, seed=0))
    b = run_consensus(topo, dom, box_config(
        horizon=200, noise=None, noise_enabled=False, seed=12345))
    assert a.metadata["init"] == "fixed"
    for name in a.columns:
        assert np.array_equal(a.columns[name], b.columns[name],
                              equal_nan=True), name


def test_explicit_init_array_is_projected():
    topo = pair_topology()
    dom = Box([0.0], [1.0])
    init = np.array([[5.0], [-3.0]])
    cfg = box_config(horizon=5, init=init, noise=None, noise_enabled=False)
    run = run_consensus(topo, dom, cfg)
    assert run.metadata["init"] == "array"
    final = np.asarray(run.metadata["final_state"])
    assert dom.contains(final[0], tol=1e-12)


def test_invalid_schedule_needs_override():
    topo = pair_topology()
    dom = FullSpace(1)
    bad_chi = PowerSchedule(1.0, 0.4)  # mixing decays too slowly to certify
    cfg = dict(horizon=50, chi=bad_chi, gamma=GAMMA, noise=None,
               noise_enabled=False)
    with pytest.raises(CertificateError):
        run_consensus(topo, dom, ConsensusConfig(**cfg))
    run = run_consensus(topo, dom, ConsensusConfig(
        override_certificates=True, **cfg))
    assert run.metadata["certificate_ok"] is False
    assert not run.metadata["certificates"]["schedules"]["ok"]


def test_inputs_beyond_bound_rejected():
    topo = pair_topology()
    dom = FullSpace(2)
    cfg = box_config(horizon=10, input_bound=1.0)
    big = np.full((2, 2), 3.0)
    with pytest.raises(ConfigError):
        run_consensus(topo, dom, cfg, inputs=big)


def test_callable_inputs_drive_the_run():
    topo = pair_topology()
    dom = FullSpace(1)

    def signal(k):
        return np.array([[1.0], [1.0]]) / k

    cfg = box_config(horizon=100, noise=None, noise_enabled=False,
                     init=np.zeros((2, 1)))
    driven = run_consensus(topo, dom, cfg, inputs=signal)
    idle = run_consensus(topo, dom, cfg)
    assert driven.metadata["inputs"] == "callable"
    d_final = np.asarray(driven.metadata["final_state"])
    i_final = np.asarray(idle.metadata["final_state"])
    assert np.abs(d_final - i_final).max() > 0.1


def test_noise_requires_schedule():
    with pytest.raises(ConfigError):
        ConsensusConfig(horizon=10, chi=CHI, gamma=GAMMA, noise=None,
                        noise_enabled=True)


def test_bigger_noise_buys_a_smaller_ledger():
    topo = pair_topology()
    dom = FullSpace(1)
    quiet = run_consensus(topo, dom, box_config(
        horizon=50, noise=NoiseSchedule(1.0, 0.1, 0.2)))
    loud = run_consensus(topo, dom, box_config(
        horizon=50, noise=NoiseSchedule(2.0, 0.1, 0.2)))
    assert loud.at(50, "eps_hat") < quiet.at(50, "eps_hat")
    assert np.isfinite(quiet.at(50, "eps_hat"))


def test_noise_rms_reflects_drawn_noise():
    topo = pair_topology()
    dom = FullSpace(1)
    noisy = run_consensus(topo, dom, box_config(horizon=50, seed=6))
    silent = run_consensus(topo, dom, box_config(
        horizon=50, noise=None, noise_enabled=False))
    assert (noisy.columns["noise_rms"] > 0).all()
    assert (silent.columns["noise_rms"] == 0).all()
