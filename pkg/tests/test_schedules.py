"""Schedule values, certificates, and Laplace sampling."""

import numpy as np
import pytest
from scipy import stats

from dpopt.errors import InvalidScheduleError
from dpopt.schedules import (
    ConstantSchedule,
    GeometricSchedule,
    NoiseSchedule,
    PowerSchedule,
    sample_laplace,
    validate_consensus_schedules,
    validate_optimizer_schedules,
    validate_privacy_finiteness,
)


def test_power_schedule_values():
    s = PowerSchedule(scale=1.0, exponent=0.9, damping=0.1)
    assert s.value(1) == pytest.approx(1.0 / 1.1)
    assert s.value(10) == pytest.approx(1.0 / (1.0 + 0.1 * 10**0.9))
    undamped = PowerSchedule(scale=0.2, exponent=0.7)
    assert undamped.value(1) == pytest.approx(0.2)
    assert undamped.value(16) == pytest.approx(0.2 / 16**0.7)


def test_noise_schedule_values():
    nu = NoiseSchedule(base=1.0, growth=0.1, exponent=0.2)
    assert nu.value(1) == pytest.approx(1.1)
    assert nu.value(32) == pytest.approx(1.0 + 0.1 * 32**0.2)
    const = NoiseSchedule(base=0.5)
    assert const.value(1) == const.value(10**6) == 0.5
    assert const.exponent == 0.0


def test_geometric_and_constant_values():
    g = GeometricSchedule(scale=0.09, ratio=0.995)
    assert g.value(1) == pytest.approx(0.09)
    assert g.value(3) == pytest.approx(0.09 * 0.995**2)
    c = ConstantSchedule(2.5)
    assert c.value(7) == 2.5


@pytest.mark.parametrize(
    "sched",
    [
        PowerSchedule(1.0, 0.9, 0.1),
        PowerSchedule(0.3, 0.6),
        NoiseSchedule(1.0, 0.1, 0.2),
        GeometricSchedule(0.09, 0.995),
        ConstantSchedule(1.5),
    ],
)
def test_vectorized_values_match_scalar(sched):
    ks = np.arange(1, 200)
    vec = sched.values(ks)
    scal = np.array([sched.value(int(k)) for k in ks])
    assert np.array_equal(vec, scal)


def test_round_index_starts_at_one():
    s = PowerSchedule(1.0, 0.9)
    with pytest.raises(InvalidScheduleError):
        s.value(0)
    with pytest.raises(InvalidScheduleError):
        s.values(np.array([0, 1, 2]))


def test_parameter_validation():
    with pytest.raises(InvalidScheduleError):
        PowerSchedule(scale=-1.0, exponent=0.9)
    with pytest.raises(InvalidScheduleError):
        PowerSchedule(scale=1.0, exponent=0.0)
    with pytest.raises(InvalidScheduleError):
        PowerSchedule(scale=1.0, exponent=1.2)
    with pytest.raises(InvalidScheduleError):
        PowerSchedule(scale=1.0, exponent=0.9, damping=-0.1)
    with pytest.raises(InvalidScheduleError):
        GeometricSchedule(scale=1.0, ratio=1.0)
    with pytest.raises(InvalidScheduleError):
        NoiseSchedule(base=0.0)
    with pytest.raises(InvalidScheduleError):
        NoiseSchedule(base=1.0, growth=0.1, exponent=1.5)
    with pytest.raises(InvalidScheduleError):
        ConstantSchedule(0.0)


# ---------------------------------------------------------------------------
# certificates


def sched(exp, scale=1.0, damping=0.1):
    return PowerSchedule(scale=scale, exponent=exp, damping=damping)


def test_consensus_certificate_passes_on_reference_exponents():
    cert = validate_consensus_schedules(sched(0.7), sched(0.9))
    assert cert.ok
    assert cert.failed_names() == []


def test_consensus_certificate_boundary_cases():
    # s = 0.5 exactly: square-summability fails (strict inequality)
    cert = validate_consensus_schedules(sched(0.5), sched(0.9))
    assert not cert.ok
    assert "chi_square_summable" in cert.failed_names()

    # 2t - s = 1 exactly: ratio summability fails
    cert = validate_consensus_schedules(sched(0.9), sched(0.95))
    assert not cert.ok
    assert "step_sq_over_mixing_summable" in cert.failed_names()

    # s >= t: ordering fails
    cert = validate_consensus_schedules(sched(0.9), sched(0.8))
    assert not cert.ok
    assert "gamma_below_chi" in cert.failed_names()


def test_optimizer_certificate_reference_exponents():
    cert = validate_optimizer_schedules(
        chi=sched(0.9), theta=sched(0.96), gamma=sched(1.0))
    assert cert.ok

    # swap theta and gamma: ordering breaks
    cert = validate_optimizer_schedules(
        chi=sched(0.9), theta=sched(1.0), gamma=sched(0.96))
    assert not cert.ok
    assert "gamma_below_theta" in cert.failed_names()

    # 2u - s = 1 exactly
    cert = validate_optimizer_schedules(
        chi=sched(0.9), theta=sched(0.95), gamma=sched(1.0))
    assert not cert.ok
    assert "tracking_sq_over_mixing_summable" in cert.failed_names()


def test_privacy_finiteness_certificate():
    growing = NoiseSchedule(base=1.0, growth=0.1, exponent=0.2)
    cert = validate_privacy_finiteness(sched(1.0), growing)
    assert cert.ok

    # constant noise cannot absorb a non-summable step schedule
    cert = validate_privacy_finiteness(sched(1.0), NoiseSchedule(base=1.0))
    assert not cert.ok
    assert "loss_increments_summable" in cert.failed_names()

    # mixing compatibility: 2s - 2q > 1
    cert = validate_privacy_finiteness(sched(0.96), growing, chi=sched(0.9))
    assert cert.ok
    cert = validate_privacy_finiteness(sched(0.96), growing, chi=sched(0.6))
    assert not cert.ok
    assert "noise_growth_vs_mixing" in cert.failed_names()


def test_uncertified_families_fail_cleanly():
    cert = validate_consensus_schedules(ConstantSchedule(1.0), sched(0.9))
    assert not cert.ok
    assert "uncertified" in cert.note

    cert = validate_optimizer_schedules(
        ConstantSchedule(1.0), ConstantSchedule(1.0),
        GeometricSchedule(0.09, 0.995))
    assert not cert.ok

    cert = validate_privacy_finiteness(GeometricSchedule(0.09, 0.995),
                                       NoiseSchedule(base=1.0))
    assert not cert.ok


def test_certificate_summary_lists_conditions():
    cert = validate_consensus_schedules(sched(0.7), sched(0.9))
    text = cert.summary()
    assert "OK" in text
    assert "chi_square_summable" in text
    assert text.count("[pass]") == len(cert.conditions)


# ---------------------------------------------------------------------------
# Laplace sampling


def test_laplace_moments_and_distribution():
    rng = np.random.default_rng(100)
    nu = 1.7
    x = sample_laplace(rng, nu, 200_000)
    assert abs(float(np.mean(x))) < 0.02
    assert float(np.var(x)) == pytest.approx(2 * nu**2, rel=0.02)
    # two-sided Kolmogorov-Smirnov against the target law
    stat = stats.kstest(x[:20_000], stats.laplace(scale=nu).cdf)
    assert stat.pvalue > 0.01


def test_laplace_stream_is_chunking_invariant():
    # drawing (5, 4) in one call equals (2, 4) then (3, 4) on a fresh rng
    a = sample_laplace(np.random.default_rng(5), 1.3, (5, 4))
    rng = np.random.default_rng(5)
    b = np.concatenate([sample_laplace(rng, 1.3, (2, 4)),
                        sample_laplace(rng, 1.3, (3, 4))], axis=0)
    assert np.array_equal(a, b)


def test_laplace_zero_scale_and_validation():
    rng = np.random.default_rng(0)
    assert np.array_equal(sample_laplace(rng, 0.0, 10), np.zeros(10))
    with pytest.raises(InvalidScheduleError):
        sample_laplace(rng, -1.0, 3)
