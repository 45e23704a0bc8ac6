"""Step-size and noise schedules, convergence certificates, Laplace noise.

Rounds are indexed from ``k = 1``.  The workhorse is the power-law family

* :class:`PowerSchedule` -- ``scale / (1 + damping * k**exponent)`` (or the
  undamped ``scale / k**exponent``), decaying with asymptotic exponent
  ``exponent``;
* :class:`NoiseSchedule` -- ``base * (1 + growth * k**exponent)``, a
  nondecreasing Laplace scale;
* :class:`ConstantSchedule` / :class:`GeometricSchedule` -- baseline shapes
  that deliberately fall outside the certified family.

Certificates
------------
The convergence and privacy guarantees of the engines hold when the schedule
exponents sit in specific open ranges.  The ``validate_*`` functions check
those ranges symbolically (on the asymptotic exponents, not by numeric
summation) and return a :class:`Certificate` listing every condition with its
verdict.  Engines refuse to run on a false certificate unless explicitly
overridden; baseline shapes yield a false certificate by construction.

Conditions checked, with ``s, u, t, q`` the exponents of the mixing step
``chi``, tracking step ``theta``, gradient step ``gamma`` and noise scale:

* consensus engine: ``0.5 < s < t <= 1`` and ``2t - s > 1``;
* constrained engine: ``0.5 < s < u < t <= 1``, ``2u - s > 1``, ``2t - u > 1``;
* privacy-loss finiteness: ``t + q > 1`` (consensus) or ``u + q > 1``
  (optimizer), plus noise-vs-mixing compatibility ``2s - 2q > 1`` when the
  mixing schedule is supplied.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidScheduleError


class Schedule:
    """A positive function of the round index ``k >= 1``."""

    #: asymptotic decay exponent p with value(k) ~ k**-p (0 for non-decaying)
    exponent: float

    def value(self, k):
        # Delegating to the vectorized path keeps scalar and array
        # evaluations bitwise identical (python and numpy pow may differ in
        # the last ulp).
        return float(self.values(np.array([k], dtype=float))[0])

    def values(self, ks):
        raise NotImplementedError

    def to_dict(self):
        raise NotImplementedError


class PowerSchedule(Schedule):
    """``scale / (1 + damping * k**exponent)``; ``damping=0`` means the
    undamped form ``scale / k**exponent``.

    The damped form starts near ``scale`` and decays like
    ``(scale/damping) * k**-exponent``; both share the asymptotic exponent.
    """

    def __init__(self, scale, exponent, damping=0.0):
        scale = float(scale)
        exponent = float(exponent)
        damping = float(damping)
        if scale <= 0:
            raise InvalidScheduleError(f"scale must be positive, got {scale}")
        if not (0 < exponent <= 1):
            raise InvalidScheduleError(
                f"decay exponent must lie in (0, 1], got {exponent}")
        if damping < 0:
            raise InvalidScheduleError(f"damping must be >= 0, got {damping}")
        self.scale = scale
        self.exponent = exponent
        self.damping = damping

    def values(self, ks):
        ks = np.asarray(ks, dtype=float)
        if np.any(ks < 1):
            raise InvalidScheduleError("round indices start at 1")
        if self.damping == 0.0:
            return self.scale / ks**self.exponent
        return self.scale / (1.0 + self.damping * ks**self.exponent)

    def to_dict(self):
        return {"kind": "power", "scale": self.scale,
                "exponent": self.exponent, "damping": self.damping}

    def __repr__(self):
        if self.damping == 0.0:
            return f"PowerSchedule({self.scale}/k^{self.exponent})"
        return (f"PowerSchedule({self.scale}/(1 + {self.damping}"
                f"*k^{self.exponent}))")


class ConstantSchedule(Schedule):
    """A constant positive value; exponent 0 (never certified)."""

    exponent = 0.0

    def __init__(self, level):
        level = float(level)
        if level <= 0:
            raise InvalidScheduleError(f"level must be positive, got {level}")
        self.level = level

    def values(self, ks):
        ks = np.asarray(ks, dtype=float)
        if np.any(ks < 1):
            raise InvalidScheduleError("round indices start at 1")
        return np.full(ks.shape, self.level)

    def to_dict(self):
        return {"kind": "constant", "level": self.level}

    def __repr__(self):
        return f"ConstantSchedule({self.level})"


class ZeroSchedule(Schedule):
    """Identically zero: switches a term off entirely (e.g. the tracker
    damping in the no-privacy baseline).  Never certified."""

    exponent = 0.0

    def values(self, ks):
        ks = np.asarray(ks, dtype=float)
        if np.any(ks < 1):
            raise InvalidScheduleError("round indices start at 1")
        return np.zeros(ks.shape)

    def to_dict(self):
        return {"kind": "zero"}

    def __repr__(self):
        return "ZeroSchedule()"


class GeometricSchedule(Schedule):
    """``scale * ratio**(k-1)`` -- the geometrically decaying baseline step."""

    exponent = 0.0  # faster than any power law; deliberately uncertified

    def __init__(self, scale, ratio):
        scale = float(scale)
        ratio = float(ratio)
        if scale <= 0:
            raise InvalidScheduleError(f"scale must be positive, got {scale}")
        if not (0 < ratio < 1):
            raise InvalidScheduleError(f"ratio must be in (0, 1), got {ratio}")
        self.scale = scale
        self.ratio = ratio

    def values(self, ks):
        ks = np.asarray(ks, dtype=float)
        if np.any(ks < 1):
            raise InvalidScheduleError("round indices start at 1")
        return self.scale * self.ratio ** (ks - 1.0)

    def to_dict(self):
        return {"kind": "geometric", "scale": self.scale, "ratio": self.ratio}

    def __repr__(self):
        return f"GeometricSchedule({self.scale}*{self.ratio}^(k-1))"


class NoiseSchedule(Schedule):
    """Laplace scale ``base * (1 + growth * k**exponent)``, nondecreasing.

    ``growth = 0`` gives a constant scale (its growth exponent is then 0
    regardless of the constructor argument).
    """

    def __init__(self, base, growth=0.0, exponent=0.0):
        base = float(base)
        growth = float(growth)
        exponent = float(exponent)
        if base <= 0:
            raise InvalidScheduleError(f"base must be positive, got {base}")
        if growth < 0:
            raise InvalidScheduleError(f"growth must be >= 0, got {growth}")
        if growth > 0 and not (0 < exponent < 1):
            raise InvalidScheduleError(
                f"growth exponent must lie in (0, 1) when growth > 0, "
                f"got {exponent}")
        self.base = base
        self.growth = growth
        self.exponent = exponent if growth > 0 else 0.0

    def values(self, ks):
        ks = np.asarray(ks, dtype=float)
        if np.any(ks < 1):
            raise InvalidScheduleError("round indices start at 1")
        if self.growth == 0.0:
            return np.full(ks.shape, self.base)
        return self.base * (1.0 + self.growth * ks**self.exponent)

    def to_dict(self):
        return {"kind": "noise", "base": self.base, "growth": self.growth,
                "exponent": self.exponent}

    def __repr__(self):
        if self.growth == 0.0:
            return f"NoiseSchedule({self.base})"
        return f"NoiseSchedule({self.base}*(1 + {self.growth}*k^{self.exponent}))"


# ---------------------------------------------------------------------------
# certificates


@dataclass
class Condition:
    """One named inequality with its verdict and a human-readable detail."""

    passed: bool
    detail: str


@dataclass
class Certificate:
    """Outcome of a schedule validation: all conditions with verdicts."""

    ok: bool
    conditions: dict = field(default_factory=dict)
    note: str = ""

    def failed_names(self):
        return [k for k, c in self.conditions.items() if not c.passed]

    def to_dict(self):
        return {
            "ok": self.ok,
            "note": self.note,
            "conditions": {k: {"passed": c.passed, "detail": c.detail}
                           for k, c in self.conditions.items()},
        }

    def summary(self):
        lines = [f"certificate: {'OK' if self.ok else 'FAILED'}"]
        if self.note:
            lines.append(f"  note: {self.note}")
        for name, c in self.conditions.items():
            mark = "pass" if c.passed else "FAIL"
            lines.append(f"  [{mark}] {name}: {c.detail}")
        return "\n".join(lines)


def _finish(conds, note=""):
    return Certificate(ok=all(c.passed for c in conds.values()),
                       conditions=conds, note=note)


def _power_form(conds, name, sched):
    """Record whether ``sched`` is in the certified power family."""
    ok = isinstance(sched, PowerSchedule)
    conds[f"{name}_power_form"] = Condition(
        ok, f"{name} is {type(sched).__name__}; certificates cover the "
            "power-law family only" if not ok else
            f"{name} ~ k^-{sched.exponent}")
    return ok


def validate_consensus_schedules(chi, gamma):
    """Certificate for the consensus engine's (chi, gamma) pair.

    Conditions: ``0.5 < s``, ``s < t``, ``t <= 1`` and ``2t - s > 1`` with
    ``s = chi.exponent``, ``t = gamma.exponent``.
    """
    conds = {}
    if not (_power_form(conds, "chi", chi) & _power_form(conds, "gamma", gamma)):
        return _finish(conds, note="uncertified schedule family")
    s, t = chi.exponent, gamma.exponent
    conds["chi_square_summable"] = Condition(
        s > 0.5, f"mixing exponent s={s} must exceed 1/2")
    conds["gamma_below_chi"] = Condition(
        s < t, f"step exponent t={t} must exceed mixing exponent s={s}")
    conds["gamma_nonsummable"] = Condition(
        t <= 1.0, f"step exponent t={t} must not exceed 1")
    conds["step_sq_over_mixing_summable"] = Condition(
        2 * t - s > 1.0, f"need 2t - s > 1, got {2 * t - s:.3f}")
    return _finish(conds)


def validate_optimizer_schedules(chi, theta, gamma):
    """Certificate for the constrained engine's (chi, theta, gamma) triple.

    Conditions: ``0.5 < s < u < t <= 1``, ``2u - s > 1`` and ``2t - u > 1``
    with ``s, u, t`` the exponents of chi, theta, gamma.
    """
    conds = {}
    forms = (_power_form(conds, "chi", chi)
             & _power_form(conds, "theta", theta)
             & _power_form(conds, "gamma", gamma))
    if not forms:
        return _finish(conds, note="uncertified schedule family")
    s, u, t = chi.exponent, theta.exponent, gamma.exponent
    conds["chi_square_summable"] = Condition(
        s > 0.5, f"mixing exponent s={s} must exceed 1/2")
    conds["theta_below_chi"] = Condition(
        s < u, f"tracking exponent u={u} must exceed mixing exponent s={s}")
    conds["gamma_below_theta"] = Condition(
        u < t, f"step exponent t={t} must exceed tracking exponent u={u}")
    conds["gamma_nonsummable"] = Condition(
        t <= 1.0, f"step exponent t={t} must not exceed 1")
    conds["tracking_sq_over_mixing_summable"] = Condition(
        2 * u - s > 1.0, f"need 2u - s > 1, got {2 * u - s:.3f}")
    conds["step_sq_over_tracking_summable"] = Condition(
        2 * t - u > 1.0, f"need 2t - u > 1, got {2 * t - u:.3f}")
    return _finish(conds)


def validate_privacy_finiteness(step, noise, chi=None):
    """Certificate that the accumulated privacy loss stays finite as the
    horizon grows.

    ``step`` is the schedule whose per-round magnitude drives the sensitivity
    increments: gamma for the consensus engine, theta for the constrained
    engine.  Requires ``step.exponent + noise.exponent > 1``.  When the mixing
    schedule ``chi`` is supplied, also checks the noise-growth compatibility
    ``2*chi.exponent - 2*noise.exponent > 1`` needed by the engines'
    convergence analysis.
    """
    conds = {}
    if not _power_form(conds, "step", step):
        return _finish(conds, note="uncertified schedule family")
    if not isinstance(noise, NoiseSchedule):
        conds["noise_form"] = Condition(
            False, f"noise is {type(noise).__name__}, expected NoiseSchedule")
        return _finish(conds, note="uncertified schedule family")
    p, q = step.exponent, noise.exponent
    conds["loss_increments_summable"] = Condition(
        p + q > 1.0,
        f"need step exponent + noise exponent > 1, got {p + q:.3f} "
        + ("(constant noise scale cannot absorb a non-summable step)"
           if q == 0.0 else ""))
    if chi is not None:
        if not _power_form(conds, "chi", chi):
            return _finish(conds, note="uncertified schedule family")
        s = chi.exponent
        conds["noise_growth_vs_mixing"] = Condition(
            2 * s - 2 * q > 1.0,
            f"need 2s - 2q > 1 with s={s}, q={q}, got {2 * s - 2 * q:.3f}")
    return _finish(conds)


# ---------------------------------------------------------------------------
# Laplace sampling


def laplace_from_uniform(u, scale):
    """Map uniform ``[0, 1)`` variates to zero-mean Laplace draws.

    ``x = -scale * sign(u - 1/2) * ln(1 - 2|u - 1/2|)`` is the inverse CDF;
    the log argument is clamped away from zero so the measure-zero edge draw
    cannot produce an infinity.  ``scale`` broadcasts against ``u``, so a
    block of pre-drawn uniforms can be scaled row-per-round.
    """
    scale = np.asarray(scale, dtype=float)
    if np.any(scale < 0):
        raise InvalidScheduleError("scale must be >= 0")
    c = np.asarray(u, dtype=float) - 0.5
    inner = 1.0 - 2.0 * np.abs(c)
    np.clip(inner, np.finfo(float).tiny, None, out=inner)
    return -scale * np.sign(c) * np.log(inner)


def sample_laplace(rng, scale, size):
    """Zero-mean Laplace draws via the inverse CDF, one uniform per scalar.

    Uses exactly ``prod(size)`` consecutive ``rng.random`` variates, which is
    what makes noise streams reproducible across chunked and unchunked
    execution.
    """
    if np.ndim(scale) != 0:
        raise InvalidScheduleError("scale must be a scalar here")
    return laplace_from_uniform(rng.random(size), scale)
