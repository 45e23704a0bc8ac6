"""Closed convex sets with exact Euclidean projections.

Every set used by the engines is one of the five shapes below.  Each exposes

* ``project(point)`` -- Euclidean projection, exactly idempotent: projecting a
  projected point returns it bit-for-bit,
* ``contains(point, tol)`` -- membership up to a distance tolerance,
* ``norm_bound()`` -- a radius ``D`` with ``||x|| <= D`` for every ``x`` in the
  set (raises :class:`~dpopt.errors.UnboundedSetError` when there is none),
* ``sample(rng)`` -- a uniform draw (rejection from a bounding box for the
  bounded sets; used for randomized initialization).

Exact idempotence matters because projected states are re-projected freely in
diagnostics; any drift there would register as spurious movement.  Closed-form
scaling projections are therefore followed by a "settle" loop that repeats the
projection map until it is a fixed point in floating-point arithmetic.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatchError, UnboundedSetError


def _as_vector(p, dim, name="point"):
    p = np.asarray(p, dtype=float)
    if p.shape != (dim,):
        raise DimensionMismatchError(
            f"{name} has shape {p.shape}, expected ({dim},)"
        )
    return p


# Relative slack (a few dozen ulps) under which a norm counts as "inside".
# Without it, rescaled points recomputed through an add/subtract round-trip
# can land an ulp outside the radius and re-projection would move them again.
_NORM_SLACK = 1.0 + 1e-14


def _cap_norm(v, radius):
    """Scale ``v`` onto the ball of the given radius, settling to an exact
    fixed point of the scaling map."""
    out = v
    for _ in range(8):
        n = float(np.linalg.norm(out))
        if n <= radius * _NORM_SLACK:
            return out
        out = out * (radius / n)
    return out


class ConvexSet:
    """Common interface; concrete sets implement ``project``/``norm_bound``."""

    dim: int

    def project(self, point):
        raise NotImplementedError

    def norm_bound(self):
        raise NotImplementedError

    def sample(self, rng):
        raise NotImplementedError

    def contains(self, point, tol=1e-9):
        p = _as_vector(point, self.dim)
        return float(np.linalg.norm(p - self.project(p))) <= tol

    # Kernel dispatch: subclasses that the array kernels understand override
    # ``kernel_spec`` to return (kind_code, a, b) with vector payloads.
    def kernel_spec(self):
        return None


class Box(ConvexSet):
    """Axis-aligned box ``{x : lower <= x <= upper}`` (componentwise)."""

    KIND = 0

    def __init__(self, lower, upper):
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise DimensionMismatchError(
                f"box bounds must be equal-length vectors, got {lower.shape} "
                f"and {upper.shape}"
            )
        if not (np.isfinite(lower).all() and np.isfinite(upper).all()):
            raise ValueError("box bounds must be finite")
        if np.any(lower > upper):
            raise ValueError("box needs lower <= upper in every coordinate")
        self.lower = lower
        self.upper = upper
        self.dim = lower.size

    @classmethod
    def cube(cls, dim, lo, hi):
        """The box ``[lo, hi]^dim``."""
        return cls(np.full(dim, float(lo)), np.full(dim, float(hi)))

    def project(self, point):
        p = _as_vector(point, self.dim)
        return np.clip(p, self.lower, self.upper)

    def norm_bound(self):
        return float(np.sqrt(np.sum(np.maximum(self.lower**2, self.upper**2))))

    def sample(self, rng):
        return self.lower + rng.random(self.dim) * (self.upper - self.lower)

    def kernel_spec(self):
        return (self.KIND, self.lower.copy(), self.upper.copy())

    def __repr__(self):
        return f"Box(lower={self.lower!r}, upper={self.upper!r})"


class Ball(ConvexSet):
    """Euclidean ball ``{x : ||x - center|| <= radius}``."""

    KIND = 1

    def __init__(self, center, radius):
        center = np.atleast_1d(np.asarray(center, dtype=float))
        radius = float(radius)
        if center.ndim != 1 or not np.isfinite(center).all():
            raise ValueError("ball center must be a finite vector")
        if not (radius > 0 and np.isfinite(radius)):
            raise ValueError(f"ball radius must be positive, got {radius}")
        self.center = center
        self.radius = radius
        self.dim = center.size

    def project(self, point):
        # Settle the composite map: adding the center back perturbs the
        # offset's norm at the ulp level, so test membership on the composite
        # rather than trusting a single rescale.
        out = _as_vector(point, self.dim)
        for _ in range(8):
            off = out - self.center
            n = float(np.linalg.norm(off))
            if n <= self.radius * _NORM_SLACK:
                return out
            out = self.center + off * (self.radius / n)
        return out

    def norm_bound(self):
        return float(np.linalg.norm(self.center)) + self.radius

    def sample(self, rng):
        # Rejection from the bounding box; acceptance is fine in the small
        # dimensions used here and the draw is exactly uniform on the ball.
        while True:
            u = (rng.random(self.dim) * 2.0 - 1.0) * self.radius
            if float(np.linalg.norm(u)) <= self.radius:
                return self.center + u

    def kernel_spec(self):
        return (self.KIND, self.center.copy(), np.full(1, self.radius))

    def __repr__(self):
        return f"Ball(center={self.center!r}, radius={self.radius})"


class NonnegativeOrthant(ConvexSet):
    """``{x : x >= 0}`` -- unbounded, so it has no norm bound."""

    KIND = 2

    def __init__(self, dim):
        if int(dim) < 1:
            raise ValueError("dimension must be >= 1")
        self.dim = int(dim)

    def project(self, point):
        p = _as_vector(point, self.dim)
        return np.maximum(p, 0.0)

    def norm_bound(self):
        raise UnboundedSetError("the nonnegative orthant is unbounded")

    def sample(self, rng):
        return np.abs(rng.standard_normal(self.dim))

    def kernel_spec(self):
        return (self.KIND, np.zeros(self.dim), np.zeros(self.dim))

    def __repr__(self):
        return f"NonnegativeOrthant(dim={self.dim})"


class FullSpace(ConvexSet):
    """All of R^dim; projection is the identity."""

    KIND = 3

    def __init__(self, dim):
        if int(dim) < 1:
            raise ValueError("dimension must be >= 1")
        self.dim = int(dim)

    def project(self, point):
        return _as_vector(point, self.dim)

    def norm_bound(self):
        raise UnboundedSetError("the full space is unbounded")

    def sample(self, rng):
        return rng.standard_normal(self.dim)

    def kernel_spec(self):
        return (self.KIND, np.zeros(self.dim), np.zeros(self.dim))

    def __repr__(self):
        return f"FullSpace(dim={self.dim})"


class DualBall(ConvexSet):
    """Nonnegative vectors of norm at most ``radius``:
    ``{x : x >= 0, ||x|| <= radius}``.

    The multiplier iterates of the constrained engine live here.  The
    projection is the two-stage closed form -- clip the negative coordinates,
    then scale onto the ball -- which is exact because clipping and radial
    scaling commute on the orthant.
    """

    KIND = 4

    def __init__(self, radius, dim):
        radius = float(radius)
        if not (radius > 0 and np.isfinite(radius)):
            raise ValueError(f"radius must be positive and finite, got {radius}")
        if int(dim) < 1:
            raise ValueError("dimension must be >= 1")
        self.radius = radius
        self.dim = int(dim)

    def project(self, point):
        p = _as_vector(point, self.dim)
        return _cap_norm(np.maximum(p, 0.0), self.radius)

    def norm_bound(self):
        return self.radius

    def sample(self, rng):
        while True:
            u = rng.random(self.dim) * self.radius
            if float(np.linalg.norm(u)) <= self.radius:
                return u

    def kernel_spec(self):
        return (self.KIND, np.full(1, self.radius), np.zeros(1))

    def __repr__(self):
        return f"DualBall(radius={self.radius}, dim={self.dim})"
