"""Problem data: local maps, the coupling aggregate, and instances.

An instance couples ``m`` agents.  Agent ``i`` owns a private objective map
``f_i : R^{d_i} -> R^M``, a private constraint map ``g_i : R^{d_i} -> R^P``
and a compact convex domain ``X_i``.  The network jointly minimizes

    F( sum_i f_i(x_i) )    subject to    x_i in X_i,  sum_i g_i(x_i) <= 0,

with ``F`` a smooth convex aggregate.  The Lagrangian couples a shared
multiplier ``lam`` in the nonnegative ball of radius ``dual_radius``:

    L(x, lam) = F(sum_i f_i(x_i)) + lam . sum_i g_i(x_i).

Everything downstream (engines, accountant, oracles) works through this
module's interfaces: maps expose ``value``/``jacobian``, instances expose
Lagrangian values and per-agent gradients, and :func:`estimate_constants`
derives the smoothness/step-cap constants for the affine/quadratic family.

Map forms
---------
v1 constructs affine ``f_i``/``g_i`` with a quadratic ``F`` (the constants
derivations cover exactly that family).  The engines never assume affinity --
they only call ``value``/``jacobian`` -- which is what lets the privacy
probe's :class:`BumpedMap` (an affine map plus a smooth convex bump) run
through the reference path unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatchError,
    SlaterViolationError,
    UnsupportedFormError,
)
from .sets import Ball, Box, ConvexSet, DualBall, FullSpace, NonnegativeOrthant


# ---------------------------------------------------------------------------
# maps


class AffineMap:
    """``x -> matrix @ x + offset``."""

    def __init__(self, matrix, offset):
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        offset = np.atleast_1d(np.asarray(offset, dtype=float))
        if matrix.shape[0] != offset.shape[0]:
            raise DimensionMismatchError(
                f"matrix has {matrix.shape[0]} rows but offset has "
                f"{offset.shape[0]} entries")
        self.matrix = matrix
        self.offset = offset
        self.out_dim, self.in_dim = matrix.shape

    def value(self, x):
        return self.matrix @ np.asarray(x, dtype=float) + self.offset

    def jacobian(self, x=None):
        return self.matrix

    def spectral_norm(self):
        return float(np.linalg.norm(self.matrix, 2))

    def value_bound(self, domain_norm_bound):
        """``sup_{||x|| <= D} ||value(x)||``."""
        return (self.spectral_norm() * float(domain_norm_bound)
                + float(np.linalg.norm(self.offset)))

    def __repr__(self):
        return f"AffineMap({self.out_dim}x{self.in_dim})"


class BumpedMap:
    """An affine map plus a smooth convex bump in chosen output coordinates.

    ``value(x) = base(x) + weights * hinge(x)`` with
    ``hinge(x) = max(||x - center|| - radius, 0)**2`` -- zero (with zero
    gradient) inside the ball around ``center``, convex and continuously
    differentiable everywhere.  Replacing one agent's maps with bumped copies
    produces an "adjacent" instance whose data differ by a bounded, smooth
    perturbation; the privacy probe measures how far the two trajectories
    drift apart.
    """

    def __init__(self, base, center, radius, weights):
        if not isinstance(base, AffineMap):
            raise UnsupportedFormError("bump base must be an AffineMap")
        center = np.atleast_1d(np.asarray(center, dtype=float))
        weights = np.atleast_1d(np.asarray(weights, dtype=float))
        if center.shape != (base.in_dim,):
            raise DimensionMismatchError(
                f"center has shape {center.shape}, expected ({base.in_dim},)")
        if weights.shape != (base.out_dim,):
            raise DimensionMismatchError(
                f"weights has shape {weights.shape}, expected "
                f"({base.out_dim},)")
        if not float(radius) >= 0:
            raise ValueError(f"radius must be >= 0, got {radius}")
        self.base = base
        self.center = center
        self.radius = float(radius)
        self.weights = weights
        self.in_dim = base.in_dim
        self.out_dim = base.out_dim

    def _hinge(self, x):
        return max(float(np.linalg.norm(x - self.center)) - self.radius, 0.0)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return self.base.value(x) + self.weights * self._hinge(x) ** 2

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        h = self._hinge(x)
        jac = np.array(self.base.jacobian(x), dtype=float, copy=True)
        if h > 0.0:
            off = x - self.center
            grad = 2.0 * h * off / float(np.linalg.norm(off))
            jac += np.outer(self.weights, grad)
        return jac

    def max_deviation(self, domain):
        """Componentwise bound on ``|value - base.value|`` over the domain."""
        reach = domain.norm_bound() + float(np.linalg.norm(self.center))
        h = max(reach - self.radius, 0.0)
        return np.abs(self.weights) * h**2

    def __repr__(self):
        return (f"BumpedMap(base={self.base!r}, radius={self.radius}, "
                f"|weights|={float(np.linalg.norm(self.weights)):.3g})")


class QuadraticForm:
    """Convex quadratic aggregate ``y -> y'Qy + q.y + c`` with ``Q`` PSD."""

    def __init__(self, matrix, linear=None, constant=0.0):
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        if matrix.shape[0] != matrix.shape[1]:
            raise DimensionMismatchError(
                f"quadratic matrix must be square, got {matrix.shape}")
        if not np.allclose(matrix, matrix.T, atol=1e-10):
            raise ValueError("quadratic matrix must be symmetric")
        dim = matrix.shape[0]
        if linear is None:
            linear = np.zeros(dim)
        linear = np.atleast_1d(np.asarray(linear, dtype=float))
        if linear.shape != (dim,):
            raise DimensionMismatchError(
                f"linear term has shape {linear.shape}, expected ({dim},)")
        eigmin = float(np.linalg.eigvalsh(matrix)[0])
        scale = max(1.0, float(np.abs(matrix).max()))
        if eigmin < -1e-9 * scale:
            raise ValueError(
                f"quadratic matrix must be positive semidefinite; smallest "
                f"eigenvalue {eigmin:.3e}")
        self.matrix = matrix
        self.linear = linear
        self.constant = float(constant)
        self.dim = dim

    def value(self, y):
        y = np.asarray(y, dtype=float)
        return float(y @ self.matrix @ y + self.linear @ y + self.constant)

    def gradient(self, y):
        y = np.asarray(y, dtype=float)
        return 2.0 * (self.matrix @ y) + self.linear

    def spectral_norm(self):
        return float(np.linalg.norm(self.matrix, 2))

    def __repr__(self):
        return f"QuadraticForm(dim={self.dim})"


# ---------------------------------------------------------------------------
# agents and instances


class AgentProblem:
    """One agent's private data: objective map, constraint map, domain."""

    def __init__(self, objective_map, constraint_map, domain):
        if not isinstance(domain, ConvexSet):
            raise UnsupportedFormError(
                f"domain must be a ConvexSet, got {type(domain).__name__}")
        if objective_map.in_dim != domain.dim:
            raise DimensionMismatchError(
                f"objective map takes dim {objective_map.in_dim} but the "
                f"domain has dim {domain.dim}")
        if constraint_map.in_dim != domain.dim:
            raise DimensionMismatchError(
                f"constraint map takes dim {constraint_map.in_dim} but the "
                f"domain has dim {domain.dim}")
        self.objective_map = objective_map
        self.constraint_map = constraint_map
        self.domain = domain
        self.dim = domain.dim

    def __repr__(self):
        return (f"AgentProblem(dim={self.dim}, "
                f"M={self.objective_map.out_dim}, "
                f"P={self.constraint_map.out_dim})")


class ProblemInstance:
    """``m`` agents plus the aggregate; the object every engine consumes.

    Parameters
    ----------
    agents : list of AgentProblem
        All agents must agree on the output dimensions ``M`` (objective
        terms) and ``P`` (coupled constraints).
    aggregate : QuadraticForm
        The outer function applied to ``sum_i f_i(x_i)``; dimension ``M``.
    dual_radius : float or None
        Radius of the multiplier ball.  ``None`` means "not yet computed";
        engines refuse to run without it (see :func:`compute_dual_bound`).
    slater_point : list of arrays, optional
        A strictly feasible point (used by the dual-radius formula).
    metadata : dict, optional
        JSON-serializable extras (builder provenance, reference solutions).
    """

    def __init__(self, agents, aggregate, dual_radius=None,
                 slater_point=None, metadata=None):
        if len(agents) < 1:
            raise DimensionMismatchError("need at least one agent")
        M = agents[0].objective_map.out_dim
        P = agents[0].constraint_map.out_dim
        for i, a in enumerate(agents):
            if a.objective_map.out_dim != M:
                raise DimensionMismatchError(
                    f"agent {i} emits {a.objective_map.out_dim} objective "
                    f"terms, agent 0 emits {M}")
            if a.constraint_map.out_dim != P:
                raise DimensionMismatchError(
                    f"agent {i} emits {a.constraint_map.out_dim} constraint "
                    f"rows, agent 0 emits {P}")
        if aggregate.dim != M:
            raise DimensionMismatchError(
                f"aggregate takes dim {aggregate.dim}, agents emit {M}")
        if slater_point is not None:
            slater_point = [np.asarray(v, dtype=float) for v in slater_point]
            if len(slater_point) != len(agents):
                raise DimensionMismatchError(
                    "slater_point needs one vector per agent")
            for i, (v, a) in enumerate(zip(slater_point, agents)):
                if v.shape != (a.dim,):
                    raise DimensionMismatchError(
                        f"slater_point[{i}] has shape {v.shape}, agent "
                        f"expects ({a.dim},)")
        if dual_radius is not None and not float(dual_radius) > 0:
            raise ValueError(f"dual_radius must be positive, got {dual_radius}")

        self.agents = list(agents)
        self.aggregate = aggregate
        self.dual_radius = None if dual_radius is None else float(dual_radius)
        self.slater_point = slater_point
        self.metadata = dict(metadata or {})

    # -- shapes ------------------------------------------------------------

    @property
    def num_agents(self):
        return len(self.agents)

    @property
    def objective_dim(self):
        return self.aggregate.dim

    @property
    def constraint_dim(self):
        return self.agents[0].constraint_map.out_dim

    @property
    def dims(self):
        return [a.dim for a in self.agents]

    @property
    def homogeneous_dim(self):
        dims = self.dims
        return dims[0] if len(set(dims)) == 1 else None

    def dual_set(self):
        if self.dual_radius is None:
            raise ValueError(
                "dual_radius is unset; call compute_dual_bound first")
        return DualBall(radius=self.dual_radius, dim=self.constraint_dim)

    # -- evaluation ----------------------------------------------------------

    def _xs_list(self, xs):
        if isinstance(xs, np.ndarray) and xs.ndim == 2:
            if xs.shape[0] != self.num_agents:
                raise DimensionMismatchError(
                    f"state array has {xs.shape[0]} rows, expected "
                    f"{self.num_agents}")
            return [xs[i] for i in range(self.num_agents)]
        if len(xs) != self.num_agents:
            raise DimensionMismatchError(
                f"got {len(xs)} agent states, expected {self.num_agents}")
        return [np.asarray(v, dtype=float) for v in xs]

    def local_objective_values(self, xs):
        """Stack of ``f_i(x_i)``, shape (m, M)."""
        xs = self._xs_list(xs)
        return np.stack([a.objective_map.value(x)
                         for a, x in zip(self.agents, xs)])

    def local_constraint_values(self, xs):
        """Stack of ``g_i(x_i)``, shape (m, P)."""
        xs = self._xs_list(xs)
        return np.stack([a.constraint_map.value(x)
                         for a, x in zip(self.agents, xs)])

    def objective_value(self, xs):
        """``F(sum_i f_i(x_i))``."""
        return self.aggregate.value(self.local_objective_values(xs).sum(axis=0))

    def constraint_total(self, xs):
        """``sum_i g_i(x_i)``, shape (P,); feasible iff <= 0 componentwise."""
        return self.local_constraint_values(xs).sum(axis=0)

    def feasibility_margin(self, xs):
        """``max_p (sum_i g_i(x_i))_p`` -- nonpositive iff feasible."""
        return float(self.constraint_total(xs).max())

    def lagrangian_value(self, xs, lam):
        lam = np.asarray(lam, dtype=float)
        return self.objective_value(xs) + float(lam @ self.constraint_total(xs))

    def agent_gradient(self, i, x_i, aggregate_point, lam):
        """Per-agent primal gradient with the aggregate argument supplied.

        Computes ``Jf_i(x_i)' grad_F(aggregate_point) + Jg_i(x_i)' lam``.
        The engines pass their scaled tracker (``m * y_i``) as
        ``aggregate_point``; exact evaluation passes ``sum_j f_j(x_j)``.
        """
        a = self.agents[i]
        x_i = np.asarray(x_i, dtype=float)
        gF = self.aggregate.gradient(np.asarray(aggregate_point, dtype=float))
        lam = np.asarray(lam, dtype=float)
        return (a.objective_map.jacobian(x_i).T @ gF
                + a.constraint_map.jacobian(x_i).T @ lam)

    def lagrangian_x_gradient(self, xs, lam, i):
        """Exact ``grad_{x_i} L(x, lam)`` (evaluates the true aggregate)."""
        xs = self._xs_list(xs)
        total = self.local_objective_values(xs).sum(axis=0)
        return self.agent_gradient(i, xs[i], total, lam)

    # -- kernel support ------------------------------------------------------

    def kernel_ready(self):
        """True when the array kernels can run this instance: affine maps,
        quadratic aggregate, box domains, one shared dimension."""
        if self.homogeneous_dim is None:
            return False
        for a in self.agents:
            if not isinstance(a.objective_map, AffineMap):
                return False
            if not isinstance(a.constraint_map, AffineMap):
                return False
            if not isinstance(a.domain, Box):
                return False
        return True

    def kernel_arrays(self):
        """Stacked arrays for the array kernels.

        Returns a dict with ``f_mat (m,M,d)``, ``f_off (m,M)``,
        ``g_mat (m,P,d)``, ``g_off (m,P)``, ``lower/upper (m,d)``,
        ``agg_mat (M,M)``, ``agg_lin (M,)``.
        """
        if not self.kernel_ready():
            raise UnsupportedFormError(
                "kernel arrays need affine maps, box domains and one shared "
                "dimension; use the reference path for this instance")
        m, d = self.num_agents, self.homogeneous_dim
        M, P = self.objective_dim, self.constraint_dim
        out = {
            "f_mat": np.zeros((m, M, d)), "f_off": np.zeros((m, M)),
            "g_mat": np.zeros((m, P, d)), "g_off": np.zeros((m, P)),
            "lower": np.zeros((m, d)), "upper": np.zeros((m, d)),
            "agg_mat": self.aggregate.matrix.copy(),
            "agg_lin": self.aggregate.linear.copy(),
        }
        for i, a in enumerate(self.agents):
            out["f_mat"][i] = a.objective_map.matrix
            out["f_off"][i] = a.objective_map.offset
            out["g_mat"][i] = a.constraint_map.matrix
            out["g_off"][i] = a.constraint_map.offset
            out["lower"][i] = a.domain.lower
            out["upper"][i] = a.domain.upper
        return out

    # -- serialization -------------------------------------------------------

    def to_dict(self):
        def map_dict(mp):
            if not isinstance(mp, AffineMap):
                raise UnsupportedFormError(
                    f"only affine maps serialize; got {type(mp).__name__}")
            return {"matrix": mp.matrix.tolist(), "offset": mp.offset.tolist()}

        def set_dict(s):
            if isinstance(s, Box):
                return {"kind": "box", "lower": s.lower.tolist(),
                        "upper": s.upper.tolist()}
            if isinstance(s, Ball):
                return {"kind": "ball", "center": s.center.tolist(),
                        "radius": s.radius}
            if isinstance(s, DualBall):
                return {"kind": "dual_ball", "radius": s.radius, "dim": s.dim}
            if isinstance(s, NonnegativeOrthant):
                return {"kind": "orthant", "dim": s.dim}
            if isinstance(s, FullSpace):
                return {"kind": "full_space", "dim": s.dim}
            raise UnsupportedFormError(f"unknown set {type(s).__name__}")

        return {
            "agents": [
                {"objective": map_dict(a.objective_map),
                 "constraint": map_dict(a.constraint_map),
                 "domain": set_dict(a.domain)}
                for a in self.agents
            ],
            "aggregate": {"matrix": self.aggregate.matrix.tolist(),
                          "linear": self.aggregate.linear.tolist(),
                          "constant": self.aggregate.constant},
            "dual_radius": self.dual_radius,
            "slater_point": (None if self.slater_point is None
                             else [v.tolist() for v in self.slater_point]),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data):
        def make_set(d):
            kind = d["kind"]
            if kind == "box":
                return Box(d["lower"], d["upper"])
            if kind == "ball":
                return Ball(d["center"], d["radius"])
            if kind == "dual_ball":
                return DualBall(d["radius"], d["dim"])
            if kind == "orthant":
                return NonnegativeOrthant(d["dim"])
            if kind == "full_space":
                return FullSpace(d["dim"])
            raise UnsupportedFormError(f"unknown set kind {kind!r}")

        agents = [
            AgentProblem(
                AffineMap(a["objective"]["matrix"], a["objective"]["offset"]),
                AffineMap(a["constraint"]["matrix"], a["constraint"]["offset"]),
                make_set(a["domain"]))
            for a in data["agents"]
        ]
        agg = QuadraticForm(data["aggregate"]["matrix"],
                            data["aggregate"]["linear"],
                            data["aggregate"]["constant"])
        return cls(agents, agg, dual_radius=data.get("dual_radius"),
                   slater_point=data.get("slater_point"),
                   metadata=data.get("metadata"))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def __repr__(self):
        return (f"ProblemInstance(m={self.num_agents}, dims={self.dims}, "
                f"M={self.objective_dim}, P={self.constraint_dim}, "
                f"dual_radius={self.dual_radius})")


# ---------------------------------------------------------------------------
# constants


@dataclass
class Constants:
    """Smoothness and boundedness constants for an affine/quadratic instance.

    All bounds are taken over the product of the agents' domains.
    ``objective_grad_lipschitz`` bounds the per-agent Lipschitz constant of
    the primal Lagrangian gradient's objective part; together with the
    constraint part it caps the perturbation steps (``primal_step_cap``,
    ``dual_step_cap``) under which the engine's saddle inequality holds.
    """

    domain_norm_bound: float        # max_i sup_{x in X_i} ||x||
    f_value_bound: float            # max_i sup ||f_i(x)||
    g_value_bound: float            # max_i sup ||g_i(x)||
    f_lipschitz: float              # max_i ||Jf_i||
    g_lipschitz: float              # max_i ||Jg_i||
    aggregate_grad_bound: float     # sup ||grad F|| over reachable sums
    aggregate_grad_lipschitz: float
    objective_grad_lipschitz: float
    constraint_grad_lipschitz: float
    primal_step_cap: float
    dual_step_cap: float

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def estimate_constants(instance):
    """Derive :class:`Constants` for an affine/quadratic instance.

    Raises :class:`UnsupportedFormError` for other map families and
    :class:`UnboundedSetError` for non-compact domains.  The primal step cap
    needs the dual radius whenever the constraint maps are curved; for the
    affine family shipped here the constraint Hessians vanish, so the cap is
    radius-free.
    """
    for a in instance.agents:
        if not isinstance(a.objective_map, AffineMap) or not isinstance(
                a.constraint_map, AffineMap):
            raise UnsupportedFormError(
                "constants formulas cover affine agent maps only")
    m = instance.num_agents
    d_x = max(a.domain.norm_bound() for a in instance.agents)
    f_lip = max(a.objective_map.spectral_norm() for a in instance.agents)
    g_lip = max(a.constraint_map.spectral_norm() for a in instance.agents)
    c_f = max(a.objective_map.value_bound(a.domain.norm_bound())
              for a in instance.agents)
    c_g = max(a.constraint_map.value_bound(a.domain.norm_bound())
              for a in instance.agents)
    agg_curv = 2.0 * instance.aggregate.spectral_norm()
    reach = m * c_f
    agg_grad = agg_curv * reach + float(np.linalg.norm(instance.aggregate.linear))
    # affine f_i: the objective part of the primal gradient is
    # Jf' gradF(sum f), whose Lipschitz constant over the product domain is
    # bounded by m * ||Jf||^2 * (gradF Lipschitz); curvature of f_i would add
    # an agg_grad * (f Hessian bound) term, zero here.
    obj_grad_lip = m * f_lip**2 * agg_curv
    g_grad_lip = 0.0
    if obj_grad_lip > 0:
        primal_cap = 1.0 / obj_grad_lip  # + dual_radius * g_grad_lip (zero)
    else:
        primal_cap = np.inf
    dual_cap = 1.0 / (m * c_g) if c_g > 0 else np.inf
    return Constants(
        domain_norm_bound=d_x,
        f_value_bound=c_f,
        g_value_bound=c_g,
        f_lipschitz=f_lip,
        g_lipschitz=g_lip,
        aggregate_grad_bound=agg_grad,
        aggregate_grad_lipschitz=agg_curv,
        objective_grad_lipschitz=obj_grad_lip,
        constraint_grad_lipschitz=g_grad_lip,
        primal_step_cap=primal_cap,
        dual_step_cap=dual_cap,
    )


def compute_dual_bound(instance, reference_dual=None):
    """Radius for the multiplier ball from a strictly feasible point.

    With ``x_hat`` the instance's Slater point and ``q_ref`` the minimum of
    the Lagrangian at the (nonnegative) reference multiplier, the optimal
    multipliers satisfy

        ||lam*|| <= ( F(sum f(x_hat)) - q_ref ) / min_p ( -sum g_p(x_hat) ),

    and the returned radius adds 1 so the optimum is interior.  The default
    reference multiplier is zero, making ``q_ref`` the domain-constrained
    objective minimum.  Returns ``(radius, details)``.
    """
    if instance.slater_point is None:
        raise SlaterViolationError("instance has no slater_point")
    slater = instance.slater_point
    margins = -instance.constraint_total(slater)
    if float(margins.min()) <= 0:
        raise SlaterViolationError(
            f"supplied point is not strictly feasible: min margin "
            f"{float(margins.min()):.3e} (needs > 0)")
    if reference_dual is None:
        reference_dual = np.zeros(instance.constraint_dim)
    reference_dual = np.asarray(reference_dual, dtype=float)
    if np.any(reference_dual < 0):
        raise ValueError("reference multiplier must be nonnegative")

    from .oracle import minimize_lagrangian  # lazy: oracle imports problems

    _, q_ref = minimize_lagrangian(instance, reference_dual)
    slater_value = instance.objective_value(slater) + float(
        reference_dual @ instance.constraint_total(slater))
    radius = (slater_value - q_ref) / float(margins.min()) + 1.0
    details = {
        "slater_value": slater_value,
        "lagrangian_min": q_ref,
        "worst_margin": float(margins.min()),
    }
    return float(radius), details


# ---------------------------------------------------------------------------
# builders


def toy_single(constraint_offset=-1.0):
    """One agent on ``[-1, 1]``: minimize ``x^2`` s.t. ``x + offset <= 0``.

    ``offset=-1`` leaves the constraint slack at the optimum (x*=0, lam*=0);
    ``offset=0.5`` makes it bind (x*=-0.5, lam*=1).  Used by the oracle
    tests, where the optimum is known in closed form.
    """
    agent = AgentProblem(
        AffineMap([[1.0]], [0.0]),
        AffineMap([[1.0]], [float(constraint_offset)]),
        Box.cube(1, -1.0, 1.0))
    slater_x = -(1.0 + float(constraint_offset)) / 2.0
    inst = ProblemInstance(
        [agent], QuadraticForm([[1.0]]),
        slater_point=[[slater_x]],
        metadata={"kind": "toy_single",
                  "constraint_offset": float(constraint_offset)})
    return inst


def toy_mirror():
    """Two identical copies of the slack single-agent toy (M = 1).

    The objective ``(x_1 + x_2)^2`` has a non-unique minimizer set; useful
    for exercising engine mechanics where convergence to a unique point is
    not required.
    """
    agents = [
        AgentProblem(AffineMap([[1.0]], [0.0]), AffineMap([[1.0]], [-1.0]),
                     Box.cube(1, -1.0, 1.0))
        for _ in range(2)
    ]
    return ProblemInstance(
        agents, QuadraticForm([[1.0]]),
        slater_point=[[0.0], [0.0]],
        metadata={"kind": "toy_mirror"})


def toy_separable():
    """Two agents with separated objective channels and a unique optimum.

    ``f_1(x) = (x, 0)``, ``f_2(x) = (0, x)``, ``F(y) = ||y||^2``,
    ``g_i(x) = x - 1`` on ``[-1, 1]``: the optimum is ``x* = (0, 0)`` with
    ``lam* = 0`` and both constraints slack.  The workhorse instance for
    engine convergence tests.
    """
    agents = [
        AgentProblem(AffineMap([[1.0], [0.0]], [0.0, 0.0]),
                     AffineMap([[1.0]], [-1.0]), Box.cube(1, -1.0, 1.0)),
        AgentProblem(AffineMap([[0.0], [1.0]], [0.0, 0.0]),
                     AffineMap([[1.0]], [-1.0]), Box.cube(1, -1.0, 1.0)),
    ]
    return ProblemInstance(
        agents, QuadraticForm(np.eye(2)),
        slater_point=[[0.0], [0.0]],
        metadata={"kind": "toy_separable",
                  "reference_primal": [[0.0], [0.0]],
                  "reference_dual": [0.0]})


def make_demand_response(num_agents=5, horizon=4, seed=11,
                         price_excess=1.0, price_imbalance=1.0):
    """Networked demand-response instance.

    Each agent schedules a consumption profile ``x_i in [0, 1]^T`` whose
    grid impact is ``Psi_i x_i`` (a random unit-spectral-norm response
    matrix).  The network must cover a target profile ``p``, buying extra
    capacity ``z >= 0`` (held by agent 1) where the schedules fall short:

        minimize   price_excess * ||z||^2
                   + price_imbalance * ||z - (sum_i Psi_i x_i - p)||^2
        subject to sum_i Psi_i x_i - z <= p.

    The capacity variable is embedded by padding every agent to dimension
    ``2T``: agent 1's upper block holds ``z`` (box ``[0, z_max]``), the other
    agents' upper blocks are frozen at zero.  This keeps the instance
    homogeneous for the array kernels and is mathematically identical to a
    per-agent dimension layout.

    Returns an instance with the dual radius unset; builders downstream call
    :func:`compute_dual_bound`.
    """
    m, T = int(num_agents), int(horizon)
    if m < 2 or T < 1:
        raise ValueError("need num_agents >= 2 and horizon >= 1")
    rng = np.random.default_rng(seed)
    responses = []
    for _ in range(m):
        mat = rng.random((T, T))
        mat /= np.linalg.norm(mat, 2)
        responses.append(mat)
    target = m * rng.uniform(0.25, 0.75, T)
    cap = 2.0 * float(np.max(np.abs(target))) + 2.0 * m * float(np.sqrt(T))

    d, M = 2 * T, 2 * T
    agents = []
    for i in range(m):
        f_mat = np.zeros((M, d))
        f_mat[:T, :T] = responses[i]
        g_mat = np.zeros((T, d))
        g_mat[:, :T] = responses[i]
        hi = np.zeros(d)
        hi[:T] = 1.0
        if i == 0:
            f_mat[T:, T:] = np.eye(T)
            g_mat[:, T:] = -np.eye(T)
            hi[T:] = cap
        agents.append(AgentProblem(
            AffineMap(f_mat, np.zeros(M)),
            AffineMap(g_mat, -target / m),
            Box(np.zeros(d), hi)))

    # F([a; w]) = price_excess*||w||^2 + price_imbalance*||w - a + p||^2
    # expanded in y = [a; w]:
    eye = np.eye(T)
    Q = np.zeros((M, M))
    Q[:T, :T] = price_imbalance * eye
    Q[:T, T:] = -price_imbalance * eye
    Q[T:, :T] = -price_imbalance * eye
    Q[T:, T:] = (price_excess + price_imbalance) * eye
    lin = np.concatenate([-2.0 * price_imbalance * target,
                          2.0 * price_imbalance * target])
    const = price_imbalance * float(target @ target)

    slater = [np.zeros(d) for _ in range(m)]
    slater[0][T:] = float(np.max(np.abs(target)))

    return ProblemInstance(
        agents, QuadraticForm(Q, lin, const),
        slater_point=slater,
        metadata={
            "kind": "demand_response",
            "num_agents": m,
            "horizon": T,
            "seed": int(seed),
            "price_excess": float(price_excess),
            "price_imbalance": float(price_imbalance),
            "target_profile": target.tolist(),
            "capacity_bound": cap,
        })
