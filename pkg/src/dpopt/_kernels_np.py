"""Vectorized numpy iteration kernels (reference backend).

Both kernel modules (this one and the numba twin) implement exactly one
chunk of rounds for each engine, operating on stacked per-agent arrays.
They are pure functions of their inputs: the engines draw all noise in
advance, pass per-round schedule values as arrays, and read metrics off the
returned state.  Keeping every numerical decision out of the kernels is what
makes the two backends interchangeable to within accumulation-order
rounding.

Set projections are dispatched on the small integer codes published by
``ConvexSet.kernel_spec`` (box, ball, orthant, full space, nonnegative
ball); the row-wise settle loops mirror ``dpopt.sets`` so kernel states stay
inside their sets to the same tolerance the set classes guarantee.
"""

from __future__ import annotations

import numpy as np

# Same slack as dpopt.sets: norms within a few dozen ulps of the radius
# count as inside, which keeps the rescale loops fixed points.
_SLACK = 1.0 + 1e-14

KIND_BOX = 0
KIND_BALL = 1
KIND_ORTHANT = 2
KIND_FULL = 3
KIND_DUAL_BALL = 4


def _cap_rows(points, radius):
    """Scale each row onto the centered ball of ``radius``, settling."""
    out = points
    for _ in range(8):
        norms = np.sqrt((out * out).sum(axis=1))
        mask = norms > radius * _SLACK
        if not mask.any():
            return out
        out = out.copy() if out is points else out
        out[mask] *= (radius / norms[mask])[:, None]
    return out


def project_rows(points, kind, a, b):
    """Project each row of ``points`` onto the set coded by ``kind``.

    Payload vectors ``a``/``b`` follow ``ConvexSet.kernel_spec``: box bounds,
    ball center plus radius in ``b[0]``, or dual-ball radius in ``a[0]``.
    """
    if kind == KIND_BOX:
        return np.clip(points, a, b)
    if kind == KIND_BALL:
        center, radius = a, b[0]
        out = points
        for _ in range(8):
            off = out - center
            norms = np.sqrt((off * off).sum(axis=1))
            mask = norms > radius * _SLACK
            if not mask.any():
                return out
            out = out.copy() if out is points else out
            out[mask] = center + off[mask] * (radius / norms[mask])[:, None]
        return out
    if kind == KIND_ORTHANT:
        return np.maximum(points, 0.0)
    if kind == KIND_FULL:
        return points
    if kind == KIND_DUAL_BALL:
        return _cap_rows(np.maximum(points, 0.0), a[0])
    raise ValueError(f"unknown set kind {kind}")


def consensus_chunk(x, weights, wdiag, kind, set_a, set_b,
                    chis, gammas, noise, inputs):
    """Run ``len(chis)`` consensus rounds.

    Round ``t`` (stacked over agents): observations are the true states plus
    that round's noise; each agent mixes neighbor observations (its own noise
    never feeds back, hence the ``wdiag`` correction), adds its input signal,
    and projects::

        x <- P[x + chi_t * (W @ (x + n_t) - diag(W) * n_t) + gamma_t * r_t]

    Returns the final states plus the two running sums the convergence
    theory tracks: ``sum_t chi_t * sum_i ||x_i - xbar||^2`` and
    ``sum_t gamma_t * sum_i ||x_i - xbar||``, both evaluated on post-update
    states.
    """
    out = x.copy()
    acc_chi_sq = 0.0
    acc_gamma = 0.0
    for t in range(chis.shape[0]):
        obs = out + noise[t]
        mixed = out + chis[t] * (weights @ obs - wdiag[:, None] * noise[t])
        out = project_rows(mixed + gammas[t] * inputs[t], kind, set_a, set_b)
        dev = out - out.mean(axis=0)
        sq = (dev * dev).sum(axis=1)
        acc_chi_sq += chis[t] * float(sq.sum())
        acc_gamma += gammas[t] * float(np.sqrt(sq).sum())
    return out, acc_chi_sq, acc_gamma


def optimizer_chunk(x, lam, y, z,
                    f_mat, f_off, g_mat, g_off, lower, upper,
                    agg_mat, agg_lin, dual_radius,
                    weights, wdiag, rho1, rho2,
                    chis, gammas, thetas,
                    dual_noise, obj_noise, con_noise):
    """Run ``len(chis)`` optimizer rounds on stacked affine-instance arrays.

    Per round, in order: perturbed points from round-start values, then the
    primal/dual updates, then the tracker recursions using both the old and
    the new primal point.  ``m * y_i`` stands in for the objective aggregate
    and ``m * z_i`` for the constraint total, exactly as the engines'
    reference path computes them.
    """
    m = x.shape[0]
    x = x.copy()
    lam = lam.copy()
    y = y.copy()
    z = z.copy()
    for t in range(chis.shape[0]):
        chi, gamma, theta = chis[t], gammas[t], thetas[t]
        grad_agg = 2.0 * (m * y) @ agg_mat.T + agg_lin
        obj_pull = np.einsum("iad,ia->id", f_mat, grad_agg)
        alpha = np.clip(
            x - rho1 * (obj_pull + np.einsum("ipd,ip->id", g_mat, lam)),
            lower, upper)
        beta = project_rows(lam + rho2 * m * z, KIND_DUAL_BALL,
                            np.array([dual_radius]), np.zeros(1))
        x_new = np.clip(
            x - gamma * (obj_pull + np.einsum("ipd,ip->id", g_mat, beta)),
            lower, upper)
        g_alpha = np.einsum("ipd,id->ip", g_mat, alpha) + g_off
        lam = project_rows(
            lam + chi * (weights @ (lam + dual_noise[t])
                         - wdiag[:, None] * dual_noise[t]) + gamma * g_alpha,
            KIND_DUAL_BALL, np.array([dual_radius]), np.zeros(1))
        f_new = np.einsum("iad,id->ia", f_mat, x_new) + f_off
        f_old = np.einsum("iad,id->ia", f_mat, x) + f_off
        g_new = np.einsum("ipd,id->ip", g_mat, x_new) + g_off
        g_old = np.einsum("ipd,id->ip", g_mat, x) + g_off
        y = ((1.0 - theta) * y
             + chi * (weights @ (y + obj_noise[t])
                      - wdiag[:, None] * obj_noise[t])
             + f_new - (1.0 - theta) * f_old)
        z = ((1.0 - theta) * z
             + chi * (weights @ (z + con_noise[t])
                      - wdiag[:, None] * con_noise[t])
             + g_new - (1.0 - theta) * g_old)
        x = x_new
    return x, lam, y, z
