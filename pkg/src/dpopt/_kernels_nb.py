"""Numba iteration kernels (hot-path backend).

Loop-level twin of ``dpopt._kernels_np``: same signatures, same update
order, same projection settle loops, with explicit per-agent loops compiled
by ``@njit``.  Agents within a round read only round-start snapshots, so
every update writes into fresh arrays before the swap.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_SLACK = 1.0 + 1e-14

KIND_BOX = 0
KIND_BALL = 1
KIND_ORTHANT = 2
KIND_FULL = 3
KIND_DUAL_BALL = 4


@njit(cache=True)
def _project_row(row, kind, a, b):
    d = row.shape[0]
    if kind == 0:  # box
        for j in range(d):
            if row[j] < a[j]:
                row[j] = a[j]
            elif row[j] > b[j]:
                row[j] = b[j]
    elif kind == 1:  # ball around a with radius b[0]
        radius = b[0]
        for _ in range(8):
            sq = 0.0
            for j in range(d):
                off = row[j] - a[j]
                sq += off * off
            norm = np.sqrt(sq)
            if norm <= radius * _SLACK:
                break
            scale = radius / norm
            for j in range(d):
                row[j] = a[j] + (row[j] - a[j]) * scale
    elif kind == 2:  # nonnegative orthant
        for j in range(d):
            if row[j] < 0.0:
                row[j] = 0.0
    elif kind == 3:  # full space
        pass
    else:  # nonnegative ball of radius a[0]
        radius = a[0]
        for j in range(d):
            if row[j] < 0.0:
                row[j] = 0.0
        for _ in range(8):
            sq = 0.0
            for j in range(d):
                sq += row[j] * row[j]
            norm = np.sqrt(sq)
            if norm <= radius * _SLACK:
                break
            scale = radius / norm
            for j in range(d):
                row[j] *= scale


@njit(cache=True)
def consensus_chunk(x, weights, wdiag, kind, set_a, set_b,
                    chis, gammas, noise, inputs):
    rounds = chis.shape[0]
    m, d = x.shape
    out = x.copy()
    acc_chi_sq = 0.0
    acc_gamma = 0.0
    obs = np.empty((m, d))
    nxt = np.empty((m, d))
    mean = np.empty(d)
    for t in range(rounds):
        for i in range(m):
            for j in range(d):
                obs[i, j] = out[i, j] + noise[t, i, j]
        mixed = weights @ obs
        for i in range(m):
            for j in range(d):
                nxt[i, j] = (out[i, j]
                             + chis[t] * (mixed[i, j]
                                          - wdiag[i] * noise[t, i, j])
                             + gammas[t] * inputs[t, i, j])
            _project_row(nxt[i], kind, set_a, set_b)
        for j in range(d):
            s = 0.0
            for i in range(m):
                out[i, j] = nxt[i, j]
                s += nxt[i, j]
            mean[j] = s / m
        for i in range(m):
            sq = 0.0
            for j in range(d):
                dev = out[i, j] - mean[j]
                sq += dev * dev
            norm = np.sqrt(sq)
            acc_chi_sq += chis[t] * sq
            acc_gamma += gammas[t] * norm
    return out, acc_chi_sq, acc_gamma


@njit(cache=True)
def optimizer_chunk(x, lam, y, z,
                    f_mat, f_off, g_mat, g_off, lower, upper,
                    agg_mat, agg_lin, dual_radius,
                    weights, wdiag, rho1, rho2,
                    chis, gammas, thetas,
                    dual_noise, obj_noise, con_noise):
    rounds = chis.shape[0]
    m, d = x.shape
    n_obj = f_off.shape[1]
    n_con = g_off.shape[1]
    x = x.copy()
    lam = lam.copy()
    y = y.copy()
    z = z.copy()
    dual_a = np.empty(1)
    dual_a[0] = dual_radius
    dual_b = np.zeros(1)
    grad_agg = np.empty((m, n_obj))
    obj_pull = np.empty((m, d))
    alpha = np.empty((m, d))
    beta = np.empty((m, n_con))
    x_new = np.empty((m, d))
    g_alpha = np.empty((m, n_con))
    lam_new = np.empty((m, n_con))
    y_new = np.empty((m, n_obj))
    z_new = np.empty((m, n_con))
    for t in range(rounds):
        chi = chis[t]
        gamma = gammas[t]
        theta = thetas[t]
        for i in range(m):
            for a in range(n_obj):
                s = agg_lin[a]
                for c in range(n_obj):
                    s += 2.0 * agg_mat[a, c] * m * y[i, c]
                grad_agg[i, a] = s
            for j in range(d):
                s = 0.0
                for a in range(n_obj):
                    s += f_mat[i, a, j] * grad_agg[i, a]
                obj_pull[i, j] = s
            for j in range(d):
                s = 0.0
                for p in range(n_con):
                    s += g_mat[i, p, j] * lam[i, p]
                alpha[i, j] = x[i, j] - rho1 * (obj_pull[i, j] + s)
            _project_row(alpha[i], 0, lower[i], upper[i])
            for p in range(n_con):
                beta[i, p] = lam[i, p] + rho2 * m * z[i, p]
            _project_row(beta[i], 4, dual_a, dual_b)
            for j in range(d):
                s = 0.0
                for p in range(n_con):
                    s += g_mat[i, p, j] * beta[i, p]
                x_new[i, j] = x[i, j] - gamma * (obj_pull[i, j] + s)
            _project_row(x_new[i], 0, lower[i], upper[i])
            for p in range(n_con):
                s = g_off[i, p]
                for j in range(d):
                    s += g_mat[i, p, j] * alpha[i, j]
                g_alpha[i, p] = s
        lam_obs = weights @ (lam + dual_noise[t])
        y_obs = weights @ (y + obj_noise[t])
        z_obs = weights @ (z + con_noise[t])
        for i in range(m):
            for p in range(n_con):
                lam_new[i, p] = (lam[i, p]
                                 + chi * (lam_obs[i, p]
                                          - wdiag[i] * dual_noise[t, i, p])
                                 + gamma * g_alpha[i, p])
            _project_row(lam_new[i], 4, dual_a, dual_b)
            for a in range(n_obj):
                f_new = f_off[i, a]
                f_old = f_off[i, a]
                for j in range(d):
                    f_new += f_mat[i, a, j] * x_new[i, j]
                    f_old += f_mat[i, a, j] * x[i, j]
                y_new[i, a] = ((1.0 - theta) * y[i, a]
                               + chi * (y_obs[i, a]
                                        - wdiag[i] * obj_noise[t, i, a])
                               + f_new - (1.0 - theta) * f_old)
            for p in range(n_con):
                gv_new = g_off[i, p]
                gv_old = g_off[i, p]
                for j in range(d):
                    gv_new += g_mat[i, p, j] * x_new[i, j]
                    gv_old += g_mat[i, p, j] * x[i, j]
                z_new[i, p] = ((1.0 - theta) * z[i, p]
                               + chi * (z_obs[i, p]
                                        - wdiag[i] * con_noise[t, i, p])
                               + gv_new - (1.0 - theta) * gv_old)
        for i in range(m):
            for j in range(d):
                x[i, j] = x_new[i, j]
            for p in range(n_con):
                lam[i, p] = lam_new[i, p]
                z[i, p] = z_new[i, p]
            for a in range(n_obj):
                y[i, a] = y_new[i, a]
    return x, lam, y, z
