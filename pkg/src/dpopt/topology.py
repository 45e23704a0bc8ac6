"""Communication graphs and consensus weight matrices.

The engines mix neighbor states through a symmetric weight matrix ``W`` whose
rows sum to zero: ``w_ij > 0`` on edges, ``w_ii = -sum_j w_ij`` on the
diagonal.  Averaging behavior requires the perturbed identity ``I + W`` to be
doubly stochastic with spectral gap, i.e. ``||I + W - J/m||_2 < 1`` where
``J`` is the all-ones matrix.  :class:`WeightMatrix` validates all of that at
construction time.

Two helpers cover the usual workflow: :func:`random_connected_graph` draws a
connected Erdos-Renyi edge set, and :func:`metropolis_weights` turns any edge
set into weights ``c / (1 + max(deg_i, deg_j))`` that satisfy the contraction
condition for every ``0 < c <= 1``.
"""

from __future__ import annotations

import numpy as np

from .errors import TopologyError


class WeightMatrix:
    """Validated symmetric zero-row-sum weight matrix over ``m`` agents.

    Parameters
    ----------
    matrix : (m, m) array
        Off-diagonal entries are nonnegative mixing weights (positive exactly
        on edges); each diagonal entry must equal minus its row's off-diagonal
        sum.
    """

    def __init__(self, matrix):
        w = np.asarray(matrix, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise TopologyError(f"weight matrix must be square, got {w.shape}")
        m = w.shape[0]
        if m < 2:
            raise TopologyError("need at least two agents")
        if not np.allclose(w, w.T, atol=1e-12):
            raise TopologyError("weight matrix must be symmetric")
        off = w - np.diag(np.diag(w))
        if np.any(off < -1e-12):
            raise TopologyError("off-diagonal weights must be nonnegative")
        if np.max(np.abs(w.sum(axis=1))) > 1e-10:
            raise TopologyError("rows must sum to zero")
        # connectivity of the positive off-diagonal support
        adj = off > 0
        reached = np.zeros(m, dtype=bool)
        stack = [0]
        reached[0] = True
        while stack:
            i = stack.pop()
            for j in np.nonzero(adj[i])[0]:
                if not reached[j]:
                    reached[j] = True
                    stack.append(int(j))
        if not reached.all():
            raise TopologyError("communication graph is not connected")

        self._w = w
        self.size = m

        eigs = np.linalg.eigvalsh(np.eye(m) + w - np.ones((m, m)) / m)
        self._contraction = float(np.max(np.abs(eigs)))
        if self._contraction >= 1.0 - 1e-12:
            raise TopologyError(
                "I + W must contract off the consensus line; spectral radius "
                f"of I + W - J/m is {self._contraction:.6f}"
            )

    @property
    def array(self):
        """The raw (m, m) weight matrix (a defensive copy)."""
        return self._w.copy()

    @property
    def diagonal(self):
        """The self-feedback entries ``w_ii`` (all negative)."""
        return np.diag(self._w).copy()

    @property
    def min_self_weight(self):
        """``min_i |w_ii|`` -- the contraction constant used by the privacy
        accountant (the slowest per-round self-feedback in the network)."""
        return float(np.min(np.abs(np.diag(self._w))))

    @property
    def contraction_factor(self):
        """``||I + W - J/m||_2``; strictly below 1 by construction."""
        return self._contraction

    def second_eigenvalue(self):
        """Second-largest eigenvalue of ``I + W`` (the consensus rate)."""
        eigs = np.linalg.eigvalsh(np.eye(self.size) + self._w)
        return float(eigs[-2])

    def neighbor_lists(self):
        """List of (neighbor indices, weights) per agent, excluding self."""
        out = []
        for i in range(self.size):
            row = self._w[i].copy()
            row[i] = 0.0
            idx = np.nonzero(row > 0)[0]
            out.append((idx, row[idx]))
        return out

    def __repr__(self):
        return (f"WeightMatrix(m={self.size}, "
                f"contraction={self._contraction:.4f}, "
                f"min_self_weight={self.min_self_weight:.4f})")


def build_from_edges(m, edges):
    """Build a :class:`WeightMatrix` from weighted undirected edges.

    Parameters
    ----------
    m : int
        Number of agents.
    edges : iterable of (i, j, weight)
        Zero-based endpoint indices with a positive weight each.  Duplicate
        pairs and self-loops are rejected.
    """
    w = np.zeros((m, m))
    seen = set()
    for i, j, weight in edges:
        i, j = int(i), int(j)
        if i == j:
            raise TopologyError(f"self-loop on agent {i}")
        if not (0 <= i < m and 0 <= j < m):
            raise TopologyError(f"edge ({i}, {j}) out of range for m={m}")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise TopologyError(f"duplicate edge {key}")
        seen.add(key)
        weight = float(weight)
        if weight <= 0:
            raise TopologyError(f"edge {key} has nonpositive weight {weight}")
        w[i, j] = w[j, i] = weight
    np.fill_diagonal(w, -w.sum(axis=1))
    return WeightMatrix(w)


def metropolis_weights(m, pairs, scale=1.0):
    """Metropolis-style weights ``scale / (1 + max(deg_i, deg_j))``.

    Returns a :class:`WeightMatrix`.  Any ``0 < scale <= 1`` yields a valid
    contraction on a connected graph; smaller ``scale`` slows mixing but
    enlarges every ``|w_ii|``'s complement ``1 - |w_ii|``.
    """
    if not (0 < scale <= 1):
        raise TopologyError(f"scale must be in (0, 1], got {scale}")
    deg = np.zeros(m, dtype=int)
    clean = []
    seen = set()
    for i, j in pairs:
        i, j = int(i), int(j)
        key = (min(i, j), max(i, j))
        if i == j or key in seen:
            raise TopologyError(f"bad edge ({i}, {j})")
        seen.add(key)
        clean.append(key)
        deg[i] += 1
        deg[j] += 1
    edges = [(i, j, scale / (1.0 + max(deg[i], deg[j]))) for i, j in clean]
    return build_from_edges(m, edges)


def random_connected_graph(m, edge_probability, seed):
    """Connected Erdos-Renyi edge set, resampled until connected.

    Returns a sorted list of zero-based ``(i, j)`` pairs with ``i < j``.
    """
    if m < 2:
        raise TopologyError("need at least two agents")
    if not (0 < edge_probability <= 1):
        raise TopologyError(
            f"edge probability must be in (0, 1], got {edge_probability}")
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        upper = rng.random((m, m)) < edge_probability
        adj = np.triu(upper, k=1)
        adj = adj | adj.T
        reached = np.zeros(m, dtype=bool)
        stack = [0]
        reached[0] = True
        while stack:
            i = stack.pop()
            for j in np.nonzero(adj[i])[0]:
                if not reached[j]:
                    reached[j] = True
                    stack.append(int(j))
        if reached.all():
            ii, jj = np.nonzero(np.triu(adj, k=1))
            return [(int(a), int(b)) for a, b in zip(ii, jj)]
    raise TopologyError(
        f"no connected draw in 1000 attempts (m={m}, p={edge_probability}); "
        "raise the edge probability")
