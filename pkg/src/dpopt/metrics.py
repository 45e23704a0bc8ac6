"""Run records: logarithmic sampling grid, metric columns, CSV output.

Engines sample diagnostics on a logarithmic round grid (every round up to
100, then a fixed count per decade) so that 10^5-round runs produce compact,
plot-ready traces.  A :class:`RunMetrics` holds the sampled columns plus
free-form metadata; CSV output uses ``repr`` floats, which round-trip exactly
and make files byte-identical across platforms.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


def log_grid(horizon, dense_until=100, per_decade=100):
    """Sorted integer sample rounds: ``1..dense_until`` plus ``per_decade``
    log-spaced marks per decade, always ending at ``horizon``."""
    horizon = int(horizon)
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    marks = set(range(1, min(dense_until, horizon) + 1))
    if horizon > dense_until:
        lo, hi = np.log10(dense_until), np.log10(horizon)
        count = int(np.ceil((hi - lo) * per_decade)) + 1
        marks.update(
            int(round(v)) for v in np.logspace(lo, hi, count))
    marks.add(horizon)
    ks = np.array(sorted(k for k in marks if 1 <= k <= horizon), dtype=np.int64)
    return ks


def segment_rounds(start, stop, cap):
    """Split the half-open round range ``(start, stop]`` into consecutive
    chunks of at most ``cap`` rounds; yields ``(lo, hi)`` with the same
    half-open convention."""
    lo = start
    while lo < stop:
        hi = min(lo + cap, stop)
        yield lo, hi
        lo = hi


def format_float(v):
    """Shortest exact decimal for a float; ``inf``/``nan`` spelled plainly."""
    v = float(v)
    if np.isnan(v):
        return "nan"
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


@dataclass
class RunMetrics:
    """Sampled diagnostics of one engine run.

    ``columns`` maps column name to an array aligned with ``ks``; insertion
    order is the CSV column order.  ``metadata`` carries the run's
    configuration fingerprint (schedules, seeds, backend, ...).
    """

    mode: str
    ks: np.ndarray
    columns: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ks = np.asarray(self.ks, dtype=np.int64)
        for name, col in self.columns.items():
            col = np.asarray(col, dtype=float)
            if col.shape != self.ks.shape:
                raise ValueError(
                    f"column {name!r} has shape {col.shape}, grid has "
                    f"{self.ks.shape}")
            self.columns[name] = col

    def at(self, k, column):
        """Value of ``column`` at round ``k`` (must be a grid mark)."""
        idx = np.nonzero(self.ks == int(k))[0]
        if idx.size == 0:
            raise KeyError(f"round {k} is not on the sampling grid")
        return float(self.columns[column][idx[0]])

    def to_csv(self):
        """The CSV text — the byte-exact content :meth:`write_csv` writes."""
        names = list(self.columns)
        lines = [",".join(["k"] + names)]
        for row, k in enumerate(self.ks):
            vals = [str(int(k))]
            vals.extend(format_float(self.columns[n][row]) for n in names)
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    def to_dict(self):
        return {
            "mode": self.mode,
            "k": self.ks.tolist(),
            "columns": {n: c.tolist() for n, c in self.columns.items()},
            "metadata": self.metadata,
        }


def aggregate_runs(runs):
    """Mean/variance/median across same-grid runs; columns become
    ``<name>_mean``, ``<name>_var``, and ``<name>_median``.  Metadata records
    the run count and the first run's metadata under ``base``."""
    if not runs:
        raise ValueError("need at least one run")
    first = runs[0]
    for r in runs[1:]:
        if not np.array_equal(r.ks, first.ks):
            raise ValueError("runs sample different grids")
        if list(r.columns) != list(first.columns):
            raise ValueError("runs carry different columns")
    out = {}
    for name in first.columns:
        stack = np.stack([r.columns[name] for r in runs])
        out[f"{name}_mean"] = stack.mean(axis=0)
        out[f"{name}_var"] = stack.var(axis=0)
        out[f"{name}_median"] = np.median(stack, axis=0)
    return RunMetrics(
        mode=f"{first.mode}-aggregate",
        ks=first.ks.copy(),
        columns=out,
        metadata={"runs": len(runs), "base": first.metadata},
    )


def config_hash(payload):
    """Stable sha256 of a JSON-serializable config payload."""
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"),
                       allow_nan=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
