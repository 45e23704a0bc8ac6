"""Experiment orchestration: config files, seeded sweeps, CSV/JSON artifacts.

One TOML file describes an experiment.  The loader rejects unknown keys at
every nesting level (silent typos cannot change a run), derives one integer
seed per run from a splittable counter scheme
(``SeedSequence((base_seed, run_index))``), executes the runs sequentially or
in a process pool, and writes:

* ``run_NNN.csv``   -- per-run metrics, byte-stable under reruns,
* ``aggregate.csv`` -- mean / variance / median per column on the same grid,
* ``summary.json``  -- schema-versioned summary; the only artifact carrying
  timestamps, which keeps every CSV byte-identical across reruns.

``compare`` mode runs the configured method next to two fixed baselines on
identical instances, seeds, and initial states: ``pdp`` (the same engine
with full-strength mixing, tracker damping off, and no noise) and ``geo_dp``
(geometric step with a constant noise scale solved by bisection so its
budget at the horizon matches the configured method's within a tolerance).
"""

from __future__ import annotations

import copy
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .accountant import (
    consensus_epsilon_trace,
    consensus_sensitivity_trace,
    geometric_epsilon_trace,
    match_geometric_noise,
    optimizer_epsilon_bound,
    optimizer_epsilon_trace,
    optimizer_sensitivity_trace,
)
from .backend import active_backend
from .consensus import ConsensusConfig, run_consensus
from .errors import (
    ConfigError,
    InvalidScheduleError,
    TopologyError,
    UnsupportedFormError,
)
from .metrics import RunMetrics, aggregate_runs, config_hash, format_float, log_grid
from .optimizer import OptimizerConfig, run_optimizer
from .oracle import check_optimality, solve_centralized
from .problems import (
    ProblemInstance,
    compute_dual_bound,
    estimate_constants,
    make_demand_response,
    toy_mirror,
    toy_separable,
    toy_single,
)
from .schedules import (
    ConstantSchedule,
    GeometricSchedule,
    NoiseSchedule,
    PowerSchedule,
    Schedule,
    ZeroSchedule,
    validate_consensus_schedules,
    validate_optimizer_schedules,
    validate_privacy_finiteness,
)
from .sets import Ball, Box, FullSpace
from .topology import build_from_edges, metropolis_weights, random_connected_graph

SCHEMA_VERSION = 1
ENV_OUT_DIR = "DPOPT_OUT_DIR"
DEFAULT_OUT_DIR = "dpopt_results"
MODES = ("consensus", "optimize", "compare", "accountant", "oracle")

_REQUIRED = object()


# ---------------------------------------------------------------------------
# strict table plumbing


def _pop(table, key, default=_REQUIRED, where="config"):
    if key in table:
        return table.pop(key)
    if default is _REQUIRED:
        raise ConfigError(f"[{where}] is missing the required key '{key}'")
    return default


def _done(table, where="config"):
    if table:
        names = ", ".join(sorted(table))
        raise ConfigError(f"[{where}] has unknown keys: {names}")


def _as_table(value, where):
    if not isinstance(value, dict):
        raise ConfigError(
            f"[{where}] must be a table, got {type(value).__name__}")
    return dict(value)


# ---------------------------------------------------------------------------
# builders: section table -> domain object


def build_schedule(spec, where="schedule"):
    """A step/noise schedule from its table form (``kind`` plus parameters).

    Kinds: ``power`` (scale, exponent, damping), ``constant`` (level),
    ``geometric`` (scale, ratio), ``noise`` (base, growth, exponent), and
    ``zero``.  ``build_schedule(s.to_dict())`` reproduces any schedule ``s``.
    """
    if isinstance(spec, Schedule):
        return spec
    spec = _as_table(spec, where)
    kind = str(_pop(spec, "kind", where=where))
    try:
        if kind == "power":
            sched = PowerSchedule(
                scale=_pop(spec, "scale", where=where),
                exponent=_pop(spec, "exponent", where=where),
                damping=_pop(spec, "damping", 0.0, where=where))
        elif kind == "constant":
            sched = ConstantSchedule(_pop(spec, "level", where=where))
        elif kind == "geometric":
            sched = GeometricSchedule(
                scale=_pop(spec, "scale", where=where),
                ratio=_pop(spec, "ratio", where=where))
        elif kind == "noise":
            sched = NoiseSchedule(
                base=_pop(spec, "base", where=where),
                growth=_pop(spec, "growth", 0.0, where=where),
                exponent=_pop(spec, "exponent", 0.0, where=where))
        elif kind == "zero":
            sched = ZeroSchedule()
        else:
            raise ConfigError(
                f"[{where}] kind must be power, constant, geometric, noise, "
                f"or zero, got '{kind}'")
    except (TypeError, ValueError, InvalidScheduleError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc
    _done(spec, where)
    return sched


def build_instance(spec, where="instance", base_dir="."):
    """A problem instance from its table form.

    Kinds: the bundled generators (``toy_single``, ``toy_mirror``,
    ``toy_separable``, ``demand_response``) or ``file`` with a ``path`` to a
    JSON instance saved by :meth:`ProblemInstance.save`.  Returns the
    instance and a canonical dict for config hashing.
    """
    spec = _as_table(spec, where)
    kind = str(_pop(spec, "kind", where=where))
    if kind == "toy_single":
        inst = toy_single(
            constraint_offset=float(
                _pop(spec, "constraint_offset", -1.0, where)))
    elif kind == "toy_mirror":
        inst = toy_mirror()
    elif kind == "toy_separable":
        inst = toy_separable()
    elif kind == "demand_response":
        inst = make_demand_response(
            num_agents=int(_pop(spec, "agents", 5, where)),
            horizon=int(_pop(spec, "periods", 4, where)),
            seed=int(_pop(spec, "seed", 11, where)),
            price_excess=float(_pop(spec, "price_excess", 1.0, where)),
            price_imbalance=float(_pop(spec, "price_imbalance", 1.0, where)))
    elif kind == "file":
        path = Path(base_dir) / str(_pop(spec, "path", where=where))
        if not path.is_file():
            raise ConfigError(f"[{where}] file does not exist: {path}")
        inst = ProblemInstance.load(path)
    else:
        raise ConfigError(
            f"[{where}] unknown kind '{kind}'; expected toy_single, "
            "toy_mirror, toy_separable, demand_response, or file")
    dual_radius = _pop(spec, "dual_radius", None, where)
    if dual_radius is not None:
        inst.dual_radius = float(dual_radius)
    _done(spec, where)
    if kind == "file":
        canon = {"kind": "file", "content": config_hash(inst.to_dict())}
    else:
        canon = copy.deepcopy(inst.metadata)
    if dual_radius is not None:
        canon["dual_radius"] = float(dual_radius)
    return inst, canon


def _parse_edges(edges, where):
    """Edge rows from a text block (lines ``i j`` or ``i j weight``) or a
    list of pairs/triples."""
    rows = []
    if isinstance(edges, str):
        for line in edges.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) not in (2, 3):
                raise ConfigError(
                    f"[{where}] edge line '{line}' must read 'i j' or "
                    "'i j weight'")
            rows.append(tuple(float(p) for p in parts))
    elif isinstance(edges, list):
        for item in edges:
            if not isinstance(item, (list, tuple)) or len(item) not in (2, 3):
                raise ConfigError(
                    f"[{where}] edge entries must be [i, j] or "
                    f"[i, j, weight], got {item!r}")
            rows.append(tuple(float(p) for p in item))
    else:
        raise ConfigError(
            f"[{where}] edges must be a text block or a list of pairs")
    if not rows:
        raise ConfigError(f"[{where}] edge list is empty")
    return rows


def build_topology(spec, num_agents=None, where="topology"):
    """An interaction weight matrix from its table form.

    ``kind = "edges"`` (default) reads an edge list -- unweighted pairs get
    Metropolis weights scaled by ``scale``, explicit ``i j weight`` rows are
    used verbatim.  ``kind = "random"`` draws a connected Erdos-Renyi graph
    from ``edge_probability`` and ``graph_seed``.
    """
    spec = _as_table(spec, where)
    agents = _pop(spec, "agents", num_agents, where)
    if agents is None:
        raise ConfigError(f"[{where}] needs 'agents'")
    agents = int(agents)
    if num_agents is not None and agents != num_agents:
        raise ConfigError(
            f"[{where}] says agents={agents} but the instance has "
            f"{num_agents}")
    kind = str(_pop(spec, "kind", "edges", where))
    scale = float(_pop(spec, "scale", 1.0, where))
    try:
        if kind == "edges":
            rows = _parse_edges(_pop(spec, "edges", where=where), where)
            weighted = [r for r in rows if len(r) == 3]
            if weighted and len(weighted) != len(rows):
                raise ConfigError(
                    f"[{where}] mixes weighted and unweighted edge rows")
            if weighted:
                if scale != 1.0:
                    raise ConfigError(
                        f"[{where}] 'scale' only applies to unweighted "
                        "edge lists")
                topology = build_from_edges(
                    agents, [(int(i), int(j), w) for i, j, w in rows])
            else:
                topology = metropolis_weights(
                    agents, [(int(i), int(j)) for i, j in rows], scale=scale)
        elif kind == "random":
            pairs = random_connected_graph(
                agents,
                float(_pop(spec, "edge_probability", 0.5, where)),
                int(_pop(spec, "graph_seed", 0, where)))
            topology = metropolis_weights(agents, pairs, scale=scale)
        else:
            raise ConfigError(
                f"[{where}] kind must be 'edges' or 'random', got '{kind}'")
    except TopologyError as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc
    _done(spec, where)
    return topology


def build_domain(spec, where="domain"):
    """A shared convex set from its table form (``box``, ``ball``,
    ``full``)."""
    spec = _as_table(spec, where)
    kind = str(_pop(spec, "kind", where=where))
    try:
        if kind == "box":
            if "dim" in spec:
                domain = Box.cube(int(_pop(spec, "dim", where=where)),
                                  float(_pop(spec, "lower", where=where)),
                                  float(_pop(spec, "upper", where=where)))
            else:
                domain = Box(_pop(spec, "lower", where=where),
                             _pop(spec, "upper", where=where))
        elif kind == "ball":
            domain = Ball(_pop(spec, "center", where=where),
                          float(_pop(spec, "radius", where=where)))
        elif kind == "full":
            domain = FullSpace(int(_pop(spec, "dim", where=where)))
        else:
            raise ConfigError(
                f"[{where}] kind must be 'box', 'ball', or 'full', "
                f"got '{kind}'")
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc
    _done(spec, where)
    return domain


def _domain_canon(domain):
    kind, a, b = domain.kernel_spec()
    return {"kind": int(kind), "a": np.asarray(a).tolist(),
            "b": np.asarray(b).tolist()}


def _parse_schedule_set(spec, names, where="schedules"):
    spec = _as_table(spec, where)
    out = {}
    for name in names:
        if name not in spec:
            raise ConfigError(f"[{where}] needs a '{name}' table")
        out[name] = build_schedule(spec.pop(name), f"{where}.{name}")
    _done(spec, where)
    return out


def _parse_noise(spec, where="noise", channels_allowed=True):
    """``(enabled, shared, channels)`` from an optional [noise] table.

    The table holds either one schedule spec shared by all channels or the
    three per-channel tables ``dual`` / ``objective`` / ``constraint``, plus
    an ``enabled`` flag (default true).
    """
    if spec is None:
        return False, None, {}
    spec = _as_table(spec, where)
    enabled = bool(_pop(spec, "enabled", True, where))
    channels = {}
    for name in ("dual", "objective", "constraint"):
        if name in spec:
            channels[name] = build_schedule(spec.pop(name), f"{where}.{name}")
    if channels:
        if not channels_allowed:
            raise ConfigError(
                f"[{where}] per-channel tables only apply to the "
                "constrained-optimizer modes")
        if len(channels) != 3:
            raise ConfigError(
                f"[{where}] per-channel noise needs all three of 'dual', "
                "'objective', 'constraint'")
        _done(spec, where)
        return enabled, None, channels
    if not spec:
        if enabled:
            raise ConfigError(
                f"[{where}] is enabled but gives no schedule; add schedule "
                "fields or set enabled = false")
        return False, None, {}
    return enabled, build_schedule(spec, where), {}


def _noise_canon(enabled, shared, channels):
    if shared is None and not channels:
        return None
    return {
        "enabled": enabled,
        "shared": shared.to_dict() if shared is not None else None,
        "channels": ({k: v.to_dict() for k, v in channels.items()}
                     if channels else None),
    }


# ---------------------------------------------------------------------------
# the experiment config


def derive_seed(base_seed, run_index):
    """Per-run seed from the splittable counter scheme
    ``SeedSequence((base_seed, run_index))``."""
    seq = np.random.SeedSequence((int(base_seed), int(run_index)))
    return int(seq.generate_state(1)[0])


@dataclass
class ExperimentConfig:
    """A fully validated experiment: resolved run parameters, built domain
    objects (``pieces``), and the canonical payload whose hash identifies
    the experiment's semantics."""

    mode: str
    horizon: int | None
    seeds: tuple
    workers: int
    out_dir: str | None
    override_certificates: bool
    backend: str | None
    raw: dict = field(repr=False)
    base_dir: str = "."
    pieces: dict = field(default_factory=dict, repr=False)
    canonical: dict = field(default_factory=dict, repr=False)

    def hash(self):
        return config_hash(self.canonical)


def load_toml(path):
    """Read an experiment file into a plain dict (no validation yet)."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc


def load_config(path):
    """Parse and validate a TOML experiment file."""
    path = Path(path)
    return parse_config(load_toml(path), base_dir=path.parent)


def parse_config(data, base_dir="."):
    """Validate a config dict and build every object it references.

    Unknown keys raise :class:`ConfigError` at every nesting level, as do
    missing sections, malformed schedules, and backend names that cannot
    run here.
    """
    if not isinstance(data, dict):
        raise ConfigError("config root must be a table")
    raw = copy.deepcopy(data)
    work = copy.deepcopy(data)

    mode = str(_pop(work, "mode"))
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got '{mode}'")

    horizon = _pop(work, "horizon", None)
    if horizon is None and mode != "oracle":
        raise ConfigError(f"mode '{mode}' needs a horizon")
    if horizon is not None:
        horizon = int(horizon)
        if horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {horizon}")

    seeds_given = _pop(work, "seeds", None)
    runs = _pop(work, "runs", None)
    base_seed = _pop(work, "base_seed", 0)
    if seeds_given is not None and runs is not None:
        raise ConfigError("give either 'seeds' or 'runs', not both")
    if seeds_given is not None:
        if not isinstance(seeds_given, list) or not seeds_given:
            raise ConfigError("'seeds' must be a nonempty list of integers")
        seeds = tuple(int(s) for s in seeds_given)
    else:
        count = int(runs) if runs is not None else 1
        if count < 1:
            raise ConfigError(f"runs must be >= 1, got {runs}")
        seeds = tuple(derive_seed(base_seed, i) for i in range(count))

    workers = int(_pop(work, "workers", 1))
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    out_dir = _pop(work, "out_dir", None)
    if out_dir is not None:
        out_dir = str(out_dir)
    override = bool(_pop(work, "override_certificates", False))
    backend = _pop(work, "backend", None)
    active_backend(backend)  # fail fast on names that cannot run here

    pieces = {}
    canonical = {
        "mode": mode,
        "horizon": horizon,
        "seeds": list(seeds),
        "override_certificates": override,
        "backend": backend,
    }

    instance = None
    if mode in ("optimize", "compare", "oracle"):
        instance, inst_canon = build_instance(
            _pop(work, "instance"), base_dir=base_dir)
        pieces["instance"] = instance
        canonical["instance"] = inst_canon

    if mode in ("consensus", "optimize", "compare"):
        topology = build_topology(
            _pop(work, "topology"),
            num_agents=instance.num_agents if instance else None)
        pieces["topology"] = topology
        canonical["topology"] = topology.array.tolist()

    if mode == "consensus":
        _parse_consensus_sections(work, pieces, canonical, horizon,
                                  override, backend)
    elif mode in ("optimize", "compare"):
        _parse_optimizer_sections(work, pieces, canonical, horizon,
                                  override, backend, compare=(mode == "compare"))
    elif mode == "accountant":
        _parse_accountant_sections(work, pieces, canonical)
    elif mode == "oracle":
        opts = _as_table(_pop(work, "oracle", {}), "oracle")
        tol = float(_pop(opts, "tol", 1e-3, "oracle"))
        _done(opts, "oracle")
        pieces["oracle_tol"] = tol
        canonical["oracle"] = {"tol": tol}

    _done(work, "config")
    return ExperimentConfig(
        mode=mode, horizon=horizon, seeds=seeds, workers=workers,
        out_dir=out_dir, override_certificates=override, backend=backend,
        raw=raw, base_dir=str(base_dir), pieces=pieces, canonical=canonical)


def _parse_consensus_sections(work, pieces, canonical, horizon, override,
                              backend):
    domain = build_domain(_pop(work, "domain"))
    pieces["domain"] = domain
    canonical["domain"] = _domain_canon(domain)
    scheds = _parse_schedule_set(_pop(work, "schedules"), ("chi", "gamma"))
    enabled, shared, _ = _parse_noise(
        _pop(work, "noise", None), channels_allowed=False)

    opts = _as_table(_pop(work, "consensus", {}), "consensus")
    input_bound = float(_pop(opts, "input_bound", 1.0, "consensus"))
    init = _pop(opts, "init", "auto", "consensus")
    init_state = _pop(opts, "init_state", None, "consensus")
    input_const = _pop(opts, "input", None, "consensus")
    max_chunk = int(_pop(opts, "max_chunk", 4096, "consensus"))
    _done(opts, "consensus")
    if init_state is not None:
        init = np.asarray(init_state, dtype=float)
    inputs = (np.asarray(input_const, dtype=float)
              if input_const is not None else None)

    pieces["consensus_kwargs"] = dict(
        horizon=horizon, chi=scheds["chi"], gamma=scheds["gamma"],
        noise=shared, noise_enabled=enabled, init=init,
        input_bound=input_bound, override_certificates=override,
        backend=backend, max_chunk=max_chunk)
    pieces["inputs"] = inputs
    canonical["schedules"] = {k: v.to_dict() for k, v in scheds.items()}
    canonical["noise"] = _noise_canon(enabled, shared, {})
    canonical["consensus"] = {
        "input_bound": input_bound,
        "init": init.tolist() if isinstance(init, np.ndarray) else init,
        "input": inputs.tolist() if inputs is not None else None,
        "max_chunk": max_chunk,
    }


def _parse_optimizer_sections(work, pieces, canonical, horizon, override,
                              backend, compare):
    scheds = _parse_schedule_set(
        _pop(work, "schedules"), ("chi", "gamma", "theta"))
    enabled, shared, channels = _parse_noise(_pop(work, "noise", None))

    opts = _as_table(_pop(work, "optimizer", {}), "optimizer")
    rho1 = _pop(opts, "rho1", None, "optimizer")
    rho2 = _pop(opts, "rho2", None, "optimizer")
    dual_radius = _pop(opts, "dual_radius", None, "optimizer")
    init = _pop(opts, "init", "auto", "optimizer")
    init_x = _pop(opts, "init_x", None, "optimizer")
    init_lambda = _pop(opts, "init_lambda", None, "optimizer")
    adjacency_bound = float(_pop(opts, "adjacency_bound", 1.0, "optimizer"))
    max_chunk = int(_pop(opts, "max_chunk", 2048, "optimizer"))
    reference = str(_pop(opts, "reference", "oracle", "optimizer"))
    _done(opts, "optimizer")
    if reference not in ("oracle", "none"):
        raise ConfigError(
            f"[optimizer] reference must be 'oracle' or 'none', "
            f"got '{reference}'")
    if (init_x is None) != (init_lambda is None):
        raise ConfigError(
            "[optimizer] init_x and init_lambda must be given together")
    if init_x is not None:
        init = ([np.asarray(row, dtype=float) for row in init_x],
                np.asarray(init_lambda, dtype=float))

    pieces["optimizer_kwargs"] = dict(
        horizon=horizon, chi=scheds["chi"], gamma=scheds["gamma"],
        theta=scheds["theta"], noise=shared,
        noise_dual=channels.get("dual"),
        noise_objective=channels.get("objective"),
        noise_constraint=channels.get("constraint"),
        noise_enabled=enabled,
        rho1=None if rho1 is None else float(rho1),
        rho2=None if rho2 is None else float(rho2),
        dual_radius=None if dual_radius is None else float(dual_radius),
        init=init, adjacency_bound=adjacency_bound,
        override_certificates=override, backend=backend,
        max_chunk=max_chunk)
    pieces["reference_mode"] = reference
    canonical["schedules"] = {k: v.to_dict() for k, v in scheds.items()}
    canonical["noise"] = _noise_canon(enabled, shared, channels)
    canonical["optimizer"] = {
        "rho1": rho1, "rho2": rho2, "dual_radius": dual_radius,
        "init": ("explicit" if isinstance(init, tuple) else init),
        "init_x": init_x, "init_lambda": init_lambda,
        "adjacency_bound": adjacency_bound, "max_chunk": max_chunk,
        "reference": reference,
    }

    if compare:
        if not enabled:
            raise ConfigError(
                "compare mode needs an enabled [noise] table: the baselines "
                "are budget-matched against the configured method")
        copts = _as_table(_pop(work, "compare", {}), "compare")
        geo_scale = float(_pop(copts, "geo_scale", 0.09, "compare"))
        geo_ratio = float(_pop(copts, "geo_ratio", 0.995, "compare"))
        budget_tol = float(_pop(copts, "budget_tol", 0.01, "compare"))
        _done(copts, "compare")
        pieces["compare_options"] = {
            "geo_scale": geo_scale, "geo_ratio": geo_ratio,
            "budget_tol": budget_tol,
        }
        canonical["compare"] = dict(pieces["compare_options"])


def _parse_accountant_sections(work, pieces, canonical):
    opts = _as_table(_pop(work, "accountant"), "accountant")
    algorithm = str(_pop(opts, "algorithm", "optimizer", "accountant"))
    if algorithm not in ("consensus", "optimizer", "geometric"):
        raise ConfigError(
            "[accountant] algorithm must be 'consensus', 'optimizer', or "
            f"'geometric', got '{algorithm}'")
    input_bound = float(_pop(opts, "input_bound", 1.0, "accountant"))
    adjacency_bound = float(_pop(opts, "adjacency_bound", 1.0, "accountant"))
    msw_explicit = _pop(opts, "min_self_weight", None, "accountant")
    _done(opts, "accountant")

    topo_spec = _pop(work, "topology", None)
    if topo_spec is not None:
        if msw_explicit is not None:
            raise ConfigError(
                "give either a [topology] table or [accountant] "
                "min_self_weight, not both")
        topology = build_topology(topo_spec)
        min_self_weight = topology.min_self_weight
        canonical["topology"] = topology.array.tolist()
    elif msw_explicit is not None:
        min_self_weight = float(msw_explicit)
        if not 0 < min_self_weight < 1:
            raise ConfigError(
                f"min_self_weight must lie in (0, 1), got {min_self_weight}")
    else:
        raise ConfigError(
            "accountant mode needs a [topology] table or an explicit "
            "[accountant] min_self_weight")

    needed = {"consensus": ("chi", "gamma"),
              "optimizer": ("chi", "gamma", "theta"),
              "geometric": ("gamma",)}[algorithm]
    scheds = _parse_schedule_set(_pop(work, "schedules"), needed)
    enabled, shared, channels = _parse_noise(
        _pop(work, "noise"), channels_allowed=(algorithm == "optimizer"))
    if not enabled or (shared is None and not channels):
        raise ConfigError(
            "accountant mode needs an enabled [noise] table; a ledger "
            "without a noise scale is not defined")

    pieces["accountant_options"] = {
        "algorithm": algorithm, "input_bound": input_bound,
        "adjacency_bound": adjacency_bound,
        "min_self_weight": min_self_weight,
        "schedules": scheds, "noise": shared, "channels": channels,
    }
    canonical["schedules"] = {k: v.to_dict() for k, v in scheds.items()}
    canonical["noise"] = _noise_canon(enabled, shared, channels)
    canonical["accountant"] = {
        "algorithm": algorithm, "input_bound": input_bound,
        "adjacency_bound": adjacency_bound,
        "min_self_weight": min_self_weight,
    }


# ---------------------------------------------------------------------------
# certificates without running


def certificate_report(config):
    """Schedule/privacy certificates for a parsed config, without running.

    Returns ``{"ok": bool, "certificates": {name: cert_dict}}``; modes with
    nothing to certify (oracle, the geometric accountant) return an empty
    certificate table with ``ok`` true.
    """
    p = config.pieces
    certs = {}
    if config.mode == "consensus":
        kw = p["consensus_kwargs"]
        certs["schedules"] = validate_consensus_schedules(
            kw["chi"], kw["gamma"])
        if kw["noise_enabled"]:
            certs["privacy"] = validate_privacy_finiteness(
                kw["gamma"], kw["noise"], chi=kw["chi"])
    elif config.mode in ("optimize", "compare"):
        kw = p["optimizer_kwargs"]
        certs["schedules"] = validate_optimizer_schedules(
            kw["chi"], kw["theta"], kw["gamma"])
        if kw["noise_enabled"]:
            worst = None
            for sched in (kw["noise_dual"] or kw["noise"],
                          kw["noise_objective"] or kw["noise"],
                          kw["noise_constraint"] or kw["noise"]):
                cert = validate_privacy_finiteness(
                    kw["theta"], sched, chi=kw["chi"])
                if worst is None or (worst.ok and not cert.ok):
                    worst = cert
            certs["privacy"] = worst
    elif config.mode == "accountant":
        opts = p["accountant_options"]
        scheds, noise = opts["schedules"], opts["noise"]
        if opts["algorithm"] == "consensus":
            certs["schedules"] = validate_consensus_schedules(
                scheds["chi"], scheds["gamma"])
            certs["privacy"] = validate_privacy_finiteness(
                scheds["gamma"], noise, chi=scheds["chi"])
        elif opts["algorithm"] == "optimizer":
            certs["schedules"] = validate_optimizer_schedules(
                scheds["chi"], scheds["theta"], scheds["gamma"])
            for name, sched in (opts["channels"] or
                                {"shared": noise}).items():
                certs[f"privacy_{name}"] = validate_privacy_finiteness(
                    scheds["theta"], sched, chi=scheds["chi"])
    ok = all(c.ok for c in certs.values())
    return {"ok": ok,
            "certificates": {k: c.to_dict() for k, c in certs.items()}}


# ---------------------------------------------------------------------------
# artifacts


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _jsonable(value):
    """Recursively convert to strict-JSON types; non-finite floats become
    their ``format_float`` strings so files stay standard JSON."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if np.isfinite(value) else format_float(value)
    return value


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True,
                  allow_nan=False)
        fh.write("\n")


def _resolve_out_dir(config):
    out = Path(config.out_dir if config.out_dir else DEFAULT_OUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _engine_run(config, seed, reference=None):
    """One seeded engine run from a parsed config."""
    p = config.pieces
    if config.mode == "consensus":
        run_config = ConsensusConfig(seed=int(seed), **p["consensus_kwargs"])
        return run_consensus(p["topology"], p["domain"], run_config,
                             inputs=p["inputs"])
    if config.mode == "optimize":
        run_config = OptimizerConfig(seed=int(seed), **p["optimizer_kwargs"])
        return run_optimizer(p["instance"], p["topology"], run_config,
                             reference=reference)
    raise ConfigError(f"mode '{config.mode}' has no per-seed engine run")


def _worker_run(raw, base_dir, seed, reference):
    """Process-pool entry point: rebuild everything from the raw config."""
    return _engine_run(parse_config(raw, base_dir=base_dir), seed, reference)


def _execute_jobs(config, tasks):
    """Run every task, pooled when configured.

    ``tasks`` maps job -> ``(func, args)`` with ``func`` a module-level
    callable (the process pool pickles it).  Returns ``(results, failures)``
    where ``results`` maps job -> RunMetrics and ``failures`` is a list of
    ``{"job":..., "error":...}`` dicts in job order.
    """
    results, failures = {}, []
    jobs = list(tasks)
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = {job: pool.submit(func, *args)
                       for job, (func, args) in tasks.items()}
            for job in jobs:
                try:
                    results[job] = futures[job].result()
                except Exception as exc:  # noqa: BLE001 - per-run tolerance
                    failures.append(
                        {"job": job, "error": f"{type(exc).__name__}: {exc}"})
    else:
        for job, (func, args) in tasks.items():
            try:
                results[job] = func(*args)
            except Exception as exc:  # noqa: BLE001 - per-run tolerance
                failures.append(
                    {"job": job, "error": f"{type(exc).__name__}: {exc}"})
    return results, failures


def _solve_reference(instance):
    solution = solve_centralized(instance)
    if not solution.converged:
        raise ConfigError(
            "the centralized oracle did not converge on this instance; set "
            "[optimizer] reference = 'none' to run without an error column")
    return solution.xs


def run_experiment(config):
    """Execute a consensus/optimize experiment: n seeded runs, one CSV per
    run, a mean/variance/median aggregate CSV, and a JSON summary.

    Dispatches ``compare``, ``accountant``, and ``oracle`` configs to their
    dedicated drivers.  Returns the summary dict (also written to
    ``summary.json``).  Per-run failures are recorded in the summary; the
    aggregate covers the runs that completed.
    """
    if isinstance(config, (str, os.PathLike)):
        config = load_config(config)
    if config.mode == "compare":
        return compare_baselines(config)
    if config.mode == "accountant":
        return run_accountant(config)
    if config.mode == "oracle":
        return run_oracle(config)

    started = _now()
    out = _resolve_out_dir(config)
    reference = None
    if (config.mode == "optimize"
            and config.pieces["reference_mode"] == "oracle"):
        reference = _solve_reference(config.pieces["instance"])

    jobs = list(range(len(config.seeds)))
    tasks = {
        index: (_worker_run,
                (config.raw, config.base_dir, config.seeds[index], reference))
        for index in jobs
    }
    results, failures = _execute_jobs(config, tasks)

    run_files = {}
    for index in jobs:
        if index in results:
            name = f"run_{index:03d}.csv"
            results[index].write_csv(out / name)
            run_files[index] = name

    completed = [results[i] for i in jobs if i in results]
    aggregate = None
    if completed:
        aggregate = aggregate_runs(completed)
        aggregate.write_csv(out / "aggregate.csv")

    summary = {
        "schema_version": SCHEMA_VERSION,
        "mode": config.mode,
        "config_hash": config.hash(),
        "horizon": config.horizon,
        "seeds": list(config.seeds),
        "workers": config.workers,
        "runs_completed": len(completed),
        "failures": [
            {"run_index": f["job"], "seed": config.seeds[f["job"]],
             "error": f["error"]} for f in failures
        ],
        "artifacts": {
            "runs": [run_files[i] for i in jobs if i in run_files],
            "aggregate": "aggregate.csv" if completed else None,
        },
        "started_at": started,
    }
    if completed:
        first = completed[0]
        summary["backend"] = first.metadata.get("backend")
        summary["certificate_ok"] = first.metadata.get("certificate_ok")
        summary["certificates"] = first.metadata.get("certificates")
        summary["final"] = {name: col[-1]
                            for name, col in aggregate.columns.items()}
    summary["finished_at"] = _now()
    _write_json(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# baseline comparison


def _compare_method_kwargs(config, method, nu_geo):
    """Engine kwargs for one compare-mode method.

    All methods share the instance, seeds, and seeded initial states.  The
    baselines run with full-strength mixing and the tracker damping off
    (uncertified by construction, so they carry the override flag):
    ``pdp`` disables noise, ``geo_dp`` takes the geometric step with the
    budget-matched constant noise scale.
    """
    kw = dict(config.pieces["optimizer_kwargs"])
    if not isinstance(kw["init"], tuple):
        kw["init"] = "seeded"
    if method == "proposed":
        return kw
    kw.update(chi=ConstantSchedule(1.0), theta=ZeroSchedule(),
              noise_dual=None, noise_objective=None, noise_constraint=None,
              override_certificates=True)
    if method == "pdp":
        kw.update(noise=None, noise_enabled=False)
    elif method == "geo_dp":
        opts = config.pieces["compare_options"]
        kw.update(
            gamma=GeometricSchedule(opts["geo_scale"], opts["geo_ratio"]),
            noise=ConstantSchedule(float(nu_geo)), noise_enabled=True)
    else:
        raise ConfigError(f"unknown compare method '{method}'")
    return kw


def _compare_worker(raw, base_dir, method, seed, reference, nu_geo):
    config = parse_config(raw, base_dir=base_dir)
    kwargs = _compare_method_kwargs(config, method, nu_geo)
    run_config = OptimizerConfig(seed=int(seed), **kwargs)
    return run_optimizer(config.pieces["instance"],
                         config.pieces["topology"],
                         run_config, reference=reference)


def compare_baselines(config):
    """Run the configured method against ``pdp`` and ``geo_dp`` on identical
    instances and seeds; write a joined CSV with one mean-error column per
    method plus a JSON summary with the budget-matching details.

    The geometric baseline's constant noise scale is solved so its ledger at
    the horizon matches the configured method's within ``budget_tol``; when
    no match exists the baseline is reported as skipped and the comparison
    proceeds without it.
    """
    if isinstance(config, (str, os.PathLike)):
        config = load_config(config)
    if config.mode != "compare":
        raise ConfigError(f"compare_baselines needs mode='compare', "
                          f"got '{config.mode}'")
    started = _now()
    out = _resolve_out_dir(config)
    p = config.pieces
    kw = p["optimizer_kwargs"]
    topology = p["topology"]
    opts = p["compare_options"]

    reference = _solve_reference(p["instance"])

    noise_triple = (kw["noise_dual"] or kw["noise"],
                    kw["noise_objective"] or kw["noise"],
                    kw["noise_constraint"] or kw["noise"])
    eps_target = optimizer_epsilon_bound(
        kw["chi"], kw["gamma"], kw["theta"], noise_triple,
        kw["adjacency_bound"], topology.min_self_weight, config.horizon)

    geo_gamma = GeometricSchedule(opts["geo_scale"], opts["geo_ratio"])
    budget = {"target_eps": eps_target, "geo_gamma": geo_gamma.to_dict(),
              "tol": opts["budget_tol"]}
    nu_geo = None
    try:
        nu_geo = match_geometric_noise(
            eps_target, geo_gamma, kw["adjacency_bound"],
            topology.min_self_weight, config.horizon,
            tol=opts["budget_tol"])
        eps_geo = float(geometric_epsilon_trace(
            geo_gamma, ConstantSchedule(nu_geo), kw["adjacency_bound"],
            topology.min_self_weight, np.array([config.horizon]))[0])
        budget.update(nu_geo=nu_geo, eps_geo=eps_geo,
                      rel_mismatch=abs(eps_geo - eps_target) / eps_target)
    except ConfigError as exc:
        budget["error"] = str(exc)

    methods = ["proposed", "pdp"] + (["geo_dp"] if nu_geo is not None else [])
    tasks = {
        (method, index): (_compare_worker,
                          (config.raw, config.base_dir, method,
                           config.seeds[index], reference, nu_geo))
        for method in methods for index in range(len(config.seeds))
    }
    results, failures = _execute_jobs(config, tasks)

    ks = log_grid(config.horizon)
    columns = {}
    method_summary = {}
    for method in methods:
        errs = [results[(method, i)].columns["err_x"]
                for i in range(len(config.seeds)) if (method, i) in results]
        if not errs:
            continue
        mean = np.mean(np.stack(errs), axis=0)
        columns[f"err_{method}"] = mean
        method_summary[method] = {
            "runs": len(errs),
            "final_mean_error": float(mean[-1]),
        }
    joined = RunMetrics(
        mode="compare", ks=ks, columns=columns,
        metadata={"methods": methods, "seeds": list(config.seeds)})
    joined.write_csv(out / "compare.csv")

    summary = {
        "schema_version": SCHEMA_VERSION,
        "mode": "compare",
        "config_hash": config.hash(),
        "horizon": config.horizon,
        "seeds": list(config.seeds),
        "workers": config.workers,
        "budget": budget,
        "methods": method_summary,
        "failures": [
            {"method": f["job"][0], "run_index": f["job"][1],
             "seed": config.seeds[f["job"][1]], "error": f["error"]}
            for f in failures
        ],
        "artifacts": {"joined": "compare.csv"},
        "started_at": started,
        "finished_at": _now(),
    }
    _write_json(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# accountant tables and the oracle report


def accountant_table(config):
    """The budget ledger on the log grid as a :class:`RunMetrics` table."""
    if isinstance(config, (str, os.PathLike)):
        config = load_config(config)
    if config.mode != "accountant":
        raise ConfigError(
            f"accountant_table needs mode='accountant', got '{config.mode}'")
    opts = config.pieces["accountant_options"]
    scheds, shared, channels = (opts["schedules"], opts["noise"],
                                opts["channels"])
    msw = opts["min_self_weight"]
    ks = log_grid(config.horizon)
    algorithm = opts["algorithm"]
    if algorithm == "consensus":
        columns = {
            "sensitivity": consensus_sensitivity_trace(
                scheds["chi"], scheds["gamma"], opts["input_bound"], msw, ks),
            "eps_hat": consensus_epsilon_trace(
                scheds["chi"], scheds["gamma"], shared, opts["input_bound"],
                msw, ks),
            "nu_k": shared.values(ks),
        }
    elif algorithm == "optimizer":
        trace = optimizer_sensitivity_trace(
            scheds["chi"], scheds["gamma"], scheds["theta"],
            opts["adjacency_bound"], msw, ks)
        noise_arg = ((channels["dual"], channels["objective"],
                      channels["constraint"]) if channels else shared)
        nu_col = (channels["dual"] if channels else shared).values(ks)
        columns = {
            "sens_dual": trace["dual"],
            "sens_objective": trace["objective"],
            "sens_constraint": trace["constraint"],
            "sens_total": trace["total"],
            "eps_hat": optimizer_epsilon_trace(
                scheds["chi"], scheds["gamma"], scheds["theta"], noise_arg,
                opts["adjacency_bound"], msw, ks),
            "nu_k": nu_col,
        }
    else:
        columns = {
            "eps_hat": geometric_epsilon_trace(
                scheds["gamma"], shared, opts["adjacency_bound"], msw, ks),
            "nu_k": shared.values(ks),
        }
    metadata = {
        "mode": f"accountant-{algorithm}",
        "min_self_weight": msw,
        "input_bound": opts["input_bound"],
        "adjacency_bound": opts["adjacency_bound"],
        "schedules": {k: v.to_dict() for k, v in scheds.items()},
    }
    return RunMetrics(mode=f"accountant-{algorithm}", ks=ks, columns=columns,
                      metadata=metadata)


def run_accountant(config):
    """Write the accountant table plus a JSON summary; returns the
    summary."""
    if isinstance(config, (str, os.PathLike)):
        config = load_config(config)
    started = _now()
    out = _resolve_out_dir(config)
    table = accountant_table(config)
    table.write_csv(out / "accountant.csv")
    summary = {
        "schema_version": SCHEMA_VERSION,
        "mode": "accountant",
        "algorithm": config.pieces["accountant_options"]["algorithm"],
        "config_hash": config.hash(),
        "horizon": config.horizon,
        "certificates": certificate_report(config),
        "final": {name: col[-1] for name, col in table.columns.items()},
        "artifacts": {"table": "accountant.csv"},
        "started_at": started,
        "finished_at": _now(),
    }
    _write_json(out / "summary.json", summary)
    return summary


def oracle_report(config):
    """Solve the configured instance centrally and certify the result.

    Returns a dict with the saddle point, the objective value, the dual-ball
    radius, the step caps, and the optimality check -- the ground truth the
    distributed runs are measured against.
    """
    if isinstance(config, (str, os.PathLike)):
        config = load_config(config)
    if config.mode != "oracle":
        raise ConfigError(
            f"oracle_report needs mode='oracle', got '{config.mode}'")
    instance = config.pieces["instance"]
    if instance.dual_radius is None:
        radius, _ = compute_dual_bound(instance)
        instance.dual_radius = float(radius)
    solution = solve_centralized(instance)
    totals = instance.local_objective_values(solution.xs).sum(axis=0)
    report = check_optimality(instance, solution.xs, solution.lam,
                              tol=config.pieces["oracle_tol"])
    try:
        consts = estimate_constants(instance)
        caps = {"rho1": consts.primal_step_cap, "rho2": consts.dual_step_cap}
    except UnsupportedFormError:
        caps = None
    return {
        "objective": float(instance.aggregate.value(totals)),
        "xs": [np.asarray(x).tolist() for x in solution.xs],
        "lam": np.asarray(solution.lam).tolist(),
        "dual_radius": instance.dual_radius,
        "step_caps": caps,
        "solver": {"rounds": solution.rounds,
                   "residual": solution.residual,
                   "converged": solution.converged},
        "optimality": {
            "stationarity_residual": report.stationarity_residual,
            "dual_residual": report.dual_residual,
            "vi_min": report.vi_min,
            "feasibility_max": report.feasibility_max,
            "complementarity": report.complementarity,
            "tol": report.tol,
            "ok": report.ok,
        },
    }


def run_oracle(config):
    """Write ``oracle.json`` for an oracle-mode config; returns the
    payload."""
    if isinstance(config, (str, os.PathLike)):
        config = load_config(config)
    started = _now()
    out = _resolve_out_dir(config)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "mode": "oracle",
        "config_hash": config.hash(),
        "report": oracle_report(config),
        "started_at": started,
        "finished_at": _now(),
    }
    _write_json(out / "oracle.json", payload)
    return payload
