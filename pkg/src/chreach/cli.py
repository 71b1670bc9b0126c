"""Command-line experiment runner.

``chreach run <config> [--out DIR] [--threads N] [--seeds K]`` runs one
experiment described by a JSON config and writes its data files;
``chreach validate <config>`` only checks the config. Exit codes: 0 on
success, 1 on a numerical failure or a failed invariant check (e.g. a
Monte Carlo state outside a padded hull), 2 on a config error.

Output formats (all UTF-8 with LF line endings, floats as ``%.17g``):

* ``hulls_t<k>.csv``: header ``vertex_index,x1,...,xn`` then one vertex per
  row. 2-D hulls are listed counter-clockwise; higher-dimensional hulls
  list the full extremal point cloud.
* ``metrics.json``: ``time`` (node times) and the series maps
  ``hausdorff``, ``eps_naive``, ``eps_quad`` (label -> per-node values,
  ``null`` where not computed); ``runtimes`` names the timings file.
* ``report.json``: invariant checks and the overall status.
* ``manifest.json``: config echo, git-style blob hash of the inputs, tool
  version and a SHA-256 of every output file.
* ``timings.json``: wall-clock phase timings and a UTC timestamp. It is the
  only file that changes between repeated runs of the same config.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from contextlib import contextmanager
from dataclasses import replace
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional

import jsonschema
import numpy as np

from chreach import __version__
from chreach import baselines as bl
from chreach import geometry as geo
from chreach import mpc
from chreach import reach as rc
from chreach import relaxations as rx
from chreach import systems as sy
from chreach.errors import ChreachError, ConfigError

log = logging.getLogger("chreach")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2
TIMINGS_FILE = "timings.json"


# -- config ------------------------------------------------------------------------

def load_schema(name: str) -> dict:
    text = resources.files("chreach").joinpath(f"schemas/{name}.json").read_text("utf-8")
    return json.loads(text)


def _key_path(path) -> str:
    out = "$"
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def schema_problems(cfg, schema_name: str = "experiment") -> List[str]:
    """Every schema violation as ``<key path>: <message>``, sorted."""
    validator = jsonschema.Draft202012Validator(load_schema(schema_name))
    problems = []
    for err in validator.iter_errors(cfg):
        if err.validator == "additionalProperties":
            allowed = set(err.schema.get("properties", {}))
            for key in sorted(set(err.instance) - allowed):
                problems.append(f"{_key_path(list(err.absolute_path) + [key])}: unknown key")
        else:
            problems.append(f"{_key_path(err.absolute_path)}: {err.message}")
    return sorted(set(problems))


def load_config(path) -> dict:
    """Reads and schema-validates a config; raises ConfigError listing every bad key."""
    path = Path(path)
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except OSError as err:
        raise ConfigError(f"{path}: cannot read config ({err.strerror})") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON at line {err.lineno} column {err.colno}: {err.msg}") from err
    problems = schema_problems(cfg)
    if problems:
        raise ConfigError(f"{path}: {len(problems)} schema error(s)\n  " + "\n  ".join(problems))
    return cfg


NN_DEFAULTS = {
    "system": {"name": "neural-loop"},
    "disturbance": {"type": "ball", "radius": float(np.sqrt(2.0) / 20.0)},
    "initial": {"type": "ellipsoid", "center": [2.75, 0.0],
                "shape": [[2 * 0.25 ** 2, 0.0], [0.0, 2 * 0.1 ** 2]]},
    "grid": {"tf": 4.0, "steps": 160},
    "directions": {"M": 100},
}


def _with_defaults(cfg: dict) -> dict:
    exp = cfg["experiment"]
    if exp != "nn-loop" and not (exp == "compare" and "system" not in cfg):
        return cfg
    out = dict(NN_DEFAULTS)
    out.update(cfg)
    return out


def _require(cfg, key):
    if key not in cfg:
        raise ConfigError(f"$.{key}: required for experiment {cfg['experiment']!r}")
    return cfg[key]


def build_system(cfg: dict) -> sy.SystemDef:
    s = _require(cfg, "system")
    name = s["name"]
    allowed = {
        "attraction-repulsion": {"x_a", "x_r", "cutoff_radius"},
        "dubins": {"v", "omega", "G"},
        "neural-loop": {"weights"},
        "spacecraft-omega": {"J", "K"},
        "single-integrator": {"dim"},
    }[name]
    extra = sorted(set(s) - allowed - {"name"})
    if extra:
        raise ConfigError("; ".join(f"$.system.{k}: not a parameter of {name!r}" for k in extra))
    if name == "attraction-repulsion":
        return sy.make_attraction_repulsion(s.get("x_a", (1.0, 0.0)), s.get("x_r", (-1.0, 0.0)),
                                            s.get("cutoff_radius", 0.2))
    if name == "dubins":
        return sy.make_dubins(s.get("v", 0.5), s.get("omega", 0.5), s.get("G"))
    if name == "neural-loop":
        A, B, policy = sy.load_neural_loop(s.get("weights"))
        return sy.make_neural_loop(A, B, policy)
    if name == "spacecraft-omega":
        return sy.make_spacecraft_omega(s.get("J", (5.0, 2.0, 1.0)), s.get("K", (-5.0, -2.0, -1.0)))
    return sy.make_single_integrator(s.get("dim", 2))


def _vec(spec, key, dim, where, default=None):
    v = spec.get(key, default)
    if v is None:
        raise ConfigError(f"{where}.{key}: required")
    v = np.asarray(v, dtype=float)
    if v.shape != (dim,):
        raise ConfigError(f"{where}.{key}: expected length {dim}, got {v.shape[0]}")
    return v


def build_set(spec: dict, dim: int, where: str, allow_point: bool):
    """Ball, ellipsoid or point (as an initial set) from a ``set`` config block."""
    kind = spec["type"]
    if kind == "point":
        if not allow_point:
            raise ConfigError(f"{where}.type: a point is not a valid disturbance set")
        return rc.Singleton(_vec(spec, "center", dim, where))
    if kind == "box":
        raise ConfigError(f"{where}.type: box sets are only supported by dubins-rect")
    center = _vec(spec, "center", dim, where, np.zeros(dim))
    if kind == "ball":
        if "radius" not in spec:
            raise ConfigError(f"{where}.radius: required for a ball")
        return geo.Ball(center, spec["radius"])
    if "shape" not in spec:
        raise ConfigError(f"{where}.shape: required for an ellipsoid")
    return geo.Ellipsoid(center, spec["shape"])


def _initial(cfg, sys):
    X0 = build_set(_require(cfg, "initial"), sys.n, "$.initial", allow_point=True)
    return X0 if isinstance(X0, rc.Singleton) else rc.Ovaloid(X0)


def _grid(cfg) -> rc.TimeGrid:
    g = _require(cfg, "grid")
    return rc.TimeGrid(float(g.get("t0", 0.0)), float(g["tf"]), int(g.get("steps", 200)))


def _directions(cfg, n: int) -> np.ndarray:
    d = _require(cfg, "directions")
    return geo.sample_sphere(n, d["M"], d.get("scheme", geo.default_scheme(n)), cfg.get("seed", 0))


def resolve_threads(cli_threads: Optional[int], cfg: dict) -> int:
    """``CHREACH_THREADS`` wins over ``--threads``, which wins over the config."""
    env = os.environ.get("CHREACH_THREADS")
    if env is not None:
        try:
            return int(env)
        except ValueError as err:
            raise ConfigError(f"CHREACH_THREADS: not an integer: {env!r}") from err
    if cli_threads is not None:
        return int(cli_threads)
    return int(cfg.get("threads", 1))


# -- serialization -------------------------------------------------------------------


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def hull_csv(hull: geo.HullVertices) -> str:
    """CSV text for one hull (CCW vertices in 2-D, the point cloud otherwise)."""
    pts = hull.points
    lines = ["vertex_index," + ",".join(f"x{i + 1}" for i in range(pts.shape[1]))]
    lines += [f"{i}," + ",".join(fmt(v) for v in p) for i, p in enumerate(pts)]
    return "\n".join(lines) + "\n"


def parse_hull_csv(text: str) -> np.ndarray:
    lines = text.rstrip("\n").split("\n")
    header = lines[0].split(",")
    if header[0] != "vertex_index":
        raise ValueError("not a hull CSV (bad header)")
    rows = [ln.split(",") for ln in lines[1:]]
    if [int(r[0]) for r in rows] != list(range(len(rows))):
        raise ValueError("vertex_index column is not 0..N-1")
    return np.array([[float(v) for v in r[1:]] for r in rows]).reshape(len(rows), len(header) - 1)


def _json_value(v):
    if isinstance(v, dict):
        return {str(k): _json_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_value(x) for x in v]
    if isinstance(v, np.ndarray):
        return _json_value(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer, int)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if np.isfinite(v) else None
    return v


def dump_json(obj) -> str:
    """Deterministic JSON: sorted keys, two-space indent, shortest round-trip floats."""
    return json.dumps(_json_value(obj), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def blob_hash(data: bytes) -> str:
    """Git blob object id (SHA-1 of ``blob <len>\\0`` + data)."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


class RunOutput:
    """Files, metrics and checks collected by an experiment before writing."""

    def __init__(self):
        self.files: Dict[str, str] = {}
        self.time: List[float] = []
        self.series = {"hausdorff": {}, "eps_naive": {}, "eps_quad": {}}
        self.checks: Dict[str, dict] = {}
        self.phases: Dict[str, float] = {}

    @contextmanager
    def phase(self, name):
        tic = time.perf_counter()
        try:
            yield
        finally:
            self.phases[name] = self.phases.get(name, 0.0) + time.perf_counter() - tic

    def add_hulls(self, est: rc.HullEstimate, prefix: str = ""):
        width = len(str(est.nodes - 1))
        for k in range(est.nodes):
            self.files[f"{prefix}hulls_t{k:0{width}d}.csv"] = hull_csv(est.hull(k))

    def check(self, name, passed: bool, **details):
        self.checks[name] = dict(passed=bool(passed), **details)

    @property
    def failed(self) -> List[str]:
        return sorted(k for k, v in self.checks.items() if not v["passed"])

    def metrics(self) -> dict:
        out = {"time": list(self.time), "runtimes": TIMINGS_FILE}
        out.update(self.series)
        return out


def write_outputs(out: RunOutput, cfg: dict, inputs: bytes, out_dir: Path) -> None:
    files = dict(out.files)
    files["metrics.json"] = dump_json(out.metrics())
    files["report.json"] = dump_json({
        "experiment": cfg["experiment"],
        "status": "failed" if out.failed else "ok",
        "failed_checks": out.failed,
        "checks": out.checks,
    })
    for name in sorted(files):
        write_atomic(out_dir / name, files[name])
    manifest = {
        "tool": "chreach",
        "version": __version__,
        "experiment": cfg["experiment"],
        "config": cfg,
        "input_hash": blob_hash(inputs),
        "outputs": {n: hashlib.sha256(files[n].encode("utf-8")).hexdigest() for n in sorted(files)},
        "timings_file": TIMINGS_FILE,
    }
    write_atomic(out_dir / "manifest.json", dump_json(manifest))
    timings = {"finished_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
               "phases_seconds": out.phases}
    write_atomic(out_dir / TIMINGS_FILE, dump_json(timings))


# -- experiments -------------------------------------------------------------------------


def _padding(out, cfg, sys, W, X0, dirs, grid, est, threads):
    """Attaches error-bound padding when ``bounds`` is configured."""
    b = cfg.get("bounds")
    if b is None:
        return est
    with out.phase("lipschitz"):
        L, H = rc.lipschitz_estimates(sys, W, X0, grid, probe_count=b.get("probes", 200),
                                      seed=cfg.get("seed", 0), threads=threads)
        delta = geo.covering_radius(dirs, b.get("covering_probes", 100_000))
    est = rc.padded_estimate(est, L, H, delta)
    out.series["eps_naive"]["alg1"] = est.meta["eps_naive"]
    out.series["eps_quad"]["alg1"] = est.meta["eps_quad"]
    return est


def _containment(out, name, X, est, slack, nodes=None):
    """Largest excess of Monte Carlo node states over the padded hull distance."""
    worst, bad = -np.inf, 0
    for k in (range(est.nodes) if nodes is None else nodes):
        excess = geo.distance_to_hull(X[k], est.hull(k)) - est.eps[k]
        bad += int(np.sum(excess > slack))
        worst = max(worst, float(np.max(excess)))
    out.check(name, bad == 0, outside=bad, max_distance_minus_eps=worst, slack=slack)


def run_reach(cfg, threads, seeds, mc_required=False) -> RunOutput:
    out = RunOutput()
    sys = build_system(cfg)
    W = build_set(_require(cfg, "disturbance"), sys.m, "$.disturbance", allow_point=False)
    X0 = _initial(cfg, sys)
    grid = _grid(cfg)
    dirs = _directions(cfg, sys.n)
    with out.phase("extremals"):
        est = rc.estimate_hulls(sys, W, X0, dirs, grid, threads=threads)
    if mc_required and "bounds" not in cfg:
        cfg = dict(cfg, bounds={})
    est = _padding(out, cfg, sys, W, X0, dirs, grid, est, threads)
    out.time = grid.times
    out.add_hulls(est)
    if "reference" in cfg:
        with out.phase("reference"):
            M_ref = cfg["reference"]["M"]
            ref = rc.estimate_hulls(sys, W, X0, _directions(dict(cfg, directions=dict(
                cfg["directions"], M=M_ref)), sys.n), grid, threads=threads)
            out.series["hausdorff"][f"reference_M{M_ref}"] = [
                geo.hausdorff(est.hull(k), ref.hull(k)) for k in range(est.nodes)]
    mc = cfg.get("monte_carlo", {} if mc_required else None)
    if mc is not None:
        with out.phase("monte_carlo"):
            for i in range(seeds):
                X = bl.monte_carlo_rollouts(sys, W, X0, mc.get("count", 1000),
                                            seed=cfg.get("seed", 0) + i, grid=grid)
                _containment(out, f"monte_carlo_seed{cfg.get('seed', 0) + i}", X, est,
                             mc.get("slack", 3e-3))
    return out


def _rect_spec(cfg, sys):
    d = _require(cfg, "disturbance")
    if d["type"] != "box":
        raise ConfigError("$.disturbance.type: dubins-rect needs a box disturbance")
    deltaW = _vec(d, "half_widths", sys.m, "$.disturbance")
    init = _require(cfg, "initial")
    if init["type"] == "box":
        return rx.RectSpec(deltaW, _vec(init, "center", sys.n, "$.initial"),
                           _vec(init, "half_widths", sys.n, "$.initial")), None
    return rx.RectSpec(deltaW), _initial(cfg, sys)


def run_dubins_rect(cfg, threads, seeds) -> RunOutput:
    out = RunOutput()
    sys = build_system(cfg)
    spec, X0 = _rect_spec(cfg, sys)
    grid = _grid(cfg)
    dirs = _directions(cfg, sys.n)
    lambdas = cfg.get("relaxation", {}).get("lambdas", [4.0, 8.0, 16.0])
    out.time = grid.times
    final = []
    for lam in lambdas:
        tag = f"lambda_{lam:g}"
        with out.phase(f"extremals_{tag}"):
            under = rx.estimate_hulls_rect(sys, spec, lam, "under", dirs, grid, X0=X0, threads=threads)
            over = rx.estimate_hulls_rect(sys, spec, lam, "over", dirs, grid, X0=X0, threads=threads)
        out.add_hulls(under, f"{tag}/under/")
        out.add_hulls(over, f"{tag}/over/")
        with out.phase(f"sandwich_{tag}"):
            worst = max(float(np.max(geo.distance_to_hull(under.states[k], over.hull(k))))
                        for k in range(grid.steps + 1))
            gap = [None] * grid.steps + [geo.hausdorff(under.hull(-1), over.hull(-1))]
        out.series["hausdorff"][f"{tag}_under_over"] = gap
        out.check(f"sandwich_{tag}", worst <= 1e-9, worst_distance=worst)
        final.append(gap[-1])
    out.check("gap_decreasing_in_lambda", bool(np.all(np.diff(final) < 0)), final_gaps=final)
    return out


def run_dubins_lift(cfg, threads, seeds) -> RunOutput:
    out = RunOutput()
    sys = build_system(cfg)
    if sys.m >= sys.n:
        raise ConfigError("$.system.G: dubins-lift needs fewer disturbance columns than states")
    W = build_set(_require(cfg, "disturbance"), sys.m, "$.disturbance", allow_point=False)
    X0 = _initial(cfg, sys)
    grid = _grid(cfg)
    dirs = _directions(cfg, sys.n)
    relax = cfg.get("relaxation", {})
    epsilons = sorted(relax.get("epsilons", [0.2, 0.1, 0.05]), reverse=True)
    out.time = grid.times
    mc = cfg.get("monte_carlo", {})
    with out.phase("monte_carlo"):
        Xs = [bl.monte_carlo_rollouts(sys, W, X0, mc.get("count", 1000),
                                      seed=cfg.get("seed", 0) + i, grid=grid) for i in range(seeds)]
    ests = []
    for eps in epsilons:
        tag = f"eps_{eps:g}"
        spec = rx.EpsExtensionSpec(sys, W, eps, relax.get("extra"), seed=cfg.get("seed", 0))
        with out.phase(f"extremals_{tag}"):
            est = rx.estimate_hulls_fullrank_relax(spec, X0, dirs, grid, threads=threads)
        out.add_hulls(est, f"{tag}/")
        with out.phase(f"containment_{tag}"):
            for i, X in enumerate(Xs):
                _containment(out, f"{tag}_monte_carlo_seed{cfg.get('seed', 0) + i}", X, est,
                             mc.get("slack", 3e-3))
        ests.append((eps, est))
    gaps = []
    for (e1, a), (e2, b) in zip(ests, ests[1:]):
        g = geo.hausdorff(a.hull(-1), b.hull(-1))
        out.series["hausdorff"][f"eps_{e1:g}_vs_{e2:g}"] = [None] * grid.steps + [g]
        gaps.append(g)
    out.checks["rate"] = {"passed": True, "final_gaps": gaps,
                          "ratios": [b / a for a, b in zip(gaps, gaps[1:])]}
    return out


def run_compare(cfg, threads, seeds) -> RunOutput:
    """Alg-1 vs RandUP at equal budget against a large-M reference, plus an ellipsoid tube."""
    cfg = _with_defaults(cfg)
    out = RunOutput()
    sys = build_system(cfg)
    W = build_set(_require(cfg, "disturbance"), sys.m, "$.disturbance", allow_point=False)
    X0 = _initial(cfg, sys)
    grid = _grid(cfg)
    dirs = _directions(cfg, sys.n)
    c = cfg.get("compare", {})
    dt = float(c.get("dt", grid.h * max(1, grid.steps // 10)))
    stride = dt / grid.h
    steps = (grid.tf - grid.t0) / dt
    if abs(stride - round(stride)) > 1e-9 or abs(steps - round(steps)) > 1e-9:
        raise ConfigError("$.compare.dt: must be a multiple of the grid step dividing the horizon")
    stride, steps = int(round(stride)), int(round(steps))
    nodes = list(range(0, grid.steps + 1, stride))
    out.time = grid.times[nodes]
    with out.phase("alg1"):
        est = rc.estimate_hulls(sys, W, X0, dirs, grid, threads=threads)
    M_ref = cfg.get("reference", {}).get("M", 4096)
    with out.phase("reference"):
        ref = rc.estimate_hulls(sys, W, X0, _directions(dict(cfg, directions=dict(
            cfg["directions"], M=M_ref)), sys.n), grid, threads=threads)
    dsys = bl.DiscreteSystem(sys, dt, steps, c.get("substeps", 10), "held", grid.t0)
    samples = c.get("samples", dirs.shape[0])
    with out.phase("randup"):
        ru = bl.randup_hulls(dsys, W, X0, samples, seed=cfg.get("seed", 0))
    for tag, e in (("alg1", est), ("reference", ref)):
        sub = rc.HullEstimate(dsys.grid, e.states[nodes], np.zeros(len(nodes)))
        out.add_hulls(sub, f"{tag}/")
    out.add_hulls(ru, "randup/")
    h = out.series["hausdorff"]
    # point-cloud distances in n >= 3 are costly, so only the final node is scored there
    scored = range(len(nodes)) if sys.n == 2 else [len(nodes) - 1]

    def series(hull_at):
        vals = [None] * len(nodes)
        for j in scored:
            vals[j] = geo.hausdorff(hull_at(j), ref.hull(nodes[j]))
        return vals

    with out.phase("hausdorff"):
        h["alg1"] = series(lambda j: est.hull(nodes[j]))
        h["randup"] = series(ru.hull)
    if c.get("tube", isinstance(X0, rc.Singleton)):
        if not isinstance(X0, rc.Singleton):
            raise ConfigError("$.compare.tube: the ellipsoid tube needs a point initial set")
        add = bl.DiscreteSystem(sys, dt, steps, c.get("substeps", 10), "additive", grid.t0)
        wbar = float(c.get("tube_wbar", getattr(W, "radius", 0.0)))
        with out.phase("tube"):
            Hbar = bl.estimate_step_hessian_lipschitz(add, X0.x0, c.get("hessian_radius", 0.2),
                                                      probes=c.get("hessian_probes", 1000),
                                                      seed=cfg.get("seed", 0))
            tube = bl.lipschitz_tube(add, X0.x0, wbar, Hbar)
            bdirs = geo.sample_sphere(sys.n, 2000, "random", seed=cfg.get("seed", 0))
            h["tube"] = series(lambda j: geo.hull_of(tube.boundary_points(j, bdirs)))
            bad = 0
            for i in range(seeds):
                Xmc = bl.monte_carlo_rollouts(add, geo.Ball(np.zeros(sys.n), wbar), X0,
                                              cfg.get("monte_carlo", {}).get("count", 1000),
                                              seed=cfg.get("seed", 0) + i)
                bad += sum(int(np.sum(~tube.contains(j, Xmc[j]))) for j in range(steps + 1))
        out.check("tube_soundness", bad == 0, outside=bad, Hbar=Hbar, wbar=wbar)
        lines = ["k," + ",".join(f"c{i + 1}" for i in range(sys.n)) + ","
                 + ",".join(f"Q{i + 1}{j + 1}" for i in range(sys.n) for j in range(sys.n))]
        for j in range(steps + 1):
            vals = list(tube.centers[j]) + list(tube.shapes[j].ravel())
            lines.append(f"{j}," + ",".join(fmt(v) for v in vals))
        out.files["tube.csv"] = "\n".join(lines) + "\n"
    final = {k: v[-1] for k, v in h.items()}
    out.check("ordering", all(final[k] > final["alg1"] for k in final if k != "alg1"),
              final_hausdorff=final, randup_over_alg1=final["randup"] / max(final["alg1"], 1e-300))
    return out


def _ocp_spec(m: dict) -> mpc.OcpSpec:
    kw = {}
    for key in ("horizon", "dt", "omega_max", "u_max"):
        if key in m:
            kw[key] = m[key]
    if "M" in m:
        kw["dirs"] = (geo.sample_sphere(3, m["M"], "fibonacci") if m["M"] > 0 else np.zeros((0, 3)))
    if "w_radius" in m:
        kw["W"] = geo.Ball(np.zeros(3), m["w_radius"])
    return mpc.OcpSpec(**kw)


def run_spacecraft_mpc(cfg, threads, seeds) -> RunOutput:
    out = RunOutput()
    m = cfg.get("mpc", {})
    base = _ocp_spec(m)
    seed = cfg.get("seed", 0)
    probes = m.get("padding_probes", 200)
    with out.phase("padding"):
        if probes > 0 and base.dirs.shape[0] > 0:
            _, L, H = mpc.padding_for(base, probes=probes, seed=seed)
            naive, quad = rc.error_bounds(L, H, geo.covering_radius(base.dirs))
            spec = replace(base, eps=quad)
            out.series["eps_naive"]["padding"] = naive
            out.series["eps_quad"]["padding"] = quad
        else:
            spec = base
    out.time = spec.node_times
    count = m.get("seeds", 1) if seeds is None else seeds
    steps = m.get("steps", 30)
    finals, violations, monotone, solves = [], 0, [], 0
    for i in range(count):
        s = seed + i
        x0 = mpc.sample_initial_state(geo.make_rng(1000 + s), m.get("max_angle_deg", 60.0),
                                      m.get("max_rate", 0.05))
        with out.phase("closed_loop"):
            tr = mpc.mpc_closed_loop(spec, x0, steps, seed=s)
        v = tr.violations(spec)
        violations += v
        finals.append(float(np.max(np.abs(tr.states[-1, 4:]))))
        for res in tr.results:
            e = res.errors
            solves += 1
            monotone.append(bool(np.all(np.diff(e[1:]) <= 1e-12)) if len(e) > 2 else True)
        head = "time,q0,q1,q2,q3,w1,w2,w3,u1,u2,u3"
        rows = [head]
        for k in range(steps + 1):
            # the final state has no applied control; its control fields stay empty
            u = [fmt(x) for x in tr.controls[k]] if k < steps else [""] * 3
            rows.append(",".join([fmt(tr.times[k])] + [fmt(x) for x in tr.states[k]] + u))
        out.files[f"run_{s}/trace.csv"] = "\n".join(rows) + "\n"
        srows = ["step,status,iterations,objective,max_violation,held"]
        for k, res in enumerate(tr.results):
            srows.append(f"{k},{res.status},{len(res.trace)},{fmt(res.objective)},"
                         f"{fmt(res.max_violation)},{int(tr.held[k])}")
        out.files[f"run_{s}/solves.csv"] = "\n".join(srows) + "\n"
    out.check("constraints", violations == 0, violations=violations, runs=count)
    out.checks["convergence"] = {"passed": True, "final_rate_inf": finals,
                                 "all_below_0.02": bool(max(finals) < 0.02)}
    out.checks["iteration_error"] = {"passed": True, "solves": solves,
                                     "non_increasing_fraction": float(np.mean(monotone))}
    return out


EXPERIMENTS = {
    "reach": lambda cfg, t, s: run_reach(cfg, t, s if s is not None else 1),
    "nn-loop": lambda cfg, t, s: run_reach(_with_defaults(cfg), t, s if s is not None else 1),
    "validate": lambda cfg, t, s: run_reach(cfg, t, s if s is not None else 1, mc_required=True),
    "dubins-rect": lambda cfg, t, s: run_dubins_rect(cfg, t, s),
    "dubins-lift": lambda cfg, t, s: run_dubins_lift(cfg, t, s if s is not None else 1),
    "compare": lambda cfg, t, s: run_compare(cfg, t, s if s is not None else 1),
    "spacecraft-mpc": run_spacecraft_mpc,
}


def _inputs(cfg: dict, raw: bytes) -> bytes:
    """Config bytes followed by any referenced weight file."""
    data = raw
    weights = cfg.get("system", {}).get("weights")
    if weights:
        data += Path(weights).read_bytes()
    return data


def run(config_path, out_dir=None, threads=None, seeds=None) -> int:
    """Runs one experiment and returns the process exit code."""
    try:
        cfg = load_config(config_path)
        if seeds is not None and seeds < 1:
            raise ConfigError("--seeds: must be >= 1")
        nthreads = resolve_threads(threads, cfg)
        out_dir = Path(out_dir or cfg.get("output") or f"chreach-out/{cfg['experiment']}")
        raw = Path(config_path).read_bytes()
        out = EXPERIMENTS[cfg["experiment"]](cfg, nthreads, seeds)
        write_outputs(out, cfg, _inputs(cfg, raw), out_dir)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ChreachError as err:
        print(f"numerical failure ({type(err).__name__}): {err}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as err:
        print(f"io error: {err.filename}: {err.strerror}", file=sys.stderr)
        return EXIT_FAILURE
    if out.failed:
        print(f"invariant check(s) failed: {', '.join(out.failed)} (see {out_dir / 'report.json'})",
              file=sys.stderr)
        return EXIT_FAILURE
    print(f"wrote {len(out.files) + 4} files to {out_dir}")
    return EXIT_OK


def validate(config_path) -> int:
    try:
        load_config(config_path)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{config_path}: ok")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="chreach", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"chreach {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--out", help="output directory (default: config 'output')")
    p_run.add_argument("--threads", type=int, help="worker threads (0 = one per CPU)")
    p_run.add_argument("--seeds", type=int, help="number of seeds for randomized checks")
    p_val = sub.add_parser("validate", help="check a config against the schema")
    p_val.add_argument("config")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "validate":
        return validate(args.config)
    return run(args.config, args.out, args.threads, args.seeds)


if __name__ == "__main__":
    sys.exit(main())
