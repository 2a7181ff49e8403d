"""Experiment harness: config-driven runs, trace files and rate diagnostics.

Every run writes, per solver, a trace file ``<name>.trace.csv`` and a
snapshot file ``<name>.theta.csv``, plus ``summary.csv`` and
``instance.json`` for the whole experiment.  Both per-solver files are
UTF-8 text with ``#``-prefixed header lines followed by a comma-separated
column-name row and the data rows.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from . import __version__
from .model import RelaxationSchedule
from .poisson import (PhantomSpec, PoissonDeblurModel, gaussian_blur_matrix,
                      synthesize_data, two_rail_phantom)
from .solver import IterateTrace, SolverConfig, em_run, run
from .trust_region import TrustRegionState, run_tr

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RateReport",
    "TRACE_COLUMNS",
    "TraceData",
    "cmd_compare",
    "cmd_rate",
    "cmd_run",
    "cmd_snapshot",
    "compare_traces",
    "load_config",
    "rate_report",
    "read_trace",
]

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("k", "loglik", "dist_to_ref", "beta", "delta", "step_norm",
                 "accepted", "wall_time", "kl_step", "grad_norm",
                 "inner_iters", "inexact")
TIMING_COLUMNS = ("wall_time",)


class ConfigError(ValueError):
    pass


# -- configuration ------------------------------------------------------------

DEFAULT_INSTANCE = {
    "file": None,
    "pixels": 64,
    "rails": [[24], [40]],
    "rail_height": 1.0,
    "background": 0.1,
    "sigma": 0.75,
    "noise": "noiseless",
    "seed": 0,
    "floor": None,
}
DEFAULT_THETA0 = {"rule": "uniform", "value": None, "path": None}
DEFAULT_REFERENCE = {"multiplier": 4, "tol_divisor": 100.0}
DEFAULT_RATE = {"tail": 0.3, "linear_low": 0.2, "linear_high": 0.999,
                "superlinear_below": 0.2, "slope_tol": 0.01}
DEFAULT_SOLVER = {
    "name": None,
    "algorithm": None,
    "max_outer_iters": 500,
    "grad_tol": None,
    "inner_max_iters": 100,
    "inner_tol": 1e-10,
    "use_closed_form": True,
    "schedule": None,
    "mode": "beta_driven",
    "delta0": 1.0,
    "beta0": 1.0,
    "m": 0.01,
    "m_prime": 0.9,
    "gamma1": 0.5,
    "gamma2": 2.0,
    "beta_up": 1.6,
    "beta_down": 0.5,
    "enforce_margin": True,
}
ALGORITHMS = ("em", "kpp", "tr")


def _merge(defaults: dict, given: Optional[dict], where: str) -> dict:
    given = given or {}
    if not isinstance(given, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    out = copy.deepcopy(defaults)
    out.update(given)
    return out


@dataclass
class ExperimentConfig:
    instance: dict
    theta0: dict
    reference: dict
    rate: dict
    solvers: List[dict]
    output_dir: Path
    snapshot_every: Optional[int] = None
    workers: int = 1

    def echo(self) -> dict:
        """JSON-friendly view used in trace headers."""
        return {"instance": self.instance, "theta0": self.theta0,
                "reference": self.reference, "rate": self.rate,
                "snapshot_every": self.snapshot_every}


def parse_config(raw: dict, base_dir: Path = Path("."),
                 seed: Optional[int] = None,
                 out: Optional[str] = None) -> ExperimentConfig:
    """Validate a raw config mapping and fill in defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    allowed = {"instance", "theta0", "reference", "rate", "solvers",
               "output_dir", "snapshot_every", "workers"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    instance = _merge(DEFAULT_INSTANCE, raw.get("instance"), "instance")
    if seed is not None:
        instance["seed"] = int(seed)
    if instance["noise"] not in ("noiseless", "poisson"):
        raise ConfigError(f"instance.noise: unknown mode {instance['noise']!r}")
    if instance["file"] is not None:
        instance["file"] = str((base_dir / instance["file"]).resolve())
    theta0 = _merge(DEFAULT_THETA0, raw.get("theta0"), "theta0")
    if theta0["rule"] not in ("uniform", "file"):
        raise ConfigError(f"theta0.rule: unknown rule {theta0['rule']!r}")
    if theta0["rule"] == "file":
        if not theta0["path"]:
            raise ConfigError("theta0.path is required for rule 'file'")
        theta0["path"] = str((base_dir / theta0["path"]).resolve())
    reference = _merge(DEFAULT_REFERENCE, raw.get("reference"), "reference")
    rate = _merge(DEFAULT_RATE, raw.get("rate"), "rate")

    solvers_raw = raw.get("solvers") or []
    if not isinstance(solvers_raw, list) or not solvers_raw:
        raise ConfigError("at least one solver config is required")
    solvers = []
    names = set()
    for i, s in enumerate(solvers_raw):
        spec = _merge(DEFAULT_SOLVER, s, f"solvers[{i}]")
        if spec["algorithm"] not in ALGORITHMS:
            raise ConfigError(f"solvers[{i}].algorithm must be one of "
                              f"{ALGORITHMS}, got {spec['algorithm']!r}")
        spec["name"] = str(spec["name"] or spec["algorithm"])
        if spec["name"] in names:
            raise ConfigError(f"duplicate solver name {spec['name']!r}")
        names.add(spec["name"])
        try:
            _solver_config(spec)
            if spec["algorithm"] == "tr":
                _tr_state(spec)
        except ValueError as exc:
            raise ConfigError(f"solvers[{i}]: {exc}") from exc
        solvers.append(spec)

    output_dir = out if out is not None else raw.get("output_dir", "runs")
    snapshot_every = raw.get("snapshot_every")
    if snapshot_every is not None and int(snapshot_every) < 1:
        raise ConfigError("snapshot_every must be a positive integer")
    workers = int(raw.get("workers", 1))
    if workers < 1:
        raise ConfigError("workers must be positive")
    return ExperimentConfig(instance, theta0, reference, rate, solvers,
                            Path(output_dir) if out is not None
                            else base_dir / output_dir,
                            None if snapshot_every is None else int(snapshot_every),
                            workers)


def load_config(path, seed: Optional[int] = None,
                out: Optional[str] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(raw, path.parent, seed=seed, out=out)


def _schedule(spec: dict) -> RelaxationSchedule:
    sched = spec["schedule"]
    if spec["algorithm"] == "em":
        return RelaxationSchedule.constant(1.0)
    if spec["algorithm"] == "tr":
        return RelaxationSchedule.trust_region_driven()
    if not sched:
        raise ValueError("kpp solvers need a schedule")
    sched = _merge({"kind": None, "beta0": 1.0, "ratio": None}, sched,
                   "schedule")
    if sched["kind"] == "constant":
        return RelaxationSchedule.constant(sched["beta0"])
    if sched["kind"] == "geometric":
        return RelaxationSchedule.geometric(sched["beta0"], sched["ratio"])
    raise ValueError(f"unknown schedule kind {sched['kind']!r}")


def _solver_config(spec: dict) -> SolverConfig:
    return SolverConfig(schedule=_schedule(spec),
                        max_outer_iters=int(spec["max_outer_iters"]),
                        grad_tol=spec["grad_tol"],
                        inner_max_iters=int(spec["inner_max_iters"]),
                        inner_tol=float(spec["inner_tol"]),
                        use_closed_form_em_when_beta_is_one=bool(
                            spec["use_closed_form"]))


def _tr_state(spec: dict) -> TrustRegionState:
    if spec["mode"] not in ("delta_driven", "beta_driven"):
        raise ValueError(f"unknown trust-region mode {spec['mode']!r}")
    return TrustRegionState(delta=spec["delta0"], beta=spec["beta0"],
                            m=spec["m"], m_prime=spec["m_prime"],
                            gamma1=spec["gamma1"], gamma2=spec["gamma2"])


# -- instances ------------------------------------------------------------------

def build_instance(instance: dict):
    """Return ``(model, theta_true or None)`` for an instance section."""
    if instance["file"] is not None:
        data = json.loads(Path(instance["file"]).read_text(encoding="utf-8"))
        model = PoissonDeblurModel(data["P"], data["y"],
                                   floor=data.get("floor", instance["floor"]))
        truth = data.get("theta_true")
        return model, None if truth is None else np.asarray(truth, dtype=float)
    spec = PhantomSpec(p=int(instance["pixels"]),
                       rails=tuple(tuple(r) for r in instance["rails"]),
                       rail_height=float(instance["rail_height"]),
                       background=float(instance["background"]))
    truth = two_rail_phantom(spec, floor=instance["floor"])
    P = gaussian_blur_matrix(spec.p, float(instance["sigma"]))
    y = synthesize_data(P, truth, instance["noise"], seed=instance["seed"])
    return PoissonDeblurModel(P, y, floor=instance["floor"]), truth


def instance_hash(model: PoissonDeblurModel) -> str:
    h = hashlib.sha256()
    for arr in (model.P, model.y, np.array([model.floor])):
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def initial_theta(theta0: dict, model: PoissonDeblurModel) -> np.ndarray:
    p = model.P.shape[1]
    if theta0["rule"] == "uniform":
        value = theta0["value"]
        value = model.mean_count_level() if value is None else float(value)
        return np.full(p, value)
    text = Path(theta0["path"]).read_text(encoding="utf-8")
    values = np.array([float(v) for v in text.replace(",", " ").split()])
    if values.size != p:
        raise ConfigError(f"theta0 file has {values.size} values, expected {p}")
    return values


def solve(model, theta0, spec: dict, cfg: Optional[SolverConfig] = None) -> IterateTrace:
    cfg = cfg or _solver_config(spec)
    if spec["algorithm"] == "em":
        return em_run(model, theta0, cfg)
    if spec["algorithm"] == "kpp":
        return run(model, theta0, cfg)
    return run_tr(model, theta0, _tr_state(spec), cfg, mode=spec["mode"],
                  beta_up=spec["beta_up"], beta_down=spec["beta_down"],
                  enforce_margin=spec["enforce_margin"])


def reference_solution(model, theta0, spec: dict, trace: IterateTrace,
                       reference: dict):
    """Limit of an extended, tighter run of the same solver.

    Returns ``(theta_star, note)``; falls back to the trace's final iterate
    when the extended run fails.
    """
    cfg = _solver_config(spec)
    cfg = cfg.replace(
        max_outer_iters=int(reference["multiplier"]) * max(cfg.max_outer_iters, 1),
        grad_tol=trace.grad_tol / float(reference["tol_divisor"]))
    try:
        ext = solve(model, theta0, spec, cfg)
    except Exception as exc:  # reference failure must not lose the trace
        log.warning("reference run for %s failed: %s", spec["name"], exc)
        return trace.final.theta.copy(), f"fallback-final ({exc})"
    return ext.final.theta.copy(), f"extended:{ext.stop_reason}:{ext.iterations}"


# -- trace files ------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def default_snapshot_every(p: int) -> int:
    return 1 if p <= 128 else 10


def snapshot_iterations(trace: IterateTrace, every: int) -> List[int]:
    ks = [r.k for r in trace.records if r.k % every == 0]
    if ks[-1] != trace.final.k:
        ks.append(trace.final.k)
    return ks


def write_trace(path: Path, trace: IterateTrace, theta_star: np.ndarray,
                header: Dict[str, str]) -> None:
    lines = ["# kppem trace"]
    lines += [f"# {key}: {value}" for key, value in header.items()]
    lines.append(",".join(TRACE_COLUMNS))
    for rec in trace.records:
        dist = float(np.linalg.norm(rec.theta - theta_star))
        row = (rec.k, rec.loglik, dist, rec.beta, rec.delta, rec.step_norm,
               rec.accepted, rec.wall_time, rec.kl_step, rec.grad_norm,
               rec.inner_iters, rec.inexact)
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_snapshots(path: Path, rows: Sequence, header: Dict[str, str],
                    p: int) -> None:
    lines = ["# kppem snapshots"]
    lines += [f"# {key}: {value}" for key, value in header.items()]
    lines.append(",".join(["k"] + [f"theta_{i}" for i in range(p)]))
    for k, theta in rows:
        lines.append(",".join([str(int(k))] + [_fmt(v) for v in theta]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class TraceData:
    """A trace file read back from disk."""

    header: Dict[str, str]
    columns: List[str]
    rows: List[Dict[str, Optional[float]]]
    path: Optional[Path] = None

    def column(self, name: str) -> List[Optional[float]]:
        return [row[name] for row in self.rows]

    def iterate_rows(self) -> List[Dict[str, Optional[float]]]:
        """Row 0 plus every row reached by an accepted step."""
        keep = self.rows[:1]
        for prev, row in zip(self.rows, self.rows[1:]):
            if prev["accepted"] == 1:
                keep.append(row)
        return keep

    def check_monotone(self, slack: float = 0.0) -> bool:
        """l_y never decreases across accepted steps."""
        for prev, row in zip(self.rows, self.rows[1:]):
            if prev["accepted"] == 1 and row["loglik"] < prev["loglik"] - slack:
                return False
        return True


def _read_table(path: Path):
    header: Dict[str, str] = {}
    columns: Optional[List[str]] = None
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            body = line[1:].strip()
            if ":" in body:
                key, value = body.split(":", 1)
                header[key.strip()] = value.strip()
            continue
        if not line.strip():
            continue
        if columns is None:
            columns = line.split(",")
            continue
        rows.append(line.split(","))
    if columns is None:
        raise ValueError(f"{path}: missing column row")
    return header, columns, rows


def read_trace(path) -> TraceData:
    header, columns, raw = _read_table(Path(path))
    rows = []
    for values in raw:
        if len(values) != len(columns):
            raise ValueError(f"{path}: ragged row {values!r}")
        rows.append({c: (None if v == "" else float(v))
                     for c, v in zip(columns, values)})
    return TraceData(header, columns, rows, Path(path))


# -- run ----------------------------------------------------------------------------

@dataclass
class SolverOutcome:
    name: str
    algorithm: str
    status: str
    trace: Optional[IterateTrace] = None
    message: str = ""


def _run_one(model, theta0, spec, exp: ExperimentConfig, ihash: str,
             snapshot_every: int) -> SolverOutcome:
    name = spec["name"]
    try:
        trace = solve(model, theta0, spec)
    except Exception as exc:
        log.error("solver %s failed: %s", name, exc)
        return SolverOutcome(name, spec["algorithm"], "error",
                             message=f"{type(exc).__name__}: {exc}")
    theta_star, note = reference_solution(model, theta0, spec, trace,
                                          exp.reference)
    out = exp.output_dir
    snap_name = f"{name}.theta.csv"
    header = {
        "artifact_version": __version__,
        "solver": name,
        "algorithm": trace.algorithm,
        "instance_hash": ihash,
        "grad_tol": repr(trace.grad_tol),
        "converged": str(trace.converged).lower(),
        "stop_reason": trace.stop_reason,
        "reference": note,
        "theta_star_norm": repr(float(np.linalg.norm(theta_star))),
        "snapshots": snap_name,
        "solver_config": json.dumps(spec, sort_keys=True),
        "experiment_config": json.dumps(exp.echo(), sort_keys=True),
    }
    write_trace(out / f"{name}.trace.csv", trace, theta_star, header)
    ks = set(snapshot_iterations(trace, snapshot_every))
    snaps = [(r.k, r.theta) for r in trace.records if r.k in ks]
    write_snapshots(out / snap_name, snaps,
                    {"solver": name, "instance_hash": ihash,
                     "snapshot_every": str(snapshot_every)},
                    model.P.shape[1])
    return SolverOutcome(name, spec["algorithm"], "ok", trace)


def _iterations_to_tol(trace: IterateTrace) -> Optional[int]:
    for rec in trace.records:
        if rec.grad_norm <= trace.grad_tol:
            return rec.k
    return None


def cmd_run(config_path, out: Optional[str] = None,
            seed: Optional[int] = None) -> int:
    """Run every configured solver; returns 0 when all of them succeeded."""
    exp = load_config(config_path, seed=seed, out=out)
    return run_experiment(exp)


def run_experiment(exp: ExperimentConfig) -> int:
    model, truth = build_instance(exp.instance)
    theta0 = model.validate(initial_theta(exp.theta0, model))
    ihash = instance_hash(model)
    exp.output_dir.mkdir(parents=True, exist_ok=True)
    every = exp.snapshot_every or default_snapshot_every(model.P.shape[1])

    instance_doc = {"instance_hash": ihash, "floor": model.floor,
                    "P": model.P.tolist(), "y": model.y.tolist(),
                    "theta_true": None if truth is None else truth.tolist(),
                    "theta0": theta0.tolist()}
    (exp.output_dir / "instance.json").write_text(
        json.dumps(instance_doc), encoding="utf-8")

    def job(spec):
        return _run_one(model, theta0, spec, exp, ihash, every)

    if exp.workers > 1:
        with ThreadPoolExecutor(max_workers=exp.workers) as pool:
            outcomes = list(pool.map(job, exp.solvers))
    else:
        outcomes = [job(spec) for spec in exp.solvers]

    lines = ["name,algorithm,status,iterations,iterations_to_tol,final_loglik,"
             "final_grad_norm,converged,stop_reason,message"]
    for o in outcomes:
        if o.trace is None:
            fields = [o.name, o.algorithm, o.status, "", "", "", "", "", "",
                      o.message.replace(",", ";")]
        else:
            t = o.trace
            fields = [o.name, o.algorithm, o.status, str(t.iterations),
                      _fmt(_iterations_to_tol(t)), _fmt(t.final.loglik),
                      _fmt(t.final.grad_norm), str(t.converged).lower(),
                      t.stop_reason, ""]
        lines.append(",".join(fields))
    (exp.output_dir / "summary.csv").write_text("\n".join(lines) + "\n",
                                                encoding="utf-8")
    return 0 if all(o.status == "ok" for o in outcomes) else 1


# -- rate -----------------------------------------------------------------------------

@dataclass
class RateReport:
    classification: str
    median_ratio: float
    slope: float
    ratios: List[float]
    tail: List[float]
    truncated_at: Optional[int] = None
    notes: List[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"classification": self.classification,
                "median_ratio": self.median_ratio, "slope": self.slope,
                "ratios": self.ratios, "tail": self.tail,
                "truncated_at": self.truncated_at, "notes": self.notes}


def rate_report(distances: Sequence[float], theta_star_norm: float,
                tail: float = 0.3, linear_low: float = 0.2,
                linear_high: float = 0.999, superlinear_below: float = 0.2,
                slope_tol: float = 0.01) -> RateReport:
    """Classify a sequence of distances ``||theta_k - theta*||``.

    Ratios ``r_k = e_{k+1} / e_k`` are formed after cutting the series at the
    first distance below ``1e2 * eps * ||theta*||``.  The tail window is the
    last ``ceil(tail * len(r))`` ratios (at least two).  The slope is the
    least-squares slope of ``log r_k`` against the index over that window.
    """
    if not 0 < tail <= 1:
        raise ValueError("tail fraction must lie in (0, 1]")
    e = np.asarray(distances, dtype=float)
    notes = []
    floor = 1e2 * np.finfo(float).eps * theta_star_norm
    below = np.nonzero(e <= floor)[0]
    truncated_at = None
    if below.size:
        truncated_at = int(below[0])
        e = e[:truncated_at]
        notes.append(f"series truncated at iterate {truncated_at}: distance "
                     f"below {floor:.3g}")
    if e.size < 3:
        notes.append("fewer than two ratios after truncation")
        return RateReport("inconclusive", math.nan, math.nan, [], [],
                          truncated_at, notes)
    r = e[1:] / e[:-1]
    n_tail = min(r.size, max(2, math.ceil(tail * r.size)))
    window = r[-n_tail:]
    median = float(np.median(window))
    slope = float(np.polyfit(np.arange(n_tail), np.log(window), 1)[0])
    if slope < 0 and median < superlinear_below:
        kind = "superlinear"
    elif linear_low <= median <= linear_high and abs(slope) <= slope_tol:
        kind = "linear"
    else:
        kind = "inconclusive"
    return RateReport(kind, median, slope, r.tolist(), window.tolist(),
                      truncated_at, notes)


def cmd_rate(trace_path, tail: float = 0.3, **thresholds) -> RateReport:
    trace = read_trace(trace_path)
    rows = trace.iterate_rows()
    n_accepted = sum(1 for row in trace.rows if row["accepted"] == 1)
    if n_accepted < 10:
        raise ValueError(f"rate analysis needs at least 10 accepted rows, "
                         f"trace has {n_accepted}")
    if "theta_star_norm" not in trace.header:
        raise ValueError("trace has no theta* reference")
    return rate_report([row["dist_to_ref"] for row in rows],
                       float(trace.header["theta_star_norm"]), tail=tail,
                       **thresholds)


# -- compare --------------------------------------------------------------------------

@dataclass
class Comparison:
    names: List[str]
    table: List[List[Optional[float]]]
    crossovers: Dict[str, Optional[int]]

    def to_csv(self) -> str:
        lines = [",".join(["k"] + [f"loglik_{n}" for n in self.names])]
        for k, row in enumerate(self.table):
            lines.append(",".join([str(k)] + [_fmt(v) for v in row]))
        return "\n".join(lines) + "\n"


def _crossover(base: Sequence[float], other: Sequence[float]) -> Optional[int]:
    n = min(len(base), len(other))
    dominated = [other[k] > base[k] for k in range(n)]
    if not dominated or not dominated[-1]:
        return None
    k = n - 1
    while k > 0 and dominated[k - 1]:
        k -= 1
    return k


def compare_traces(traces: Sequence[TraceData],
                   names: Optional[Sequence[str]] = None) -> Comparison:
    """Align traces by iteration; the first trace is the baseline.

    The crossover of a trace is the first iteration from which its
    log-likelihood exceeds the baseline's at every iteration of the
    common prefix, or None.
    """
    if len(traces) < 2:
        raise ValueError("need at least two traces to compare")
    hashes = {t.header.get("instance_hash") for t in traces}
    if len(hashes) != 1:
        raise ValueError(f"traces come from different instances: {sorted(map(str, hashes))}")
    names = list(names) if names else [t.header.get("solver", f"trace{i}")
                                       for i, t in enumerate(traces)]
    series = [t.column("loglik") for t in traces]
    length = max(len(s) for s in series)
    table = [[s[k] if k < len(s) else None for s in series]
             for k in range(length)]
    crossovers = {name: _crossover(series[0], s)
                  for name, s in zip(names[1:], series[1:])}
    return Comparison(names, table, crossovers)


def cmd_compare(trace_paths: Sequence, out: Optional[str] = None) -> Comparison:
    traces = [read_trace(p) for p in trace_paths]
    names = []
    for i, t in enumerate(traces):
        name = t.header.get("solver", Path(trace_paths[i]).stem)
        names.append(name if name not in names else f"{name}#{i}")
    comparison = compare_traces(traces, names)
    if out is not None:
        Path(out).write_text(comparison.to_csv(), encoding="utf-8")
    return comparison


# -- snapshots ----------------------------------------------------------------------

def read_snapshots(path):
    header, columns, raw = _read_table(Path(path))
    ks = [int(values[0]) for values in raw]
    thetas = np.array([[float(v) for v in values[1:]] for values in raw])
    return header, ks, thetas.reshape(len(ks), len(columns) - 1)


def parse_iterations(text: str) -> List:
    """``"0,10,final"`` -> ``[0, 10, "final"]``; empty text gives ``[]``."""
    items = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        items.append("final" if token == "final" else int(token))
    return items


def cmd_snapshot(trace_path, iterations: Sequence, out) -> Path:
    """Write the requested stored iterates as rows of a matrix file."""
    trace = read_trace(trace_path)
    snap_path = Path(trace_path).parent / trace.header.get(
        "snapshots", Path(trace_path).name.replace(".trace.csv", ".theta.csv"))
    header, ks, thetas = read_snapshots(snap_path)
    final_k = int(trace.rows[-1]["k"])
    wanted = [final_k if it == "final" else int(it) for it in iterations]
    index = {k: i for i, k in enumerate(ks)}
    missing = [k for k in wanted if k not in index]
    if missing:
        raise KeyError(f"iterations {missing} were not snapshotted; available "
                       f"cadence every {header.get('snapshot_every', '?')} "
                       f"(stored: {ks[:5]}{'...' if len(ks) > 5 else ''} "
                       f"final {ks[-1] if ks else None})")
    rows = [(k, thetas[index[k]]) for k in wanted]
    out = Path(out)
    write_snapshots(out, rows, {"source": str(Path(trace_path).name),
                                "instance_hash": trace.header.get(
                                    "instance_hash", "")},
                    thetas.shape[1])
    return out
