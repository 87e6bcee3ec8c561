"""Command-line front end: audit -> sample -> simulate -> analyze.

Every stage reads one JSON run configuration; scalar fields can be
overridden with flags or ``--set dotted.key=value``.  Each stage writes its
outputs plus ``manifest.json`` (config hash, seed, tool version) into
``<output_dir>/<stage>/``.

Configuration schema (all blocks optional except ``seed``)::

    {
      "seed": 20240501,                 # master seed, 0 <= seed < 2**64
      "output_dir": "run",
      "workers": 1,                     # processes used by `simulate`
      "potential": {"kind": "lennard_jones" | "smooth_bump" | "zero",
                    "epsilon": 1.0, "sigma": 1.0, "cutoff": 2.5, "dimension": 2},
      "box": {"side_length": 10.0},
      "audit": {"p": [2, 4]},
      "gcmc": {"activity": 0.25, "samples": 200, "burn_in_sweeps": 200,
               "thin_sweeps": 10, "mode": "independent" | "chain",
               "displacement_scale": 0.3},
      "dynamics": {"T": 1.0, "dt": 1e-4, "ensemble_size": 200, "record_stride": 100,
                   "scheme": "euler_maruyama" | "substep_adaptive", "force_cap": 1e6},
      "functionals": {"<name>": {"kind": ..., ...}},
      "estimators": [{"name": ..., "required": true, ...}]
    }

Functional kinds: ``bump`` (center, radius, amplitude), ``smooth_coordinate``
(axis, half_width, margin, center), ``gaussian_clipped`` (center, width,
radius, amplitude), ``plateau`` (half_width, margin, center), ``cylinder``
(outer, inner: list of names), ``direction_field`` (profile, direction),
``radial_field`` (profile, center).  Outer kinds: ``linear``, ``quadratic``,
``sine``, ``tanh``, ``ratio``, ``constant``.

Estimator names: ``martingale``, ``diffusion_matrix``, ``invariance_scaling``,
``mean_forward_velocity``, ``ibp``, ``ibp2``, ``dirichlet``, ``feynman_kac``,
``reconstruction``, ``stationarity``, ``ergodicity``.

Seeds: stage ``s`` uses ``master ^ fold64(sha256(s))``; ensemble member or
chain ``k`` of that stage uses ``stage_seed ^ k``.

Exit codes: 0 success, 1 a required check failed, 2 invalid configuration.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata
from pathlib import Path

import numpy as np

from . import estimators as est
from . import functionals as fn
from .configuration import TorusBox, load_snapshot, save_snapshot
from .dynamics import SCHEMES, CoupledState, IntegratorParams, Trajectory, simulate_ensemble
from .gibbs import GcmcParams, sample_chain, sample_independent
from .potential import audit_conditions, lennard_jones, slow_tail_attraction, smooth_bump, zero_potential

STAGES = ("audit", "sample", "simulate", "analyze")
ESTIMATORS = ("martingale", "diffusion_matrix", "invariance_scaling", "mean_forward_velocity", "ibp", "ibp2",
              "dirichlet", "feynman_kac", "reconstruction", "stationarity", "ergodicity")
POTENTIAL_KINDS = ("lennard_jones", "smooth_bump", "zero", "slow_tail")

DEFAULTS = {
    "output_dir": "run",
    "workers": 1,
    "potential": {"kind": "lennard_jones", "epsilon": 1.0, "sigma": 1.0, "cutoff": 2.5, "dimension": 2},
    "box": {"side_length": 10.0},
    "audit": {"p": [2, 4]},
    "gcmc": {"activity": 0.25, "samples": 200, "burn_in_sweeps": 200, "thin_sweeps": 10, "mode": "independent",
             "displacement_scale": 0.3},
    "dynamics": {"T": 1.0, "dt": 1e-4, "ensemble_size": 200, "record_stride": 100, "scheme": "euler_maruyama",
                 "force_cap": 1e6},
    "functionals": {},
    "estimators": [],
}


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# -- configuration ----------------------------------------------------------


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def _number(cfg, path, positive=False, integer=False, minimum=None):
    node = cfg
    for k in path.split("."):
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(path, "missing")
        node = node[k]
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise ConfigError(path, f"expected a number, got {node!r}")
    if integer and int(node) != node:
        raise ConfigError(path, f"expected an integer, got {node!r}")
    if positive and not node > 0:
        raise ConfigError(path, f"must be positive, got {node!r}")
    if minimum is not None and node < minimum:
        raise ConfigError(path, f"must be >= {minimum}, got {node!r}")
    return int(node) if integer else float(node)


def validate(cfg: dict) -> dict:
    """Check a merged configuration; raises ConfigError naming the field."""
    if "seed" not in cfg or cfg["seed"] is None:
        raise ConfigError("seed", "missing (a master seed is required)")
    seed = cfg["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("seed", f"must be an integer in [0, 2**64), got {seed!r}")
    pot = cfg["potential"]
    if pot.get("kind") not in POTENTIAL_KINDS:
        raise ConfigError("potential.kind", f"must be one of {POTENTIAL_KINDS}, got {pot.get('kind')!r}")
    d = _number(cfg, "potential.dimension", positive=True, integer=True)
    if pot["kind"] in ("lennard_jones", "smooth_bump"):
        _number(cfg, "potential.epsilon", positive=True)
        _number(cfg, "potential.sigma", positive=True)
    L = _number(cfg, "box.side_length", positive=True)
    if pot["kind"] == "lennard_jones":
        if pot.get("cutoff") is None:
            raise ConfigError("potential.cutoff", "required for lennard_jones on a torus")
        rc = _number(cfg, "potential.cutoff", positive=True)
        if rc > L / 2:
            raise ConfigError("potential.cutoff", f"cutoff {rc} exceeds half the box side {L / 2}")
    if pot["kind"] == "smooth_bump" and float(pot["sigma"]) > L / 2:
        raise ConfigError("potential.sigma", "bump range exceeds half the box side")
    ps = cfg["audit"].get("p", [2])
    for p in ps if isinstance(ps, list) else [ps]:
        if isinstance(p, bool) or not isinstance(p, (int, float)) or p < 2:
            raise ConfigError("audit.p", f"each p must be a number >= 2, got {p!r}")
    _number(cfg, "gcmc.activity", minimum=0)
    _number(cfg, "gcmc.samples", positive=True, integer=True)
    _number(cfg, "gcmc.burn_in_sweeps", integer=True, minimum=0)
    _number(cfg, "gcmc.thin_sweeps", positive=True, integer=True)
    _number(cfg, "gcmc.displacement_scale", positive=True)
    if cfg["gcmc"].get("mode") not in ("independent", "chain"):
        raise ConfigError("gcmc.mode", "must be 'independent' or 'chain'")
    T = _number(cfg, "dynamics.T", minimum=0)
    dt = _number(cfg, "dynamics.dt", positive=True)
    if abs(T / dt - round(T / dt)) > 1e-6:
        raise ConfigError("dynamics.T", "must be an integer multiple of dt")
    _number(cfg, "dynamics.ensemble_size", positive=True, integer=True)
    _number(cfg, "dynamics.record_stride", positive=True, integer=True)
    _number(cfg, "dynamics.force_cap", positive=True)
    if cfg["dynamics"].get("scheme") not in SCHEMES:
        raise ConfigError("dynamics.scheme", f"must be one of {SCHEMES}")
    _number(cfg, "workers", positive=True, integer=True)
    _check_functionals(cfg["functionals"], d)
    if not isinstance(cfg["estimators"], list):
        raise ConfigError("estimators", "must be a list")
    for k, e in enumerate(cfg["estimators"]):
        if not isinstance(e, dict) or e.get("name") not in ESTIMATORS:
            raise ConfigError(f"estimators[{k}].name", f"must be one of {ESTIMATORS}")
        for role in ("F", "G", "v", "f"):
            if role in e and e[role] not in cfg["functionals"]:
                raise ConfigError(f"estimators[{k}].{role}", f"functional {e[role]!r} is not declared")
    return cfg


_FUNCTION_KINDS = ("bump", "smooth_coordinate", "gaussian_clipped", "plateau")
_FIELD_KINDS = ("direction_field", "radial_field")


def _kind(spec) -> str:
    return str(spec.get("kind", "")).replace("-", "_")


def _check_functionals(decl: dict, d: int) -> None:
    if not isinstance(decl, dict):
        raise ConfigError("functionals", "must be an object")
    for name, spec in decl.items():
        k = _kind(spec)
        where = f"functionals.{name}"
        if k not in _FUNCTION_KINDS + _FIELD_KINDS + ("cylinder",):
            raise ConfigError(f"{where}.kind", f"unknown kind {spec.get('kind')!r}")
        for key in ("center", "direction"):
            if key in spec and len(spec[key]) != d:
                raise ConfigError(f"{where}.{key}", f"expected {d} coordinates")
        refs = list(spec.get("inner", [])) + ([spec["profile"]] if "profile" in spec else [])
        for r in refs:
            if r not in decl:
                raise ConfigError(where, f"references undeclared functional {r!r}")
            if _kind(decl[r]) not in _FUNCTION_KINDS:
                raise ConfigError(where, f"{r!r} is not a test function")
        if k == "cylinder":
            try:
                build_functional(decl, name, d)
            except (TypeError, ValueError, KeyError) as exc:
                raise ConfigError(where, str(exc)) from exc


def load_config(path, overrides: dict | None = None) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError("config", f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    cfg = _merge(DEFAULTS, raw)
    for k, v in (overrides or {}).items():
        apply_override(cfg, k, v)
    return validate(cfg)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def stage_seed(master: int, stage: str) -> int:
    """master XOR the 64-bit fold of sha256(stage)."""
    digest = hashlib.sha256(stage.encode()).digest()
    fold = 0
    for k in range(0, 32, 8):
        fold ^= int.from_bytes(digest[k : k + 8], "little")
    return (int(master) ^ fold) & 0xFFFFFFFFFFFFFFFF


# -- builders ---------------------------------------------------------------


def build_potential(cfg: dict):
    p = cfg["potential"]
    d = int(p["dimension"])
    kind = p["kind"]
    if kind == "lennard_jones":
        return lennard_jones(float(p["epsilon"]), float(p["sigma"]), d, cutoff=float(p["cutoff"]))
    if kind == "smooth_bump":
        return smooth_bump(float(p["epsilon"]), float(p["sigma"]), d)
    if kind == "slow_tail":
        return slow_tail_attraction(d)
    return zero_potential(d)


def build_box(cfg: dict) -> TorusBox:
    return TorusBox(float(cfg["box"]["side_length"]), int(cfg["potential"]["dimension"]))


def _outer(spec: dict, arity: int) -> fn.OuterFunction:
    k = _kind(spec)
    if k == "linear":
        return fn.linear_outer(spec["coeffs"], spec.get("const", 0.0))
    if k == "quadratic":
        return fn.quadratic_outer(spec["A"], spec.get("b"), spec.get("c", 0.0))
    if k == "sine":
        return fn.sine_outer(spec["freqs"], spec.get("phase", 0.0))
    if k == "tanh":
        return fn.tanh_outer(spec["weights"])
    if k == "ratio":
        return fn.ratio_outer(float(spec["offset"]))
    if k == "constant":
        return fn.constant_outer(float(spec["level"]), arity)
    raise ValueError(f"unknown outer kind {spec.get('kind')!r}")


def build_functional(decl: dict, name: str, d: int):
    spec = decl[name]
    k = _kind(spec)
    center = tuple(float(c) for c in spec.get("center", (0.0,) * d))
    if k == "bump":
        return fn.Bump(center, float(spec["radius"]), float(spec.get("amplitude", 1.0)))
    if k == "smooth_coordinate":
        return fn.SmoothCoordinate(int(spec["axis"]), float(spec["half_width"]), float(spec["margin"]), center)
    if k == "gaussian_clipped":
        return fn.gaussian_clipped(center, float(spec["width"]), float(spec["radius"]), float(spec.get("amplitude", 1.0)))
    if k == "plateau":
        return fn.PlateauBox(float(spec["half_width"]), float(spec["margin"]), center, float(spec.get("amplitude", 1.0)))
    if k == "cylinder":
        inner = tuple(build_functional(decl, r, d) for r in spec["inner"])
        return fn.CylinderFunction(_outer(spec["outer"], len(inner)), inner)
    if k == "direction_field":
        return fn.DirectionField(build_functional(decl, spec["profile"], d), tuple(float(a) for a in spec["direction"]))
    if k == "radial_field":
        return fn.RadialField(build_functional(decl, spec["profile"], d), center)
    raise ValueError(f"unknown functional kind {spec.get('kind')!r}")


def build_observable(spec: dict, cfg: dict, potential):
    k = _kind(spec)
    if k == "subbox_count":
        return est.subbox_count(float(spec["half_width"]))
    if k == "neighbor_count":
        return est.neighbor_count(float(spec["radius"]))
    if k == "field_energy":
        return est.field_energy(potential)
    if k == "constant":
        return est.constant_observable(float(spec["value"]))
    if k == "linear":
        d = int(cfg["potential"]["dimension"])
        return est.linear_observable(build_functional(cfg["functionals"], spec["function"], d))
    raise ConfigError("observables", f"unknown observable kind {spec.get('kind')!r}")


def gcmc_params(cfg: dict, seed: int) -> GcmcParams:
    g = cfg["gcmc"]
    return GcmcParams(activity=float(g["activity"]), displacement_scale=float(g["displacement_scale"]), seed=seed)


def integrator_params(cfg: dict, seed: int) -> IntegratorParams:
    dyn = cfg["dynamics"]
    return IntegratorParams(dt=float(dyn["dt"]), scheme=dyn["scheme"], force_cap=float(dyn["force_cap"]),
                            record_stride=int(dyn["record_stride"]), seed=seed, series_stride=1)


# -- file formats -----------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v))


def write_manifest(directory: Path, cfg: dict, stage: str, extra: dict | None = None) -> None:
    manifest = {
        "tool": "tagdiff",
        "version": tool_version(),
        "stage": stage,
        "seed": cfg["seed"],
        "stage_seed": stage_seed(cfg["seed"], stage),
        "config_sha256": config_hash(cfg),
        "config": cfg,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    manifest.update(extra or {})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_trajectory_csv(traj: Trajectory, path) -> None:
    d = traj.displacement.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"X{k + 1}" for k in range(d)] + [f"C{k + 1}" for k in range(d)] + ["n"])
        for t, x, c, n in zip(traj.times, traj.displacement, traj.compensator, traj.counts):
            w.writerow([_fmt(t)] + [_fmt(v) for v in x] + [_fmt(v) for v in c] + [int(n)])


def read_trajectory_csv(path) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
    d = (len(header) - 2) // 2
    if header[0] != "t" or header[-1] != "n" or len(header) != 2 * d + 2:
        raise ValueError(f"unexpected trajectory header {header}")
    return Trajectory(body[:, 0], body[:, 1 : 1 + d], body[:, 1 + d : 1 + 2 * d], body[:, -1].astype(np.int64))


def write_report_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["estimator", "estimate", "stderr", "pass"])
        for name, e, s, ok in rows:
            w.writerow([name, _fmt(e), _fmt(s), "true" if ok else "false"])


def _stage_dir(cfg: dict, stage: str) -> Path:
    path = Path(cfg["output_dir"]) / stage
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_box(directory: Path, box: TorusBox) -> None:
    (directory / "box.json").write_text(json.dumps({"side_length": box.side_length, "dimension": box.dimension}) + "\n")


def _read_box(directory: Path) -> TorusBox:
    meta = json.loads((directory / "box.json").read_text())
    return TorusBox(float(meta["side_length"]), int(meta["dimension"]))


# -- stages -----------------------------------------------------------------


def run_audit(cfg: dict) -> int:
    out = _stage_dir(cfg, "audit")
    pot = build_potential(cfg)
    ps = cfg["audit"]["p"] if isinstance(cfg["audit"]["p"], list) else [cfg["audit"]["p"]]
    reports = [audit_conditions(pot, float(p)) for p in ps]
    ok = all(r.passed for r in reports)
    doc = {"potential": cfg["potential"], "reports": [r.to_dict() for r in reports], "pass": ok}
    (out / "audit_report.json").write_text(json.dumps(doc, indent=2) + "\n")
    write_manifest(out, cfg, "audit")
    print(json.dumps(doc, indent=2))
    return 0 if ok else 1


def _sample_configs(cfg: dict, potential, box: TorusBox) -> list:
    g = cfg["gcmc"]
    seed = stage_seed(cfg["seed"], "sample")
    params = gcmc_params(cfg, seed)
    if g["mode"] == "chain":
        res = sample_chain(params, potential, box, int(g["samples"]), thin_sweeps=int(g["thin_sweeps"]),
                           burn_in_sweeps=int(g["burn_in_sweeps"]), rng=np.random.default_rng(np.random.SeedSequence(seed)))
        return res.samples
    return sample_independent(params, potential, box, int(g["samples"]), int(g["burn_in_sweeps"]), seed_base=seed)


def run_sample(cfg: dict) -> int:
    out = _stage_dir(cfg, "sample")
    pot, box = build_potential(cfg), build_box(cfg)
    box.check_potential(pot)
    samples = _sample_configs(cfg, pot, box)
    _write_box(out, box)
    for k, c in enumerate(samples):
        save_snapshot(c, out / f"snapshot_{k:05d}.csv", sidecar=False)
    counts = [c.n for c in samples]
    write_manifest(out, cfg, "sample", {"samples": len(samples), "mean_count": float(np.mean(counts))})
    return 0


def load_samples(cfg: dict) -> list:
    directory = Path(cfg["output_dir"]) / "sample"
    box = _read_box(directory)
    return [load_snapshot(p, box) for p in sorted(directory.glob("snapshot_*.csv"))]


def _simulate_chunk(args):
    initial, T, params, potential, seed_base, indices = args
    return simulate_ensemble(initial, T, params, potential, seed_base=seed_base, indices=indices)


def simulate_members(cfg: dict, initial: list, potential) -> list:
    """Integrate the ensemble, split across ``workers`` processes.  Member k's
    noise depends only on (stage seed, k), so results do not depend on the
    split."""
    seed = stage_seed(cfg["seed"], "simulate")
    params = integrator_params(cfg, seed)
    T = float(cfg["dynamics"]["T"])
    M = len(initial)
    workers = min(int(cfg["workers"]), M)
    if workers <= 1:
        return simulate_ensemble(initial, T, params, potential, seed_base=seed)
    chunks = [[int(i) for i in c] for c in np.array_split(np.arange(M), workers) if len(c)]
    jobs = [([initial[i] for i in c], T, params, potential, seed, c) for c in chunks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_simulate_chunk, jobs))
    return [t for part in parts for t in part]


def run_simulate(cfg: dict) -> int:
    out = _stage_dir(cfg, "simulate")
    pot, box = build_potential(cfg), build_box(cfg)
    box.check_potential(pot)
    M = int(cfg["dynamics"]["ensemble_size"])
    sample_dir = Path(cfg["output_dir"]) / "sample"
    if (sample_dir / "box.json").exists():
        configs = load_samples(cfg)
        if len(configs) < M:
            raise ConfigError("dynamics.ensemble_size", f"needs {M} initial configurations, sample stage has {len(configs)}")
    else:
        configs = _sample_configs(_merge(cfg, {"gcmc": {"samples": M}}), pot, box)
    initial = [CoupledState.at_origin(c) for c in configs[:M]]
    trajectories = simulate_members(cfg, initial, pot)
    (out / "trajectories").mkdir(exist_ok=True)
    snap_root = out / "snapshots"
    snap_root.mkdir(exist_ok=True)
    _write_box(snap_root, box)
    dt = float(cfg["dynamics"]["dt"])
    for k, t in enumerate(trajectories):
        write_trajectory_csv(t, out / "trajectories" / f"trajectory_{k:05d}.csv")
        sdir = snap_root / f"trajectory_{k:05d}"
        sdir.mkdir(exist_ok=True)
        for time, env in t.snapshots:
            save_snapshot(env, sdir / f"step_{int(round(time / dt)):09d}.csv", sidecar=False)
    caps = sum(t.cap_event_count for t in trajectories)
    evals = sum(t.force_evaluations for t in trajectories)
    write_manifest(out, cfg, "simulate", {"trajectories": len(trajectories), "cap_events": caps,
                                          "force_evaluations": evals})
    return 0


def load_trajectories(cfg: dict) -> list:
    directory = Path(cfg["output_dir"]) / "simulate" / "trajectories"
    return [read_trajectory_csv(p) for p in sorted(directory.glob("trajectory_*.csv"))]


def load_trajectory_snapshots(cfg: dict) -> list:
    """Per trajectory: list of (step, Configuration) in step order."""
    root = Path(cfg["output_dir"]) / "simulate" / "snapshots"
    box = _read_box(root)
    out = []
    for tdir in sorted(p for p in root.iterdir() if p.is_dir()):
        out.append([(int(p.stem.split("_")[1]), load_snapshot(p, box)) for p in sorted(tdir.glob("step_*.csv"))])
    return out


def _analysis_seed(cfg: dict, k: int) -> int:
    return stage_seed(cfg["seed"], "analyze") ^ k


def run_estimator(spec: dict, cfg: dict, data: dict, index: int):
    """Returns an EstimatorReport or ReportBundle."""
    name = spec["name"]
    pot = data["potential"]
    d = int(cfg["potential"]["dimension"])
    decl = cfg["functionals"]

    def get(role):
        return build_functional(decl, spec[role], d)

    if name == "martingale":
        return est.martingale_diagnostics(data["trajectories"](), alpha=float(spec.get("alpha", 0.01)))
    if name == "diffusion_matrix":
        trs = data["trajectories"]()
        T = trs[0].times[-1]
        grid = np.asarray(spec.get("t_grid") or np.linspace(T / 10, T, 10), float)
        res = est.diffusion_matrix(trs, grid)
        bundle = est.ReportBundle(res.reports)
        bundle.append(est.EstimatorReport("diffusion.D_hat", res.D_hat, res.D_se, len(trs),
                                          est.ToleranceRule("min_value", threshold=-np.inf)))
        # reported only: whether D sits below the bare 2I is not asserted
        gap = float(np.linalg.eigvalsh(2.0 * np.eye(d) - res.D_hat).min())
        bundle.append(est.EstimatorReport("diffusion.min_eig_2I_minus_D", gap, 0.0, len(trs),
                                          est.ToleranceRule("min_value", threshold=-np.inf)))
        if spec.get("free_particle"):
            bundle.append(est.free_particle_report(res))
        if spec.get("isotropy") and d >= 2:
            bundle.append(est.isotropy_report(res, trs))
        return bundle
    if name == "invariance_scaling":
        trs = data["trajectories"]()
        res = est.invariance_scaling_test(trs, spec.get("epsilon_grid", [1.0, 2**-0.5, 0.5]),
                                          spec.get("t_points", list(np.linspace(0, 1, 11))))
        return res.reports
    if name in ("ibp", "ibp2", "dirichlet"):
        samples = data["samples"]()
        if name == "ibp":
            return est.ibp_check(get("F"), get("v"), samples, pot, name=f"ibp1[{spec['F']},{spec['v']}]")
        if name == "ibp2":
            return est.ibp2_check(get("F"), get("G"), samples, pot, name=f"ibp2[{spec['F']},{spec['G']}]")
        return est.generator_symmetry_check(get("F"), get("G"), samples, pot, name=f"dirichlet[{spec['F']},{spec['G']}]")
    if name == "feynman_kac":
        samples = data["samples"]()[: int(spec.get("configurations", 3))]
        f = get("f") if "f" in spec else None
        return est.ReportBundle(
            est.feynman_kac_check(get("F"), c, pot, delta=float(spec.get("delta", 1e-5)), draws=int(spec.get("draws", 20000)),
                                  seed=_analysis_seed(cfg, index * 1000 + k), f=f, name=f"feynman_kac[{spec['F']}#{k}]")
            for k, c in enumerate(samples))
    if name == "mean_forward_velocity":
        samples = data["samples"]()[: int(spec.get("configurations", 10))]
        params = integrator_params(cfg, 0)
        return est.ReportBundle(
            est.mean_forward_velocity(c, pot, spec.get("delta_grid"), int(spec.get("ensemble_size", 500)), params,
                                      seed=_analysis_seed(cfg, index * 1000 + k), name=f"mean_forward_velocity#{k}")
            for k, c in enumerate(samples))
    if name == "reconstruction":
        snaps = data["snapshots"]()
        trs = data["trajectories"]()
        if int(cfg["dynamics"]["record_stride"]) != 1:
            raise ConfigError("dynamics.record_stride", "reconstruction needs the environment at every step (stride 1)")
        dt = float(cfg["dynamics"]["dt"])
        window = float(spec.get("window", trs[0].times[-1]))
        steps = int(round(window / dt))
        axis = int(spec.get("axis", 0))
        schedules = [fn.averaging_schedule(pot, float(n), float(spec.get("delta", 0.005))) for n in spec["n_grid"]]
        acc = est.ReconstructionAccumulator(axis, schedules, pot, dt, spec.get("shell_rule", "step"))
        for s in range(steps + 1):
            acc.update_configurations([sn[s][1] for sn in snaps], [t.displacement[s, axis] for t in trs])
        return acc.report(float(spec.get("bound_factor", 3.0)))
    if name in ("stationarity", "ergodicity"):
        obs = [build_observable(o, cfg, pot) for o in spec.get("observables", [{"kind": "subbox_count", "half_width": 2.0}])]
        snaps = data["snapshots"]()
        if name == "stationarity":
            return est.stationarity_check([s[0][1] for s in snaps], [s[-1][1] for s in snaps], obs)
        start = int(round(float(spec.get("burn_in", 0.0)) / float(cfg["dynamics"]["dt"])))
        series = []
        for traj in snaps:
            kept = [c for step, c in traj if step >= start]
            rel, mask = est.configurations_as_batch(kept)
            series.append(np.stack([o(rel, mask) for o in obs], axis=-1))
        ta = np.stack([est.time_average(s.T) for s in series])
        rel, mask = est.configurations_as_batch(data["samples"]())
        ens = np.stack([o(rel, mask) for o in obs], axis=-1)
        return est.ergodicity_time_average(ta, ens, [getattr(o, "__name__", "obs") for o in obs],
                                           ensemble_correlated=cfg["gcmc"]["mode"] == "chain")
    raise ConfigError(f"estimators[{index}].name", f"unknown estimator {name!r}")


def run_analyze(cfg: dict) -> int:
    out = _stage_dir(cfg, "analyze")
    pot = build_potential(cfg)
    cache: dict = {}

    def lazy(key, loader):
        def get():
            if key not in cache:
                cache[key] = loader(cfg)
            return cache[key]
        return get

    data = {"potential": pot, "trajectories": lazy("t", load_trajectories), "samples": lazy("s", load_samples),
            "snapshots": lazy("n", load_trajectory_snapshots)}
    results, rows, failed = [], [], []
    for k, spec in enumerate(cfg["estimators"]):
        res = run_estimator(spec, cfg, data, k)
        bundle = res if isinstance(res, est.ReportBundle) else est.ReportBundle([res])
        required = bool(spec.get("required", True))
        results.append({"estimator": spec, "required": required, "pass": bundle.passed, "reports": bundle.to_dict()})
        rows.extend(bundle.rows())
        if required and not bundle.passed:
            failed.append(spec["name"])
        for r in bundle:
            print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}")
    doc = {"results": results, "pass": not failed, "failed": failed}
    if int(cfg["potential"]["dimension"]) == 1:
        # singular interactions in one dimension block passing particles; the
        # ergodic and diffusive statements do not cover this case
        doc["out_of_theory"] = True
        print("note: d=1 runs are outside the regime the estimators are calibrated for")
    (out / "report.json").write_text(json.dumps(doc, indent=2) + "\n")
    write_report_csv(rows, out / "report.csv")
    write_manifest(out, cfg, "analyze")
    return 1 if failed else 0


def run_pipeline(cfg: dict) -> int:
    code = 0
    for stage in STAGES:
        rc = RUNNERS[stage](cfg)
        if stage == "audit" and rc:
            return rc
        code = max(code, rc)
    return code


RUNNERS = {"audit": run_audit, "sample": run_sample, "simulate": run_simulate, "analyze": run_analyze,
           "pipeline": run_pipeline}

# flag -> dotted config key
SCALAR_FLAGS = {
    "seed": "seed", "output_dir": "output_dir", "workers": "workers",
    "z": "gcmc.activity", "samples": "gcmc.samples", "burn_in": "gcmc.burn_in_sweeps", "sweeps": "gcmc.thin_sweeps",
    "T": "dynamics.T", "dt": "dynamics.dt", "ensemble_size": "dynamics.ensemble_size",
    "record_stride": "dynamics.record_stride", "p": "audit.p",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tagdiff", description="Tagged-particle diffusion pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        sp = sub.add_parser(name)
        sp.add_argument("config", help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output-dir", dest="output_dir")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any field, e.g. --set gcmc.activity=0.3")
        if name in ("audit", "pipeline"):
            sp.add_argument("--p", type=float, help="DL^p exponent")
        if name in ("sample", "simulate", "pipeline"):
            sp.add_argument("--z", type=float, help="activity")
            sp.add_argument("--samples", type=int, help="number of GCMC configurations to keep")
            sp.add_argument("--sweeps", type=int, help="sweeps between kept chain samples")
            sp.add_argument("--burn-in", dest="burn_in", type=int, help="burn-in sweeps")
        if name in ("simulate", "pipeline"):
            sp.add_argument("--T", type=float)
            sp.add_argument("--dt", type=float)
            sp.add_argument("--ensemble-size", dest="ensemble_size", type=int)
            sp.add_argument("--record-stride", dest="record_stride", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {}
    for flag, key in SCALAR_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    for item in args.set:
        if "=" not in item:
            print(f"error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return 2
        k, v = item.split("=", 1)
        overrides[k.strip()] = _parse_scalar(v)
    try:
        cfg = load_config(args.config, overrides)
        return RUNNERS[args.command](cfg)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
