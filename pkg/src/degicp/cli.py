"""Experiment runner: static cylinder, dynamic pillar trajectory and parameter sweeps.

Usage::

    degicp static  [--config PATH] [--out DIR] [--seed N] [--methods a,b,c]
    degicp dynamic [--config PATH] [--out DIR] [--seed N] [--methods a,b,c]
    degicp sweep    --config PATH  [--out DIR] [--seed N] [--methods m]

Exit codes: 0 on success, 1 when any method fails (the other methods still
write their outputs), 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .cloud import PointCloud, build_index, save_ply
from .degeneracy import DetectionConfig
from .icp import IcpConfig, RegistrationResult, config_to_dict, register
from .linalg import RigidTransform, pose_error, so3_log
from .metrics import Trajectory, ate, rte
from .mitigation import MethodKind, MitigationConfig, with_parameter
from .simulation import (CylinderScene, NoiseSpec, PillarScene, default_trajectory,
                         make_cylinder_scenario, make_pillar_scene, perturb)

EXIT_OK, EXIT_METHOD_FAILED, EXIT_CONFIG = 0, 1, 2

# parameter -> the only method it tunes
SWEEP_PARAMETERS = {"epsilon": MethodKind.IneqCon,
                    "lambda_lreg": MethodKind.LReg,
                    "lambda_nlreg": MethodKind.NlReg}

# The cylinder's weakest rotational eigenvalue sits near 5e-3 of the largest
# for two independent samples (tangential sampling offsets), and the next one
# up is above 0.9; 1e-2 falls in that gap.
STATIC_DETECTION = DetectionConfig(eigenvalue_threshold=1e-2)

SCAN_PERIOD = 0.1  # seconds between scans (10 Hz)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    values: tuple


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: CylinderScene | PillarScene
    seed: int = 0
    methods: tuple = tuple(MethodKind)
    icp: IcpConfig = field(default_factory=IcpConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    output_dir: str = "out"
    sweep: SweepSpec | None = None
    rte_delta: float = 1.0


# ------------------------------------------------------------ parsing -----

def _build(cls, d, what: str, **extra):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown {what} field(s): {', '.join(unknown)}")
    try:
        return cls(**{**d, **extra})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from None


def _pose(d, what: str) -> RigidTransform:
    if not isinstance(d, dict) or not set(d) <= {"rotation", "rotation_vector", "translation"}:
        raise ConfigError(f"{what} must be an object with rotation_vector/rotation and translation")
    try:
        return RigidTransform.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from None


def _scenario(d, kind: str):
    if d is not None and not isinstance(d, dict):
        raise ConfigError("scenario must be an object")
    d = dict(d or {})
    declared = d.pop("type", "cylinder" if kind == "static" else "pillar")
    want = "cylinder" if kind == "static" else "pillar"
    if declared != want:
        raise ConfigError(f"the {kind} experiment needs a {want} scenario, got {declared!r}")
    d.pop("seed", None)
    if want == "cylinder":
        if "perturbation" in d:
            d["perturbation"] = _pose(d["perturbation"], "scenario.perturbation")
        return _build(CylinderScene, d, "cylinder scenario")
    traj = d.pop("trajectory", None)
    if traj is None:
        poses = default_trajectory()
    elif isinstance(traj, list):
        if not traj:
            raise ConfigError("scenario.trajectory must contain at least one pose")
        poses = tuple(_pose(p, "trajectory pose") for p in traj)
    elif isinstance(traj, dict):
        try:
            poses = default_trajectory(**traj)
        except TypeError as exc:
            raise ConfigError(f"invalid trajectory parameters: {exc}") from None
    else:
        raise ConfigError("scenario.trajectory must be a list of poses or an object")
    for key in ("pillar_size", "pillar_center"):
        if key in d:
            d[key] = tuple(d[key])
    return _build(PillarScene, d, "pillar scenario", trajectory=poses)


def _methods(value) -> tuple:
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError("methods must be a non-empty list")
    try:
        out = tuple(MethodKind.parse(str(v).strip()) for v in value)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if len(set(out)) != len(out):
        raise ConfigError("methods contains duplicates")
    return out


def _icp(d, kind: str) -> IcpConfig:
    d = dict(d or {})
    if "method" in d:
        raise ConfigError("icp.method is not allowed; list methods under 'methods'")
    det = d.pop("detection", None)
    detection = STATIC_DETECTION if kind == "static" else DetectionConfig()
    if det is not None:
        detection = _build(DetectionConfig, det, "icp.detection")
    mit = d.pop("mitigation", None)
    mitigation = MitigationConfig()
    if mit is not None:
        if not isinstance(mit, dict):
            raise ConfigError("icp.mitigation must be an object")
        try:
            mitigation = MitigationConfig.from_dict(mit)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid icp.mitigation: {exc}") from None
    return _build(IcpConfig, d, "icp", detection=detection, mitigation=mitigation)


def parse_config(raw: dict, kind: str) -> ExperimentConfig:
    """Validate a decoded JSON config for ``kind`` in {static, dynamic, sweep}."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {"scenario", "seed", "methods", "icp", "noise", "output_dir", "sweep", "rte_delta"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    scen_kind = "static" if kind == "static" else "dynamic"
    scenario = _scenario(raw.get("scenario"), scen_kind)
    seed = raw.get("seed", (raw.get("scenario") or {}).get("seed", 0))
    if raw.get("noise") is not None and not isinstance(raw["noise"], dict):
        raise ConfigError("noise must be an object")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    methods = _methods(raw["methods"]) if "methods" in raw else tuple(MethodKind)
    noise = _build(NoiseSpec, {"seed": seed, **(raw.get("noise") or {})}, "noise")
    delta = raw.get("rte_delta", 1.0)
    if not isinstance(delta, (int, float)) or not delta > 0:
        raise ConfigError("rte_delta must be positive")
    sweep = None
    if kind == "sweep":
        sweep = _sweep(raw.get("sweep"))
        methods = (SWEEP_PARAMETERS[sweep.parameter],) if "methods" not in raw else methods
    elif raw.get("sweep") is not None:
        sweep = _sweep(raw["sweep"])
    return ExperimentConfig(scenario=scenario, seed=seed, methods=methods,
                            icp=_icp(raw.get("icp"), scen_kind), noise=noise,
                            output_dir=str(raw.get("output_dir", "out")), sweep=sweep,
                            rte_delta=float(delta))


def _sweep(d) -> SweepSpec:
    if not isinstance(d, dict):
        raise ConfigError("a sweep block {parameter, values} is required")
    if set(d) - {"parameter", "values"}:
        raise ConfigError("sweep accepts only 'parameter' and 'values'")
    name = d.get("parameter")
    if name not in SWEEP_PARAMETERS:
        raise ConfigError(f"sweep parameter must be one of {', '.join(SWEEP_PARAMETERS)}")
    values = d.get("values")
    if not isinstance(values, list) or not values:
        raise ConfigError("sweep values must be a non-empty list")
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0 for v in values):
        raise ConfigError("sweep values must be positive numbers")
    return SweepSpec(name, tuple(float(v) for v in values))


def validate_sweep(cfg: ExperimentConfig) -> None:
    if cfg.sweep is None:
        raise ConfigError("sweep requires a sweep block")
    if len(cfg.methods) != 1:
        raise ConfigError("sweep requires exactly one method")
    m = cfg.methods[0]
    if m not in SWEEP_PARAMETERS.values():
        raise ConfigError(f"{m.value} has no tunable parameter to sweep")
    if SWEEP_PARAMETERS[cfg.sweep.parameter] is not m:
        raise ConfigError(f"parameter {cfg.sweep.parameter} does not apply to {m.value}")


def load_config(path: str | None, kind: str, seed: int | None = None, methods: str | None = None,
                out: str | None = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON config: {exc}") from None
    elif kind == "sweep":
        raise ConfigError("sweep requires --config with a sweep block")
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if seed is not None:
        raw = {**raw, "seed": seed}
        if isinstance(raw.get("noise"), dict):
            raw["noise"] = {**raw["noise"], "seed": seed}
    if methods is not None:
        raw = {**raw, "methods": methods}
    cfg = parse_config(raw, kind)
    if out is not None:
        cfg = replace(cfg, output_dir=out)
    if kind == "sweep":
        validate_sweep(cfg)
    return cfg


# ------------------------------------------------------------- output -----

def _write_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_json(path: str, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _hash_inputs(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=float).tobytes())
    return h.hexdigest()


def _experiment_dict(cfg: ExperimentConfig) -> dict:
    return {"seed": cfg.seed, "methods": [m.value for m in cfg.methods],
            "icp": config_to_dict(cfg.icp),
            "noise": {"sigma_t": cfg.noise.sigma_t, "sigma_r": cfg.noise.sigma_r, "seed": cfg.noise.seed}}


# -------------------------------------------------------------- static ----

def run_static(cfg: ExperimentConfig) -> int:
    """Register the perturbed cylinder once per method and write traces."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    sc = make_cylinder_scenario(cfg.scenario, cfg.seed)
    index = build_index(sc.reference)
    digest = _hash_inputs(sc.source.points, sc.reference.points, sc.reference.normals,
                          sc.prior.matrix(), sc.ground_truth.matrix())
    save_ply(sc.reference, os.path.join(cfg.output_dir, "reference.ply"))
    summary = {"experiment": "static", "config": _experiment_dict(cfg), "input_sha256": digest,
               "injected": {"rotation": float(np.linalg.norm(sc.ground_truth.rotation_vector())),
                            "translation": float(np.linalg.norm(sc.ground_truth.translation))},
               "methods": {}}
    status = EXIT_OK
    for m in cfg.methods:
        _progress(f"[static] {m.value}")
        res = register(sc.source, sc.reference, sc.prior, replace(cfg.icp, method=m),
                       sc.ground_truth, index)
        _write_text(os.path.join(cfg.output_dir, f"{m.value}.csv"), res.records_csv())
        save_ply(sc.source.transformed(res.pose), os.path.join(cfg.output_dir, f"{m.value}_aligned.ply"))
        rot, trans = pose_error(res.pose, sc.ground_truth)
        err_vec = so3_log(res.pose.rotation.T @ sc.ground_truth.rotation)
        last = res.records[-1] if res.records else None
        summary["methods"][m.value] = {
            "pose": res.pose.to_dict(), "rot_error": rot, "trans_error": trans,
            "rot_error_z": abs(float(err_vec[2])), "iterations": len(res.records),
            "converged": res.converged, "error": res.error,
            "degenerate_motion": [] if last is None else list(last.degenerate_motion),
        }
        if res.failed:
            _progress(f"[static] {m.value} failed: {res.error}")
            status = EXIT_METHOD_FAILED
    _write_json(os.path.join(cfg.output_dir, "summary.json"), summary)
    return status


# ------------------------------------------------------------- dynamic ----

@dataclass
class DynamicRun:
    method: MethodKind
    estimate: Trajectory
    results: list            # RegistrationResult per scan
    ate: tuple
    rte: tuple

    @property
    def failed(self) -> bool:
        return any(r.failed for r in self.results)

    def first_constraint_motion(self) -> float:
        """Mean over flagged scans of ``|L x|`` at the first iteration."""
        vals = [float(np.linalg.norm(r.records[0].degenerate_motion))
                for r in self.results if r.records and r.records[0].n_degenerate > 0]
        return float(np.mean(vals)) if vals else 0.0


@dataclass
class DynamicInputs:
    map_cloud: PointCloud
    scans: list
    ground_truth: Trajectory
    priors: list
    digest: str


def dynamic_inputs(cfg: ExperimentConfig) -> DynamicInputs:
    map_cloud, scans = make_pillar_scene(cfg.scenario, cfg.seed)
    gt = list(cfg.scenario.trajectory)
    priors = [perturb(g, cfg.noise, i) for i, g in enumerate(gt)]
    ts = np.arange(len(gt)) * SCAN_PERIOD
    digest = _hash_inputs(map_cloud.points, map_cloud.normals, *[s.points for s in scans],
                          *[p.matrix() for p in priors])
    return DynamicInputs(map_cloud, scans, Trajectory(ts, tuple(gt)), priors, digest)


def run_method_dynamic(inp: DynamicInputs, icp: IcpConfig, delta: float, index=None) -> DynamicRun:
    """Register every scan against the map, in trajectory order, from its noisy prior."""
    index = build_index(inp.map_cloud) if index is None else index
    results: list[RegistrationResult] = []
    for scan, prior, gt in zip(inp.scans, inp.priors, inp.ground_truth.poses):
        results.append(register(scan, inp.map_cloud, prior, icp, gt, index))
    est = Trajectory(inp.ground_truth.timestamps, tuple(r.pose for r in results))
    return DynamicRun(icp.method, est, results, ate(est, inp.ground_truth),
                      rte(est, inp.ground_truth, delta))


def map_error_cloud(inp: DynamicInputs, run: DynamicRun, index=None) -> PointCloud:
    """Scans placed with the estimated poses, each point carrying its
    point-to-plane distance to the ground-truth map."""
    index = build_index(inp.map_cloud) if index is None else index
    pts = np.vstack([pose.apply(s.points) for pose, s in zip(run.estimate.poses, inp.scans)])
    nn, _ = index.nearest_many(pts)
    d = np.abs(np.einsum("ij,ij->i", pts - inp.map_cloud.points[nn], inp.map_cloud.normals[nn]))
    return PointCloud(pts, scalars={"error": d})


def _stats(pair) -> dict:
    return {"trans": pair[0].to_dict(), "rot": pair[1].to_dict()}


def run_dynamic(cfg: ExperimentConfig) -> int:
    os.makedirs(cfg.output_dir, exist_ok=True)
    inp = dynamic_inputs(cfg)
    index = build_index(inp.map_cloud)
    summary = {"experiment": "dynamic", "config": _experiment_dict(cfg), "input_sha256": inp.digest,
               "n_scans": len(inp.scans), "rte_delta": cfg.rte_delta, "methods": {}}
    status = EXIT_OK
    for m in cfg.methods:
        _progress(f"[dynamic] {m.value}")
        run = run_method_dynamic(inp, replace(cfg.icp, method=m), cfg.rte_delta, index)
        _write_json(os.path.join(cfg.output_dir, f"{m.value}_trajectory.json"),
                    {"method": m.value, "trajectory": run.estimate.to_dict(),
                     "ate": _stats(run.ate), "rte": _stats(run.rte),
                     "failed_scans": [i for i, r in enumerate(run.results) if r.failed]})
        save_ply(map_error_cloud(inp, run, index), os.path.join(cfg.output_dir, f"{m.value}_map_error.ply"))
        summary["methods"][m.value] = {"ate": _stats(run.ate), "rte": _stats(run.rte),
                                       "failed": run.failed}
        if run.failed:
            _progress(f"[dynamic] {m.value} failed on at least one scan")
            status = EXIT_METHOD_FAILED
    _write_json(os.path.join(cfg.output_dir, "ground_truth_trajectory.json"), inp.ground_truth.to_dict())
    _write_json(os.path.join(cfg.output_dir, "summary.json"), summary)
    return status


# --------------------------------------------------------------- sweep ----

SWEEP_COLUMNS = ["value", "ate_trans_mean", "ate_rot_mean", "rte_trans_mean", "rte_rot_mean",
                 "constraint_motion", "failed"]


def run_sweep(cfg: ExperimentConfig) -> int:
    """One dynamic run per parameter value, aggregated into ``sweep.csv``.

    ``constraint_motion`` is the mean first-iteration ``|L x|`` over scans
    with flagged directions; the first iteration sees identical inputs for
    every value, so the column isolates the parameter's effect.
    """
    validate_sweep(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    inp = dynamic_inputs(cfg)
    index = build_index(inp.map_cloud)
    method = cfg.methods[0]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    status = EXIT_OK
    for v in cfg.sweep.values:
        _progress(f"[sweep] {method.value} {cfg.sweep.parameter}={v!r}")
        icp = replace(cfg.icp, method=method,
                      mitigation=with_parameter(cfg.icp.mitigation, cfg.sweep.parameter, v))
        run = run_method_dynamic(inp, icp, cfg.rte_delta, index)
        w.writerow([repr(v), repr(run.ate[0].mean), repr(run.ate[1].mean), repr(run.rte[0].mean),
                    repr(run.rte[1].mean), repr(run.first_constraint_motion()), int(run.failed)])
        if run.failed:
            status = EXIT_METHOD_FAILED
    _write_text(os.path.join(cfg.output_dir, "sweep.csv"), buf.getvalue())
    return status


# ---------------------------------------------------------------- main -----

RUNNERS = {"static": run_static, "dynamic": run_dynamic, "sweep": run_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="degicp", description="Degeneracy-aware ICP experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("static", "single registration on the cylinder scene"),
                        ("dynamic", "scan-to-map registration along the pillar trajectory"),
                        ("sweep", "dynamic runs over values of one method parameter")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", metavar="PATH", help="JSON experiment config")
        s.add_argument("--out", metavar="DIR", help="output directory (overrides output_dir)")
        s.add_argument("--seed", type=int, metavar="N", help="seed for scene and prior noise")
        s.add_argument("--methods", metavar="a,b,c", help="comma-separated method names")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = load_config(args.config, args.command, args.seed, args.methods, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return RUNNERS[args.command](cfg)


if __name__ == "__main__":
    sys.exit(main())
