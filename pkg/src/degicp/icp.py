"""Iterative point-to-plane registration with pluggable degeneracy mitigation."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .cloud import KdIndex, PointCloud, build_index, estimate_normals
from .degeneracy import DetectionConfig, LocalizabilityReport, detect
from .linalg import RigidTransform, apply_increment, pose_error
from .linearize import build_normal_equations, build_rows, residual_cost
from .matching import match, trimmed_filter
from .mitigation import MethodKind, MitigationConfig, solve


class EmptyCloud(ValueError):
    pass


@dataclass(frozen=True)
class IcpConfig:
    method: MethodKind = MethodKind.P2Plane
    mitigation: MitigationConfig = field(default_factory=MitigationConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    max_iterations: int = 30
    trans_convergence: float = 1e-4
    rot_convergence: float = 1e-5
    keep_ratio: float = 0.9
    detect_every_iteration: bool = True

    def __post_init__(self):
        object.__setattr__(self, "method", MethodKind(self.method))
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not (self.trans_convergence > 0 and self.rot_convergence > 0):
            raise ValueError("convergence thresholds must be positive")
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ValueError("keep_ratio must be in (0, 1]")


@dataclass
class IterationRecord:
    iteration: int
    wall_time: float
    residual_cost: float
    n_correspondences: int
    rot_error: float | None
    trans_error: float | None
    degenerate_motion: list       # cumulative |v . x| per tracked direction
    increment_norms: tuple        # (|r|, |t|)
    n_degenerate: int = 0
    skipped: bool = False
    rhs_norm: float = 0.0         # |b| of the linear system solved this iteration
    step: np.ndarray | None = field(default=None, repr=False)

    def to_row(self) -> dict:
        return {
            "iteration": self.iteration,
            "wall_time": f"{self.wall_time:.6f}",
            "residual_cost": repr(float(self.residual_cost)),
            "n_correspondences": self.n_correspondences,
            "rot_error": "" if self.rot_error is None else repr(float(self.rot_error)),
            "trans_error": "" if self.trans_error is None else repr(float(self.trans_error)),
            "degenerate_motion": ";".join(repr(float(v)) for v in self.degenerate_motion),
            "rot_increment": repr(float(self.increment_norms[0])),
            "trans_increment": repr(float(self.increment_norms[1])),
            "n_degenerate": self.n_degenerate,
            "skipped": int(self.skipped),
            "rhs_norm": repr(float(self.rhs_norm)),
        }


CSV_COLUMNS = ["iteration", "wall_time", "residual_cost", "n_correspondences", "rot_error",
               "trans_error", "degenerate_motion", "rot_increment", "trans_increment",
               "n_degenerate", "skipped", "rhs_norm"]


@dataclass
class RegistrationResult:
    pose: RigidTransform
    records: list
    converged: bool
    final_report: LocalizabilityReport | None
    tracked_directions: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def increments(self) -> np.ndarray:
        return np.array([r.step for r in self.records]).reshape(-1, 6)

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.to_dict(),
            "converged": self.converged,
            "iterations": len(self.records),
            "error": self.error,
            "tracked_directions": self.tracked_directions.tolist(),
            "final_report": None if self.final_report is None else self.final_report.to_dict(),
            "records": [{k: v for k, v in r.to_row().items()} for r in self.records],
        }

    def records_csv(self, include_wall_time: bool = True) -> str:
        cols = CSV_COLUMNS if include_wall_time else [c for c in CSV_COLUMNS if c != "wall_time"]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in self.records:
            w.writerow(r.to_row())
        return buf.getvalue()


class _DirectionTracker:
    """Follows the degenerate directions flagged at the first iteration.

    Each tracked direction is re-identified at every iteration with the
    currently flagged constraint row it is most aligned with (``|cos| > 0.9``),
    so the recorded motion is measured along the direction the solvers see.
    Directions that are not flagged again keep their last known value.
    """

    def __init__(self):
        self.directions: np.ndarray | None = None
        self.totals: np.ndarray = np.zeros(0)

    def update(self, rep: LocalizabilityReport, x: np.ndarray) -> list:
        rows = rep.constraint_rows
        if self.directions is None:
            self.directions = rows.copy()
            self.totals = np.zeros(len(rows))
        elif len(rows) and len(self.directions):
            cos = np.abs(self.directions @ rows.T)
            for i in range(len(self.directions)):
                j = int(np.argmax(cos[i]))
                if cos[i, j] > 0.9:
                    v = rows[j]
                    self.directions[i] = v if v @ self.directions[i] >= 0 else -v
        self.totals = self.totals + np.abs(self.directions @ x)
        return self.totals.tolist()


def prepare_reference(reference: PointCloud, k: int = 10) -> tuple[PointCloud, KdIndex]:
    index = build_index(reference)
    if reference.normals is None:
        reference = estimate_normals(reference, k, index)
    return reference, index


def register(source: PointCloud, reference: PointCloud, prior: RigidTransform,
             cfg: IcpConfig = IcpConfig(), ground_truth: RigidTransform | None = None,
             index: KdIndex | None = None) -> RegistrationResult:
    """Register ``source`` onto ``reference`` starting from ``prior``.

    Each iteration transforms the source with the current pose, matches,
    trims (not for Cauchy), linearizes, detects degeneracy, solves with the
    configured method and left-applies the increment. Iteration stops when
    both increment norms fall below the convergence thresholds.
    """
    if len(source) == 0 or len(reference) == 0:
        raise EmptyCloud("source and reference must be non-empty")
    if reference.normals is None:
        reference, index = prepare_reference(reference)
    elif index is None:
        index = build_index(reference)

    pose = prior
    records: list[IterationRecord] = []
    tracker = _DirectionTracker()
    rep = None
    first_rep = None
    converged = False
    for k in range(cfg.max_iterations):
        t0 = time.perf_counter()
        try:
            corr = match(source, pose, index, reference)
            if cfg.method is not MethodKind.Cauchy:
                corr = trimmed_filter(corr, cfg.keep_ratio)
            rows = build_rows(corr)
            ne = build_normal_equations(rows)
            if cfg.detect_every_iteration or first_rep is None:
                rep = detect(ne, cfg.detection)
                if first_rep is None:
                    first_rep = rep
            else:
                rep = first_rep
            out = solve(cfg.method, corr=corr, rows=rows, ne=ne, rep=rep, cfg=cfg.mitigation)
        except Exception as exc:  # noqa: BLE001 - reported in the result
            return RegistrationResult(pose, records, False, rep, _dirs(tracker),
                                      error=f"{type(exc).__name__}: {exc}")
        x = np.asarray(out.x, dtype=float)
        if not np.all(np.isfinite(x)):
            return RegistrationResult(pose, records, False, rep, _dirs(tracker),
                                      error="non-finite increment")
        pose = apply_increment(pose, x)
        motion = tracker.update(rep, x)
        rot_err = trans_err = None
        if ground_truth is not None:
            rot_err, trans_err = pose_error(pose, ground_truth)
        nr, nt = float(np.linalg.norm(x[:3])), float(np.linalg.norm(x[3:]))
        records.append(IterationRecord(
            iteration=k,
            wall_time=time.perf_counter() - t0,
            residual_cost=residual_cost(rows),
            n_correspondences=len(corr),
            rot_error=rot_err,
            trans_error=trans_err,
            degenerate_motion=motion,
            increment_norms=(nr, nt),
            n_degenerate=rep.n_constraints,
            skipped=out.skipped,
            rhs_norm=float(np.linalg.norm(ne.b)),
            step=x,
        ))
        if nr < cfg.rot_convergence and nt < cfg.trans_convergence:
            converged = True
            break
    return RegistrationResult(pose, records, converged, rep, _dirs(tracker))


def _dirs(tracker: _DirectionTracker) -> np.ndarray:
    return np.zeros((0, 6)) if tracker.directions is None else tracker.directions.copy()


def config_to_dict(cfg: IcpConfig) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "method":
            v = v.value
        elif f.name == "mitigation":
            v = v.to_dict()
        elif f.name == "detection":
            v = {"eigenvalue_threshold": v.eigenvalue_threshold, "mode": v.mode}
        out[f.name] = v
    return out
