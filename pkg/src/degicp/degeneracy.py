"""Localizability detection on the rotational and translational sub-Hessians."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .linalg import SymEig, sym_eig
from .linearize import NormalEquations


class NotUnit(ValueError):
    pass


@dataclass(frozen=True)
class DetectionConfig:
    eigenvalue_threshold: float = 1e-3
    mode: Literal["absolute", "relative"] = "relative"

    def __post_init__(self):
        if not self.eigenvalue_threshold > 0:
            raise ValueError("eigenvalue_threshold must be positive")
        if self.mode not in ("absolute", "relative"):
            raise ValueError(f"unknown detection mode {self.mode!r}")


@dataclass(frozen=True)
class LocalizabilityReport:
    eig_r: SymEig
    eig_t: SymEig
    degenerate_r: tuple
    degenerate_t: tuple
    constraint_rows: np.ndarray  # (c, 6), rotational rows first
    threshold_used: tuple        # (rotational, translational) thresholds

    @property
    def n_constraints(self) -> int:
        return len(self.constraint_rows)

    @property
    def any_degenerate(self) -> bool:
        return self.n_constraints > 0

    @property
    def row_kinds(self) -> list[str]:
        return ["rotational"] * sum(self.degenerate_r) + ["translational"] * sum(self.degenerate_t)

    def to_dict(self) -> dict:
        return {
            "eigenvalues_r": self.eig_r.eigenvalues.tolist(),
            "eigenvalues_t": self.eig_t.eigenvalues.tolist(),
            "eigenvectors_r": self.eig_r.eigenvectors.T.tolist(),
            "eigenvectors_t": self.eig_t.eigenvectors.T.tolist(),
            "degenerate_r": list(self.degenerate_r),
            "degenerate_t": list(self.degenerate_t),
            "constraint_rows": self.constraint_rows.tolist(),
            "threshold_used": list(self.threshold_used),
        }


def lift_to_6d(v, kind: Literal["rotational", "translational"]) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(3)
    if abs(np.linalg.norm(v) - 1.0) > 1e-9:
        raise NotUnit(f"direction has norm {np.linalg.norm(v):.12g}")
    out = np.zeros(6)
    if kind == "rotational":
        out[:3] = v
    elif kind == "translational":
        out[3:] = v
    else:
        raise ValueError(f"unknown kind {kind!r}")
    return out


def _flags(eig: SymEig, cfg: DetectionConfig) -> tuple[tuple, float]:
    if cfg.mode == "absolute":
        thr = cfg.eigenvalue_threshold
    else:
        thr = cfg.eigenvalue_threshold * max(float(eig.eigenvalues[0]), 0.0)
    if thr == 0.0:
        # an all-zero block carries no information in any direction
        return (True,) * len(eig.eigenvalues), thr
    return tuple(bool(s < thr) for s in eig.eigenvalues), thr


def detect(ne: NormalEquations, cfg: DetectionConfig = DetectionConfig()) -> LocalizabilityReport:
    """Flag eigen-directions of ``A_rr`` and ``A_tt`` whose eigenvalue is below threshold."""
    eig_r = sym_eig(ne.A_rr)
    eig_t = sym_eig(ne.A_tt)
    flags_r, thr_r = _flags(eig_r, cfg)
    flags_t, thr_t = _flags(eig_t, cfg)
    rows = [lift_to_6d(eig_r.eigenvectors[:, j] / np.linalg.norm(eig_r.eigenvectors[:, j]), "rotational")
            for j in range(3) if flags_r[j]]
    rows += [lift_to_6d(eig_t.eigenvectors[:, j] / np.linalg.norm(eig_t.eigenvectors[:, j]), "translational")
             for j in range(3) if flags_t[j]]
    C = np.array(rows, dtype=float).reshape(-1, 6)
    return LocalizabilityReport(eig_r, eig_t, flags_r, flags_t, C, (thr_r, thr_t))


def empty_report() -> LocalizabilityReport:
    eye = SymEig(np.ones(3), np.eye(3))
    return LocalizabilityReport(eye, eye, (False,) * 3, (False,) * 3, np.zeros((0, 6)), (0.0, 0.0))


def report_from_rows(rows, kinds=None) -> LocalizabilityReport:
    """Build a report carrying explicit constraint rows (for experiments and tests)."""
    C = np.asarray(rows, dtype=float).reshape(-1, 6)
    if kinds is None:
        kinds = ["rotational" if np.linalg.norm(r[:3]) >= np.linalg.norm(r[3:]) else "translational"
                 for r in C]
    order = sorted(range(len(C)), key=lambda i: kinds[i] != "rotational")
    C = C[order]
    n_r = sum(k == "rotational" for k in kinds)
    eye = SymEig(np.ones(3), np.eye(3))
    dr = tuple(i < n_r for i in range(3))
    dt = tuple(i < len(C) - n_r for i in range(3))
    return LocalizabilityReport(eye, eye, dr, dt, C, (0.0, 0.0))
