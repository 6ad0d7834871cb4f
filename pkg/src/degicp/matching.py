"""Correspondence search and the trimmed-distance outlier filter."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cloud import KdIndex, PointCloud
from .linalg import RigidTransform


class MissingNormals(ValueError):
    pass


@dataclass(frozen=True)
class CorrespondenceSet:
    source_pts: np.ndarray   # map frame, prior applied
    ref_pts: np.ndarray
    ref_normals: np.ndarray
    distances: np.ndarray
    source_index: np.ndarray
    ref_index: np.ndarray

    def __len__(self):
        return len(self.distances)

    def take(self, idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.source_pts[idx], self.ref_pts[idx], self.ref_normals[idx],
                                 self.distances[idx], self.source_index[idx], self.ref_index[idx])

    @classmethod
    def from_arrays(cls, source_pts, ref_pts, ref_normals) -> "CorrespondenceSet":
        p = np.asarray(source_pts, dtype=float).reshape(-1, 3)
        q = np.asarray(ref_pts, dtype=float).reshape(-1, 3)
        n = np.asarray(ref_normals, dtype=float).reshape(-1, 3)
        idx = np.arange(len(p))
        return cls(p, q, n, np.linalg.norm(p - q, axis=1), idx, idx.copy())


def match(source: PointCloud, prior: RigidTransform, ref_index: KdIndex,
          ref_cloud: PointCloud) -> CorrespondenceSet:
    """Pair each transformed source point with its nearest reference point.

    Pairs whose reference normal is flagged degenerate are dropped. Several
    source points may share one reference point.
    """
    if ref_cloud.normals is None:
        raise MissingNormals("reference cloud has no normals")
    p = prior.apply(source.points)
    ri, dist = ref_index.nearest_many(p)
    si = np.arange(len(p))
    if ref_cloud.degenerate_normal is not None:
        keep = ~ref_cloud.degenerate_normal[ri]
        p, ri, dist, si = p[keep], ri[keep], dist[keep], si[keep]
    return CorrespondenceSet(p, ref_cloud.points[ri], ref_cloud.normals[ri], dist, si, ri)


def trimmed_filter(corr: CorrespondenceSet, keep_ratio: float = 0.9) -> CorrespondenceSet:
    """Keep the ``ceil(keep_ratio * N)`` closest pairs, in their original order."""
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError("keep_ratio must be in (0, 1]")
    n = len(corr)
    keep = min(n, math.ceil(round(keep_ratio * n, 9)))
    if keep == n:
        return corr
    order = np.argsort(corr.distances, kind="stable")[:keep]
    return corr.take(np.sort(order))
