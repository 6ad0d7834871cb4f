"""Synthetic degenerate scenes and pose-prior noise.

Random numbers come from numpy's PCG64. Every consumer draws from its own
stream, keyed by ``(seed, name)`` through ``SeedSequence``, so adding a new
consumer never shifts an existing one.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud, estimate_normals
from .linalg import RigidTransform, so3_exp


def rng_for(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(key,))))


# ------------------------------------------------------------- cylinder ----

def sample_cylinder(radius: float, height: float, n: int, seed: int = 0, caps: bool = False,
                    stream: str = "cylinder") -> PointCloud:
    """Uniform samples on a Z-axis cylinder spanning ``0 <= z <= height``.

    With ``caps=False`` only the lateral surface is sampled and every point is
    exactly ``radius`` from the axis. ``caps=True`` also samples the two end
    disks, with points split between surfaces in proportion to area.
    """
    if not (radius > 0 and height > 0):
        raise ValueError("radius and height must be positive")
    if n < 1:
        raise ValueError("n must be positive")
    rng = rng_for(seed, stream)
    n_side = n
    if caps:
        side_area, cap_area = 2 * np.pi * radius * height, np.pi * radius ** 2
        n_side = int(round(n * side_area / (side_area + 2 * cap_area)))
    phi = rng.uniform(0.0, 2 * np.pi, n_side)
    z = rng.uniform(0.0, height, n_side)
    pts = [np.column_stack([radius * np.cos(phi), radius * np.sin(phi), z])]
    if caps:
        n_cap = n - n_side
        rho = radius * np.sqrt(rng.uniform(0.0, 1.0, n_cap))
        ang = rng.uniform(0.0, 2 * np.pi, n_cap)
        zc = np.where(rng.uniform(size=n_cap) < 0.5, 0.0, height)
        pts.append(np.column_stack([rho * np.cos(ang), rho * np.sin(ang), zc]))
    return PointCloud(np.vstack(pts))


@dataclass(frozen=True)
class CylinderScene:
    radius: float = 2.0
    height: float = 4.0
    n_points: int = 8000
    caps: bool = True
    perturbation: RigidTransform = field(default_factory=lambda: RigidTransform.from_vector(
        (0.01, -0.008, 0.0), (0.04, -0.03, 0.02)))
    normal_k: int = 10


@dataclass
class StaticScenario:
    source: PointCloud
    reference: PointCloud
    ground_truth: RigidTransform   # maps source into the reference frame
    prior: RigidTransform


def make_cylinder_scenario(scene: CylinderScene, seed: int = 0) -> StaticScenario:
    """Reference and source are independent samples of the same cylinder.

    The reference stays in its canonical pose, so the symmetry axis passes
    through the map origin; the source is displaced by the inverse
    perturbation and registration starts from the identity.
    """
    ref = sample_cylinder(scene.radius, scene.height, scene.n_points, seed, scene.caps, "reference")
    ref = estimate_normals(ref, scene.normal_k)
    src = sample_cylinder(scene.radius, scene.height, scene.n_points, seed, scene.caps, "source")
    src = src.transformed(scene.perturbation.inverse())
    return StaticScenario(src, ref, scene.perturbation, RigidTransform.identity())


# --------------------------------------------------------------- pillar ----

@dataclass(frozen=True)
class PillarScene:
    plane_extent: float = 30.0
    pillar_size: tuple = (1.0, 1.0, 3.0)
    pillar_center: tuple = (0.0, 0.0)
    n_points: int = 60000            # plane samples; pillar density matches
    pillar_density_scale: float = 1.0
    sensor_range: float = 70.0
    scan_points: int = 500
    trajectory: tuple = ()           # RigidTransforms (sensor -> map)
    normal_k: int = 10
    resample_scans: bool = True      # False: scans are subsets of the map's own samples

    def __post_init__(self):
        if self.plane_extent <= 0 or self.sensor_range <= 0 or self.n_points <= 0:
            raise ValueError("plane_extent, sensor_range and n_points must be positive")
        if len(self.pillar_size) != 3 or min(self.pillar_size) <= 0:
            raise ValueError("pillar_size must be three positive lengths")


def default_trajectory(n_poses: int = 24, radius: float = 7.0, height: float = 0.6,
                       lead_in: float = 8.0) -> tuple:
    """Straight approach toward the pillar, one loop around it, and a straight exit.

    The sensor looks along the direction of travel.
    """
    n_line = max(1, n_poses // 4)
    n_loop = max(1, n_poses - 2 * n_line)
    pts = []
    for x in np.linspace(-radius - lead_in, -radius, n_line, endpoint=False):
        pts.append((x, 0.0))
    for a in np.linspace(np.pi, -np.pi, n_loop, endpoint=False):
        pts.append((radius * np.cos(a), radius * np.sin(a)))
    for x in np.linspace(-radius, -radius - lead_in, n_line + 1)[1:]:
        pts.append((x, 0.0))
    pts = np.array(pts)
    poses = []
    for i, (x, y) in enumerate(pts):
        j = min(i + 1, len(pts) - 1)
        d = pts[j] - pts[i] if j != i else pts[i] - pts[i - 1]
        yaw = float(np.arctan2(d[1], d[0]))
        poses.append(RigidTransform.from_vector((0.0, 0.0, yaw), (x, y, height)))
    return tuple(poses)


def sample_pillar_map(scene: PillarScene, seed: int = 0, stream: str = "pillar-map") -> PointCloud:
    """Ground plane ``z = 0`` plus the four side faces and top of a box pillar."""
    rng = rng_for(seed, stream)
    half = scene.plane_extent / 2
    plane = np.column_stack([rng.uniform(-half, half, scene.n_points),
                             rng.uniform(-half, half, scene.n_points),
                             np.zeros(scene.n_points)])
    density = scene.n_points / scene.plane_extent ** 2 * scene.pillar_density_scale
    sx, sy, sz = scene.pillar_size
    cx, cy = scene.pillar_center
    faces = []
    for axis, sign in ((0, 1), (0, -1), (1, 1), (1, -1)):
        width = sy if axis == 0 else sx
        m = max(1, int(round(density * width * sz)))
        u = rng.uniform(-width / 2, width / 2, m)
        z = rng.uniform(0.0, sz, m)
        f = np.zeros((m, 3))
        f[:, axis] = (sx if axis == 0 else sy) / 2 * sign
        f[:, 1 - axis] = u
        f[:, 2] = z
        faces.append(f)
    m = max(1, int(round(density * sx * sy)))
    faces.append(np.column_stack([rng.uniform(-sx / 2, sx / 2, m), rng.uniform(-sy / 2, sy / 2, m),
                                  np.full(m, sz)]))
    pillar = np.vstack(faces) + np.array([cx, cy, 0.0])
    # the plane under the pillar footprint is not visible
    inside = (np.abs(plane[:, 0] - cx) < sx / 2) & (np.abs(plane[:, 1] - cy) < sy / 2)
    return PointCloud(np.vstack([plane[~inside], pillar]))


def make_pillar_scene(scene: PillarScene, seed: int = 0) -> tuple[PointCloud, list]:
    """Map cloud (with normals) and one scan per trajectory pose, in sensor frame.

    Each scan is a random subset, within ``sensor_range`` of the pose, of its
    own independent surface sample at map density; occlusion is ignored.
    Drawing scans from the map's own samples (``resample_scans=False``)
    makes the ground truth an exact zero-residual fixed point, which is
    useful for consistency checks but hides the sampling mismatch that
    drives drift along weakly constrained directions.
    """
    if not scene.trajectory:
        raise ValueError("trajectory must contain at least one pose")
    raw = sample_pillar_map(scene, seed)
    map_cloud = estimate_normals(raw, scene.normal_k)
    scans = []
    for i, pose in enumerate(scene.trajectory):
        rng = rng_for(seed, f"scan-{i}")
        surf = (sample_pillar_map(scene, seed, f"scan-surface-{i}").points
                if scene.resample_scans else raw.points)
        near = np.nonzero(np.linalg.norm(surf - pose.translation, axis=1) <= scene.sensor_range)[0]
        if len(near) > scene.scan_points:
            near = np.sort(rng.choice(near, scene.scan_points, replace=False))
        scans.append(PointCloud(pose.inverse().apply(surf[near])))
    return map_cloud, scans


# ---------------------------------------------------------------- noise ----

@dataclass(frozen=True)
class NoiseSpec:
    sigma_t: float = 0.05
    sigma_r: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.sigma_t < 0 or self.sigma_r < 0:
            raise ValueError("noise sigmas must be non-negative")


def sample_prior_noise(noise: NoiseSpec, count: int | None = None, stream: str = "prior-noise"):
    """Zero-mean Gaussian pose noise.

    Translation components are ``N(0, sigma_t^2)``; the rotation is the
    exponential of a rotation vector with ``N(0, sigma_r^2)`` components.
    Returns one transform, or a list of ``count`` transforms.
    """
    rng = rng_for(noise.seed, stream)
    k = 1 if count is None else count
    r = rng.normal(0.0, 1.0, (k, 3)) * noise.sigma_r
    t = rng.normal(0.0, 1.0, (k, 3)) * noise.sigma_t
    out = [RigidTransform(so3_exp(r[i]), t[i]) for i in range(k)]
    return out[0] if count is None else out


def perturb(gt: RigidTransform, noise: NoiseSpec, index: int = 0) -> RigidTransform:
    """Noisy prior ``gt * noise`` with an independent draw per ``index``."""
    return gt @ sample_prior_noise(noise, stream=f"prior-noise-{index}")
