"""Point clouds, PLY I/O, range filtering, nearest-neighbour index and normals."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.offset = offset


class MissingProperty(ParseError):
    def __init__(self, name: str):
        super().__init__(f"missing vertex property {name!r}")
        self.name = name


class TooFewPoints(ValueError):
    pass


class EmptyIndex(ValueError):
    pass


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    # set where the PCA neighbourhood was collinear or collapsed
    degenerate_normal: np.ndarray | None = None
    scalars: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=float).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise ValueError("normals and points differ in length")
            object.__setattr__(self, "normals", nrm)
        if self.degenerate_normal is not None:
            flags = np.array(self.degenerate_normal, dtype=bool).reshape(-1)
            if len(flags) != len(pts):
                raise ValueError("degenerate_normal and points differ in length")
            object.__setattr__(self, "degenerate_normal", flags)
        for name, values in self.scalars.items():
            if len(values) != len(pts):
                raise ValueError(f"scalar {name!r} and points differ in length")

    def __len__(self):
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def select(self, mask_or_index) -> "PointCloud":
        idx = np.asarray(mask_or_index)
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.degenerate_normal is None else self.degenerate_normal[idx],
            {k: np.asarray(v)[idx] for k, v in self.scalars.items()},
        )

    def transformed(self, T) -> "PointCloud":
        normals = None if self.normals is None else self.normals @ T.rotation.T
        return PointCloud(T.apply(self.points), normals, self.degenerate_normal, dict(self.scalars))


# ---------------------------------------------------------------- PLY ------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class _Element:
    name: str
    count: int
    props: list  # (name, dtype) or (name, (count_dtype, item_dtype))


def _parse_header(raw: bytes):
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file", line=1)
    nl = raw.find(b"\n", end)
    body_start = len(raw) if nl < 0 else nl + 1
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[_Element] = []
    for lineno, line in enumerate(lines, start=1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported format {' '.join(tok[1:])!r}", line=lineno)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise ParseError(f"bad element line {line!r}", line=lineno)
            elements.append(_Element(tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", line=lineno)
            if tok[1] == "list":
                if len(tok) != 5 or tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise ParseError(f"bad list property {line!r}", line=lineno)
                elements[-1].props.append((tok[4], (_PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
            else:
                if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                    raise ParseError(f"bad property line {line!r}", line=lineno)
                elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise ParseError(f"unknown header keyword {tok[0]!r}", line=lineno)
    if fmt is None:
        raise ParseError("missing format line", line=1)
    return fmt, elements, body_start, len(lines) + 2


def _read_ascii(text_lines, elements, first_line):
    out = {}
    pos = 0
    for el in elements:
        rows = []
        for _ in range(el.count):
            while pos < len(text_lines) and not text_lines[pos].strip():
                pos += 1
            if pos >= len(text_lines):
                raise ParseError(f"unexpected end of file in element {el.name!r}",
                                 line=first_line + pos)
            tok = text_lines[pos].split()
            values, k = [], 0
            try:
                for _, dt in el.props:
                    if isinstance(dt, tuple):
                        n = int(tok[k])
                        values.append([float(v) for v in tok[k + 1:k + 1 + n]])
                        k += 1 + n
                    else:
                        values.append(float(tok[k]))
                        k += 1
            except (ValueError, IndexError):
                raise ParseError(f"malformed {el.name} record", line=first_line + pos) from None
            if k != len(tok):
                raise ParseError(f"malformed {el.name} record", line=first_line + pos)
            rows.append(values)
            pos += 1
        if el.name == "vertex":
            out = {name: np.array([r[i] for r in rows], dtype=float)
                   for i, (name, dt) in enumerate(el.props) if not isinstance(dt, tuple)}
    return out


def _read_binary(body: bytes, elements, base):
    pos = 0
    out = {}
    for el in elements:
        if all(not isinstance(dt, tuple) for _, dt in el.props):
            dtype = np.dtype([(name, "<" + dt) for name, dt in el.props])
            nbytes = dtype.itemsize * el.count
            if pos + nbytes > len(body):
                raise ParseError(f"truncated element {el.name!r}", offset=base + len(body))
            arr = np.frombuffer(body, dtype=dtype, count=el.count, offset=pos)
            pos += nbytes
            if el.name == "vertex":
                out = {name: arr[name].astype(float) for name in dtype.names}
            continue
        cols = {name: [] for name, dt in el.props if not isinstance(dt, tuple)}
        for _ in range(el.count):
            for name, dt in el.props:
                if isinstance(dt, tuple):
                    cdt, idt = np.dtype("<" + dt[0]), np.dtype("<" + dt[1])
                    if pos + cdt.itemsize > len(body):
                        raise ParseError(f"truncated element {el.name!r}", offset=base + pos)
                    n = int(np.frombuffer(body, cdt, 1, pos)[0])
                    pos += cdt.itemsize + n * idt.itemsize
                else:
                    d = np.dtype("<" + dt)
                    if pos + d.itemsize > len(body):
                        raise ParseError(f"truncated element {el.name!r}", offset=base + pos)
                    cols[name].append(float(np.frombuffer(body, d, 1, pos)[0]))
                    pos += d.itemsize
        if el.name == "vertex":
            out = {k: np.array(v, dtype=float) for k, v in cols.items()}
    return out


def load_ply(path) -> PointCloud:
    """Read a PLY file (ASCII or binary little-endian).

    Vertex properties ``x, y, z`` are required. ``nx, ny, nz`` become normals
    when all three are present; any other scalar vertex property is kept in
    ``PointCloud.scalars``.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    fmt, elements, body_start, first_line = _parse_header(raw)
    vertex = next((el for el in elements if el.name == "vertex"), None)
    if vertex is None:
        raise MissingProperty("x")
    names = [name for name, _ in vertex.props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise MissingProperty(axis)
    if fmt == "ascii":
        text = raw[body_start:].decode("ascii", errors="replace").splitlines()
        cols = _read_ascii(text, elements, first_line)
    else:
        cols = _read_binary(raw[body_start:], elements, body_start)
    pts = np.column_stack([cols["x"], cols["y"], cols["z"]]) if vertex.count else np.zeros((0, 3))
    normals = None
    if all(k in cols for k in ("nx", "ny", "nz")):
        normals = np.column_stack([cols["nx"], cols["ny"], cols["nz"]]) if vertex.count else np.zeros((0, 3))
    extra = {k: v for k, v in cols.items() if k not in ("x", "y", "z", "nx", "ny", "nz")}
    return PointCloud(pts, normals, scalars=extra)


def save_ply(cloud: PointCloud, path, binary: bool = True) -> None:
    """Write ``cloud`` as float32 PLY, including normals and scalars if present."""
    names = ["x", "y", "z"]
    cols = [cloud.points[:, 0], cloud.points[:, 1], cloud.points[:, 2]]
    if cloud.normals is not None:
        names += ["nx", "ny", "nz"]
        cols += [cloud.normals[:, 0], cloud.normals[:, 1], cloud.normals[:, 2]]
    for name in sorted(cloud.scalars):
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", name):
            raise ValueError(f"invalid PLY property name {name!r}")
        names.append(name)
        cols.append(np.asarray(cloud.scalars[name], dtype=float))
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property float {n}" for n in names]
    header.append("end_header")
    data = np.zeros(len(cloud), dtype=[(n, "<f4") for n in names])
    for n, c in zip(names, cols):
        data[n] = c
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(data.tobytes())
        else:
            for row in data:
                fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))
    os.replace(tmp, path)


# ------------------------------------------------------------- filters -----

def range_filter(cloud: PointCloud, max_range: float) -> PointCloud:
    """Keep points within ``max_range`` meters of the sensor origin."""
    if max_range <= 0:
        raise ValueError("max_range must be positive")
    keep = np.linalg.norm(cloud.points, axis=1) <= max_range
    return cloud.select(keep)


# ----------------------------------------------------------------- kNN -----

class KdIndex:
    """Exact nearest-neighbour index over a fixed set of points.

    Backed by a median-split k-d tree. Equidistant candidates resolve to the
    lowest point index, matching a brute-force linear scan.
    """

    def __init__(self, points):
        self.points = np.array(points, dtype=float).reshape(-1, 3)
        self.points.setflags(write=False)
        self._tree = cKDTree(self.points, balanced_tree=True, compact_nodes=True) if len(self.points) else None

    def __len__(self):
        return len(self.points)

    def nearest_many(self, queries) -> tuple[np.ndarray, np.ndarray]:
        if self._tree is None:
            raise EmptyIndex("nearest-neighbour query on an empty index")
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        if len(q) == 0:
            return np.zeros(0, dtype=np.intp), np.zeros(0)
        k = min(2, len(self.points))
        dist, idx = self._tree.query(q, k=k)
        if k == 1:
            return np.asarray(idx, dtype=np.intp), np.asarray(dist)
        best_d, best_i = dist[:, 0].copy(), idx[:, 0].copy()
        for r in np.nonzero(dist[:, 1] == dist[:, 0])[0]:
            cand = np.asarray(self._tree.query_ball_point(q[r], best_d[r] * (1 + 1e-12) + 1e-300))
            d = np.linalg.norm(self.points[cand] - q[r], axis=1)
            tied = cand[d == d.min()]
            best_i[r] = tied.min()
            best_d[r] = d.min()
        return best_i.astype(np.intp), best_d

    def knn(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        if self._tree is None:
            raise EmptyIndex("nearest-neighbour query on an empty index")
        dist, idx = self._tree.query(np.asarray(queries, dtype=float).reshape(-1, 3), k=k)
        return idx.reshape(len(dist), -1), dist.reshape(len(dist), -1)


def build_index(cloud: PointCloud) -> KdIndex:
    return KdIndex(cloud.points)


def nearest(index: KdIndex, query) -> tuple[int, float]:
    i, d = index.nearest_many(np.asarray(query, dtype=float).reshape(1, 3))
    return int(i[0]), float(d[0])


def estimate_normals(cloud: PointCloud, k: int = 10, index: KdIndex | None = None) -> PointCloud:
    """PCA normals from each point and its ``k`` nearest neighbours.

    Normals point toward the sensor origin. Neighbourhoods whose covariance
    has fewer than two significant eigenvalues get normal ``[0, 0, 1]`` and
    are marked in ``degenerate_normal``.
    """
    if k < 3:
        raise TooFewPoints(f"k must be at least 3, got {k}")
    n = len(cloud)
    if n < k + 1:
        raise TooFewPoints(f"need at least {k + 1} points, got {n}")
    index = index or build_index(cloud)
    nbr, _ = index.knn(cloud.points, k + 1)
    P = cloud.points[nbr]                       # (n, k+1, 3)
    centered = P - P.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    w, V = np.linalg.eigh(cov)                  # ascending
    normals = V[:, :, 0].copy()
    degenerate = (w[:, 2] <= 0.0) | (w[:, 1] <= 1e-10 * np.maximum(w[:, 2], 1e-300))
    normals[degenerate] = (0.0, 0.0, 1.0)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    flip = np.einsum("ij,ij->i", normals, cloud.points) > 0.0
    normals[flip & ~degenerate] *= -1.0
    return PointCloud(cloud.points, normals, degenerate, dict(cloud.scalars))
