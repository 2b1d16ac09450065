"""Point cloud and instance-label file formats.

Supported formats:

* XYZ ASCII, 3 columns (x y z) or 4 columns (x y z label).
* PLY, ASCII or binary little-endian, float/double ``x y z`` and optional
  ``nx ny nz`` vertex properties.
* Label files, one integer per line in point order; ``-1`` marks NOISE.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

NOISE = -1

PathLike = Union[str, os.PathLike]


class CloudIOError(ValueError):
    """Raised for malformed or inconsistent input files."""


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Immutable set of 3D points (meters) with optional unit normals."""

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    id: str = ""

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise CloudIOError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=np.float64, copy=True).reshape(-1, 3)
            if nrm.shape != pts.shape:
                raise CloudIOError(
                    f"normals shape {nrm.shape} does not match points {pts.shape}"
                )
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise CloudIOError("normals must have unit length")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_normals(self, normals: np.ndarray) -> "PointCloud":
        return PointCloud(self.points, normals, self.id)

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        nrm = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], nrm, self.id)


def as_labeling(labels, n_points: Optional[int] = None) -> np.ndarray:
    """Validate and convert a per-point instance labeling to an int64 array."""
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise CloudIOError("labeling must be one-dimensional")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise CloudIOError("labels must be integers")
    arr = arr.astype(np.int64)
    if n_points is not None and arr.shape[0] != n_points:
        raise CloudIOError(
            f"labeling length {arr.shape[0]} does not match point count {n_points}"
        )
    if np.any(arr < NOISE):
        raise CloudIOError("instance ids must be >= 0 or -1 (NOISE)")
    return arr


# --------------------------------------------------------------------------- XYZ


def load_xyz(
    path: PathLike, has_label_column: bool = False
) -> Tuple[PointCloud, Optional[np.ndarray]]:
    """Read an ASCII XYZ file, optionally with a fourth integer label column."""
    path = Path(path)
    ncols = 4 if has_label_column else 3
    rows = []
    labels = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != ncols:
                raise CloudIOError(
                    f"{path}: line {lineno}: expected {ncols} fields, got {len(parts)}"
                )
            try:
                rows.append([float(v) for v in parts[:3]])
                if has_label_column:
                    labels.append(int(parts[3]))
            except ValueError as exc:
                raise CloudIOError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        raise CloudIOError(f"{path}: empty point file")
    pts = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise CloudIOError(f"{path}: non-finite coordinate")
    cloud = PointCloud(pts, id=path.stem)
    lab = as_labeling(labels, len(cloud)) if has_label_column else None
    return cloud, lab


def save_xyz(path: PathLike, cloud: PointCloud, labels=None) -> None:
    pts = cloud.points.tolist()  # python floats: repr round-trips exactly
    with open(path, "w", encoding="utf-8") as fh:
        if labels is None:
            for x, y, z in pts:
                fh.write(f"{x!r} {y!r} {z!r}\n")
        else:
            lab = as_labeling(labels, len(cloud))
            for (x, y, z), lbl in zip(pts, lab):
                fh.write(f"{x!r} {y!r} {z!r} {int(lbl)}\n")


# --------------------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _parse_ply_header(fh, path):
    first = fh.readline()
    if first.strip() != b"ply":
        raise CloudIOError(f"{path}: not a PLY file")
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype or None, is_list)])
    while True:
        line = fh.readline()
        if not line:
            raise CloudIOError(f"{path}: unterminated PLY header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        key = tokens[0]
        if key == "end_header":
            break
        if key == "format":
            fmt = tokens[1]
        elif key == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif key == "property":
            if not elements:
                raise CloudIOError(f"{path}: property before element")
            if tokens[1] == "list":
                elements[-1][2].append((tokens[-1], None, True))
            else:
                dt = _PLY_TYPES.get(tokens[1])
                elements[-1][2].append((tokens[2], dt, False))
                if dt is None:
                    raise CloudIOError(
                        f"{path}: unsupported type {tokens[1]!r} for property {tokens[2]!r}"
                    )
    if fmt not in ("ascii", "binary_little_endian"):
        raise CloudIOError(f"{path}: unsupported PLY format {fmt!r}")
    return fmt, elements


def load_ply(path: PathLike) -> PointCloud:
    """Read vertex positions (and normals, when present) from a PLY file.

    Only the ``vertex`` element is read. Elements declared before it must have
    fixed-size properties so they can be skipped.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh, path)
        body = fh.read()

    offset = 0
    ascii_lines = body.decode("ascii", errors="replace").splitlines() if fmt == "ascii" else None
    line_pos = 0
    vertex = None
    for name, count, props in elements:
        if name == "vertex":
            for pname, _, is_list in props:
                if is_list:
                    raise CloudIOError(f"{path}: unsupported list property {pname!r} in vertex")
            vertex = (count, props)
            break
        if any(is_list for _, _, is_list in props):
            raise CloudIOError(f"{path}: cannot skip element {name!r} with list properties")
        if fmt == "ascii":
            line_pos += count
        else:
            offset += count * sum(np.dtype(dt).itemsize for _, dt, _ in props)
    if vertex is None:
        raise CloudIOError(f"{path}: no vertex element")
    count, props = vertex
    names = [p[0] for p in props]
    for req in ("x", "y", "z"):
        if req not in names:
            raise CloudIOError(f"{path}: missing vertex property {req!r}")

    if fmt == "ascii":
        rows = [ln.split() for ln in ascii_lines[line_pos:line_pos + count]]
        if len(rows) < count or any(len(r) != len(props) for r in rows):
            raise CloudIOError(f"{path}: unexpected end of vertex data")
        try:
            table = np.asarray(rows, dtype=np.float64)
        except ValueError as exc:
            raise CloudIOError(f"{path}: {exc}") from None
        table = table.reshape(count, len(props))
        cols = {n: table[:, i] for i, n in enumerate(names)}
    else:
        dtype = np.dtype([(n, "<" + dt) for n, dt, _ in props])
        need = dtype.itemsize * count
        if len(body) - offset < need:
            raise CloudIOError(f"{path}: unexpected end of vertex data")
        rec = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
        cols = {n: rec[n].astype(np.float64) for n in names}

    pts = np.column_stack([cols["x"], cols["y"], cols["z"]])
    normals = None
    if all(k in cols for k in ("nx", "ny", "nz")):
        normals = np.column_stack([cols["nx"], cols["ny"], cols["nz"]])
        lengths = np.linalg.norm(normals, axis=1)
        if np.any(lengths == 0) or not np.all(np.isfinite(lengths)):
            raise CloudIOError(f"{path}: zero-length or non-finite normal")
        normals = normals / lengths[:, None]
    if count == 0:
        raise CloudIOError(f"{path}: empty point file")
    return PointCloud(pts, normals, id=path.stem)


def save_ply(path: PathLike, cloud: PointCloud, binary: bool = True) -> None:
    has_n = cloud.normals is not None
    props = ["x", "y", "z"] + (["nx", "ny", "nz"] if has_n else [])
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property double {p}" for p in props]
    header.append("end_header")
    data = cloud.points if not has_n else np.hstack([cloud.points, cloud.normals])
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
        else:
            for row in data:
                fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))


def load_cloud(path: PathLike) -> Tuple[PointCloud, Optional[np.ndarray]]:
    """Load a PLY or XYZ file; a 4-column XYZ file yields labels as well."""
    path = Path(path)
    if not path.exists():
        raise CloudIOError(f"{path}: no such file")
    if path.suffix.lower() == ".ply":
        return load_ply(path), None
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.split():
                ncols = len(line.split())
                break
        else:
            raise CloudIOError(f"{path}: empty point file")
    return load_xyz(path, has_label_column=(ncols == 4))


# ------------------------------------------------------------------------ labels


def save_labeling(labeling, path: PathLike) -> None:
    lab = as_labeling(labeling)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(f"{int(v)}\n" for v in lab))


def load_labeling(path: PathLike, expected_len: Optional[int] = None) -> np.ndarray:
    path = Path(path)
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            try:
                values.append(int(s))
            except ValueError:
                raise CloudIOError(f"{path}: line {lineno}: not an integer: {s!r}") from None
    if expected_len is not None and len(values) != expected_len:
        raise CloudIOError(
            f"{path}: label count {len(values)} does not match expected {expected_len}"
        )
    return as_labeling(np.asarray(values, dtype=np.int64))
