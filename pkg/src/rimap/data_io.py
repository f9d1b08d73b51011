"""Pose lists, point-cloud frames (PLY / XYZ) and PLY meshes."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .config import read_config  # noqa: F401  re-exported for callers of the I/O layer
from .errors import DataFormatError
from .mesh import TriangleMesh

log = logging.getLogger(__name__)

QUAT_TOL = 1e-6


@dataclass
class PoseRecord:
    frame_id: int
    timestamp: float
    translation: np.ndarray
    rotation: np.ndarray  # unit quaternion (x, y, z, w)

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)

    @classmethod
    def identity(cls, frame_id=0, timestamp=0.0, translation=(0.0, 0.0, 0.0)):
        return cls(frame_id, timestamp, np.asarray(translation, float), np.array([0.0, 0.0, 0.0, 1.0]))

    def rotation_matrix(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_matrix()

    def transform(self, points) -> np.ndarray:
        """Sensor-frame points to the global frame."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts @ self.rotation_matrix().T + self.translation


# poses ----------------------------------------------------------------------

def read_poses(path) -> list[PoseRecord]:
    """One pose per line: ``id t tx ty tz qx qy qz qw``; '#' starts a comment."""
    poses = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 9:
                raise DataFormatError(f"{path}:{lineno}: expected 9 fields, got {len(fields)}")
            try:
                frame_id = int(fields[0])
                values = [float(x) for x in fields[1:]]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
            if not np.all(np.isfinite(values)):
                raise DataFormatError(f"{path}:{lineno}: non-finite pose value")
            q = np.array(values[4:8])
            if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
                raise DataFormatError(
                    f"{path}:{lineno}: quaternion norm {np.linalg.norm(q):.9f} is not 1"
                )
            if poses and frame_id <= poses[-1].frame_id:
                raise DataFormatError(f"{path}:{lineno}: frame ids must be strictly increasing")
            poses.append(PoseRecord(frame_id, values[0], np.array(values[1:4]), q))
    return poses


def write_poses(poses, path) -> None:
    with open(path, "w") as fh:
        fh.write("# id t tx ty tz qx qy qz qw\n")
        for p in poses:
            vals = [p.timestamp, *p.translation, *p.rotation]
            fh.write(f"{p.frame_id} " + " ".join(repr(float(v)) for v in vals) + "\n")


# PLY ------------------------------------------------------------------------

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
    props: list  # (name, dtype, list_count_dtype or None)


def _parse_header(data: bytes, path):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise DataFormatError(f"{path}: not a PLY file")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise DataFormatError(f"{path}: truncated PLY header")
    header = data[:end].decode("ascii", "replace").splitlines()
    fmt = None
    elements: list[_Element] = []
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append(_Element(tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise DataFormatError(f"{path}: property before element")
            try:
                if tok[1] == "list":
                    elements[-1].props.append((tok[4], _PLY_TYPES[tok[3]], _PLY_TYPES[tok[2]]))
                else:
                    elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]], None))
            except KeyError as exc:
                raise DataFormatError(f"{path}: unknown PLY type {exc}") from exc
    if fmt not in ("ascii", "binary_little_endian"):
        raise DataFormatError(f"{path}: unsupported PLY format {fmt!r}")
    return fmt, elements, nl + 1


def _read_binary(body: bytes, elements, path):
    out = {}
    off = 0
    for el in elements:
        if all(p[2] is None for p in el.props):
            dt = np.dtype([(name, "<" + t) for name, t, _ in el.props])
            need = dt.itemsize * el.count
            if off + need > len(body):
                raise DataFormatError(f"{path}: truncated PLY payload in element {el.name!r}")
            out[el.name] = np.frombuffer(body, dtype=dt, count=el.count, offset=off)
            off += need
            continue
        if len(el.props) == 1:
            name, it, ct = el.props[0]
            dt = np.dtype([("n", "<" + ct), ("i", "<" + it, (3,))])
            need = dt.itemsize * el.count
            if off + need <= len(body):
                arr = np.frombuffer(body, dtype=dt, count=el.count, offset=off)
                if np.all(arr["n"] == 3):
                    out[el.name] = {name: arr["i"].astype(np.int64)}
                    off += need
                    continue
        rows = {p[0]: [] for p in el.props}
        for _ in range(el.count):
            for name, t, ct in el.props:
                if ct is None:
                    size = np.dtype(t).itemsize
                    if off + size > len(body):
                        raise DataFormatError(f"{path}: truncated PLY payload")
                    rows[name].append(np.frombuffer(body, "<" + t, 1, off)[0])
                    off += size
                else:
                    csize = np.dtype(ct).itemsize
                    if off + csize > len(body):
                        raise DataFormatError(f"{path}: truncated PLY payload")
                    n = int(np.frombuffer(body, "<" + ct, 1, off)[0])
                    off += csize
                    size = np.dtype(t).itemsize * n
                    if off + size > len(body):
                        raise DataFormatError(f"{path}: truncated PLY payload")
                    rows[name].append(np.frombuffer(body, "<" + t, n, off).astype(np.int64))
                    off += size
        out[el.name] = rows
    return out


def _read_ascii(body: bytes, elements, path):
    lines = body.decode("ascii", "replace").splitlines()
    pos = 0
    out = {}
    for el in elements:
        if pos + el.count > len(lines):
            raise DataFormatError(f"{path}: truncated PLY payload in element {el.name!r}")
        chunk = lines[pos:pos + el.count]
        pos += el.count
        if all(p[2] is None for p in el.props):
            dt = np.dtype([(name, t) for name, t, _ in el.props])
            arr = np.zeros(el.count, dt)
            try:
                vals = np.array([ln.split()[:len(el.props)] for ln in chunk], dtype=np.float64)
            except ValueError as exc:
                raise DataFormatError(f"{path}: malformed PLY row: {exc}") from exc
            if vals.size and vals.shape[1] != len(el.props):
                raise DataFormatError(f"{path}: short PLY row in element {el.name!r}")
            for k, (name, _, _) in enumerate(el.props):
                arr[name] = vals[:, k] if el.count else []
            out[el.name] = arr
            continue
        rows = {p[0]: [] for p in el.props}
        for ln in chunk:
            tok = ln.split()
            i = 0
            for name, t, ct in el.props:
                if ct is None:
                    rows[name].append(float(tok[i]))
                    i += 1
                else:
                    n = int(tok[i])
                    rows[name].append(np.array(tok[i + 1:i + 1 + n], dtype=np.int64))
                    i += 1 + n
        out[el.name] = rows
    return out


def read_ply(path) -> dict:
    """Parse a PLY file into ``{element name: structured array or dict of lists}``."""
    data = Path(path).read_bytes()
    fmt, elements, start = _parse_header(data, path)
    body = data[start:]
    if fmt == "ascii":
        return _read_ascii(body, elements, path)
    return _read_binary(body, elements, path)


def _vertex_xyz(ply, path) -> np.ndarray:
    vert = ply.get("vertex")
    if vert is None:
        raise DataFormatError(f"{path}: PLY has no vertex element")
    names = vert.dtype.names if hasattr(vert, "dtype") else tuple(vert)
    if not {"x", "y", "z"} <= set(names):
        raise DataFormatError(f"{path}: PLY vertex element lacks x/y/z properties")
    return np.stack([np.asarray(vert[c], dtype=np.float64) for c in "xyz"], axis=1).reshape(-1, 3)


def read_frame_cloud(path, return_dropped=False):
    """Points of one frame (sensor frame). Accepts PLY or whitespace XYZ text.

    Non-finite points are dropped; pass ``return_dropped=True`` to get the count.
    """
    path = Path(path)
    if path.suffix.lower() == ".ply":
        pts = _vertex_xyz(read_ply(path), path)
    else:
        try:
            arr = np.loadtxt(path, dtype=np.float64, comments="#", ndmin=2)
        except ValueError as exc:
            raise DataFormatError(f"{path}: {exc}") from exc
        if arr.size == 0:
            arr = np.zeros((0, 3))
        if arr.shape[1] < 3:
            raise DataFormatError(f"{path}: XYZ rows need at least 3 columns")
        pts = arr[:, :3]
    finite = np.all(np.isfinite(pts), axis=1)
    dropped = int((~finite).sum())
    if dropped:
        log.info("%s: dropped %d non-finite points", path, dropped)
    pts = pts[finite]
    return (pts, dropped) if return_dropped else pts


def write_cloud_ply(points, path, binary=True) -> None:
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {pts.shape[0]}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(pts.astype("<f4").tobytes())
        else:
            for p in pts:
                fh.write(("%r %r %r\n" % tuple(float(v) for v in p)).encode("ascii"))


def write_xyz(points, path) -> None:
    np.savetxt(path, np.asarray(points, dtype=np.float64).reshape(-1, 3), fmt="%.9g")


def write_mesh(mesh: TriangleMesh, path, mode: str = "binary") -> None:
    if mode not in ("binary", "ascii"):
        raise ValueError(f"mode must be 'binary' or 'ascii', got {mode!r}")
    has_n = mesh.normals is not None
    lines = [
        "ply",
        f"format {'binary_little_endian' if mode == 'binary' else 'ascii'} 1.0",
        f"element vertex {mesh.vertices.shape[0]}",
        "property float x", "property float y", "property float z",
    ]
    if has_n:
        lines += ["property float nx", "property float ny", "property float nz"]
    lines += [f"element face {len(mesh)}", "property list uchar int vertex_indices", "end_header"]
    header = ("\n".join(lines) + "\n").encode("ascii")
    vdata = mesh.vertices.astype(np.float32)
    if has_n:
        vdata = np.hstack([vdata, mesh.normals.astype(np.float32)])
    with open(path, "wb") as fh:
        fh.write(header)
        if mode == "binary":
            fh.write(vdata.astype("<f4").tobytes())
            fdt = np.dtype([("n", "u1"), ("i", "<i4", (3,))])
            faces = np.zeros(len(mesh), fdt)
            faces["n"] = 3
            faces["i"] = mesh.triangles
            fh.write(faces.tobytes())
        else:
            for row in vdata:
                fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))
            for tri in mesh.triangles:
                fh.write(("3 %d %d %d\n" % tuple(tri)).encode("ascii"))


def read_mesh(path) -> TriangleMesh:
    ply = read_ply(path)
    verts = _vertex_xyz(ply, path)
    vert = ply["vertex"]
    names = vert.dtype.names if hasattr(vert, "dtype") else tuple(vert)
    normals = None
    if {"nx", "ny", "nz"} <= set(names):
        normals = np.stack([np.asarray(vert[c], np.float64) for c in ("nx", "ny", "nz")], axis=1)
    tris = np.zeros((0, 3), np.int64)
    face = ply.get("face")
    if face is not None:
        lists = face.get("vertex_indices", face.get("vertex_index"))
        if lists is None:
            raise DataFormatError(f"{path}: face element lacks vertex_indices")
        if isinstance(lists, np.ndarray):
            tris = lists.reshape(-1, 3)
        else:
            out = []
            for poly in lists:
                # fan-triangulate polygons
                out.extend((poly[0], poly[k], poly[k + 1]) for k in range(1, len(poly) - 1))
            tris = np.asarray(out, np.int64).reshape(-1, 3)
    if tris.size and (tris.min() < 0 or tris.max() >= verts.shape[0]):
        raise DataFormatError(f"{path}: face index out of range")
    return TriangleMesh(verts, tris, normals)
