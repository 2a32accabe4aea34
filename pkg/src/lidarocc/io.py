"""File formats: binary PLY frames and meshes, text pose files, JSON documents."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import PoseSE3

log = logging.getLogger(__name__)

FRAME_PATTERN = "frame_{:06d}.ply"

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class PlyParseError(ValueError):
    pass


class PoseFileError(ValueError):
    pass


@dataclass
class PointCloudFrame:
    """One sweep: ``(N, 3)`` float32 points in sensor coordinates."""

    points: np.ndarray
    index: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)

    def __len__(self):
        return len(self.points)


# --- PLY ---------------------------------------------------------------------


def _parse_header(data: bytes, path):
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise PlyParseError(f"{path}: offset 0: missing ply magic or end_header")
    lines = data[:end].decode("ascii", errors="replace").split("\n")[1:]
    body_offset = end + len(b"end_header\n")
    fmt = None
    elements = []
    for line in lines:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1] if len(parts) > 1 else None
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise PlyParseError(f"{path}: header: malformed element line {line!r}")
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise PlyParseError(f"{path}: header: property before element")
            if parts[1] == "list":
                if len(parts) != 5 or parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise PlyParseError(f"{path}: header: malformed list property {line!r}")
                elements[-1][2].append((parts[4], ("list", parts[2], parts[3])))
            else:
                if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                    raise PlyParseError(f"{path}: header: unknown property {line!r}")
                elements[-1][2].append((parts[2], parts[1]))
        else:
            raise PlyParseError(f"{path}: header: unexpected line {line!r}")
    if fmt != "binary_little_endian":
        raise PlyParseError(f"{path}: header: only binary_little_endian is supported, got {fmt}")
    return elements, body_offset


def read_ply(path) -> dict:
    """Read a binary little-endian PLY into ``{element: {property: array}}``.

    List properties must have a constant length per element (triangle faces).
    """
    path = Path(path)
    data = path.read_bytes()
    elements, offset = _parse_header(data, path)
    out = {}
    for name, count, props in elements:
        if all(not isinstance(t, tuple) for _, t in props):
            dt = np.dtype([(p, "<" + _PLY_TYPES[t]) for p, t in props])
            need = dt.itemsize * count
            if offset + need > len(data):
                raise PlyParseError(
                    f"{path}: offset {offset}: element '{name}' needs {need} bytes, "
                    f"{len(data) - offset} available"
                )
            arr = np.frombuffer(data, dtype=dt, count=count, offset=offset)
            offset += need
            out[name] = {p: arr[p].copy() for p, _ in props}
        else:
            if len(props) != 1:
                raise PlyParseError(f"{path}: element '{name}': only a single list property is supported")
            pname, (_, ctype, itype) = props[0]
            cdt = np.dtype("<" + _PLY_TYPES[ctype])
            idt = np.dtype("<" + _PLY_TYPES[itype])
            if count == 0:
                out[name] = {pname: np.zeros((0, 3), dtype=np.int64)}
                continue
            if offset + cdt.itemsize > len(data):
                raise PlyParseError(f"{path}: offset {offset}: truncated element '{name}'")
            n = int(np.frombuffer(data, dtype=cdt, count=1, offset=offset)[0])
            dt = np.dtype([("n", cdt), ("v", idt, (n,))])
            need = dt.itemsize * count
            if offset + need > len(data):
                raise PlyParseError(
                    f"{path}: offset {offset}: element '{name}' needs {need} bytes, "
                    f"{len(data) - offset} available"
                )
            arr = np.frombuffer(data, dtype=dt, count=count, offset=offset)
            if np.any(arr["n"] != n):
                raise PlyParseError(f"{path}: offset {offset}: element '{name}' has mixed list lengths")
            offset += need
            out[name] = {pname: arr["v"].astype(np.int64)}
    if offset != len(data):
        raise PlyParseError(f"{path}: offset {offset}: {len(data) - offset} unexpected trailing bytes")
    return out


def _header(elements) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0"]
    for name, count, props in elements:
        lines.append(f"element {name} {count}")
        lines.extend(props)
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def write_points_ply(path, points) -> None:
    pts = np.ascontiguousarray(np.asarray(points, dtype="<f4").reshape(-1, 3))
    head = _header([("vertex", len(pts), ["property float x", "property float y", "property float z"])])
    Path(path).write_bytes(head + pts.tobytes())


def read_points_ply(path) -> np.ndarray:
    el = read_ply(path)
    if "vertex" not in el or not {"x", "y", "z"} <= set(el["vertex"]):
        raise PlyParseError(f"{path}: header: no vertex x/y/z properties")
    v = el["vertex"]
    pts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float32)
    bad = ~np.all(np.isfinite(pts), axis=1)
    if np.any(bad):
        row = int(np.argmax(bad))
        raise PlyParseError(f"{path}: vertex {row}: non-finite coordinate")
    return pts


def write_frames(frames, directory) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, fr in enumerate(frames):
        p = d / FRAME_PATTERN.format(i)
        write_points_ply(p, fr.points)
        paths.append(p)
    return paths


def read_frames(directory) -> list[PointCloudFrame]:
    d = Path(directory)
    files = sorted(d.glob("frame_*.ply"))
    if not files:
        raise FileNotFoundError(f"{d}: no frame_*.ply files")
    frames = []
    for i, f in enumerate(files):
        frames.append(PointCloudFrame(read_points_ply(f), i))
    return frames


def write_mesh_ply(path, mesh) -> None:
    v = np.ascontiguousarray(np.asarray(mesh.vertices, dtype="<f4").reshape(-1, 3))
    f = np.asarray(mesh.triangles, dtype=np.int64).reshape(-1, 3)
    vprops = ["property float x", "property float y", "property float z"]
    vdata = [v]
    if mesh.normals is not None:
        vprops += ["property float nx", "property float ny", "property float nz"]
        vdata.append(np.asarray(mesh.normals, dtype="<f4").reshape(-1, 3))
    head = _header([
        ("vertex", len(v), vprops),
        ("face", len(f), ["property list uchar int vertex_indices"]),
    ])
    vbytes = np.ascontiguousarray(np.concatenate(vdata, axis=1)).tobytes()
    fdt = np.dtype([("n", "u1"), ("v", "<i4", (3,))])
    frec = np.empty(len(f), dtype=fdt)
    frec["n"] = 3
    frec["v"] = f
    Path(path).write_bytes(head + vbytes + frec.tobytes())


def read_mesh_ply(path):
    from .mesher import TriangleMesh

    el = read_ply(path)
    v = el.get("vertex")
    if v is None or not {"x", "y", "z"} <= set(v):
        raise PlyParseError(f"{path}: header: no vertex x/y/z properties")
    verts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    normals = None
    if {"nx", "ny", "nz"} <= set(v):
        normals = np.stack([v["nx"], v["ny"], v["nz"]], axis=1).astype(np.float64)
    faces = np.zeros((0, 3), dtype=np.int64)
    if "face" in el:
        faces = next(iter(el["face"].values()))
        if faces.ndim != 2 or (len(faces) and faces.shape[1] != 3):
            raise PlyParseError(f"{path}: faces must be triangles")
        if len(faces) and (faces.min() < 0 or faces.max() >= len(verts)):
            raise PlyParseError(f"{path}: face index out of range")
    return TriangleMesh(verts, faces.reshape(-1, 3), normals)


# --- poses -------------------------------------------------------------------


def rotation_to_quaternion(r) -> np.ndarray:
    """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([(r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s, 0.25 * s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + r[i, i] - r[j, j] - r[k, k])
        q = np.empty(4)
        q[i] = 0.25 * s
        q[j] = (r[j, i] + r[i, j]) / s
        q[k] = (r[k, i] + r[i, k]) / s
        q[3] = (r[k, j] - r[j, k]) / s
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quaternion_to_rotation(q) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=np.float64)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _fmt(v: float) -> str:
    v = float(v)
    if v == 0.0:
        v = 0.0  # drop the sign of negative zero
    return f"{v:.17g}"


def write_poses(poses, path) -> None:
    lines = []
    for i, p in enumerate(poses):
        q = rotation_to_quaternion(p.rotation)
        vals = [*p.translation, *q]
        lines.append(" ".join([str(i)] + [_fmt(v) for v in vals]))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_poses(path) -> list[PoseSE3]:
    poses = []
    last = -1
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 8:
            raise PoseFileError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            idx = int(parts[0])
            vals = np.array([float(x) for x in parts[1:]])
        except ValueError:
            raise PoseFileError(f"{path}:{lineno}: malformed number") from None
        if not np.all(np.isfinite(vals)):
            raise PoseFileError(f"{path}:{lineno}: non-finite value")
        if idx <= last:
            raise PoseFileError(f"{path}:{lineno}: indices must be strictly increasing")
        last = idx
        q = vals[3:]
        qn = np.linalg.norm(q)
        if abs(qn - 1.0) > 1e-3:
            raise PoseFileError(f"{path}:{lineno}: quaternion norm {qn:.6g} is not 1")
        if abs(qn - 1.0) > 1e-6:
            log.warning("%s:%d: renormalising quaternion (norm %.9g)", path, lineno, qn)
            q = q / qn
        poses.append(PoseSE3(quaternion_to_rotation(q), vals[:3]))
    return poses


# --- JSON documents ----------------------------------------------------------


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}: {exc.msg}") from None
