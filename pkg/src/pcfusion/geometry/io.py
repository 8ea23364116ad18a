"""File formats: PLY point clouds, OBJ / binary STL meshes, JSON pose lists."""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from ..errors import IoError, ParseError
from .types import PointCloud, RigidTransform, TriangleMesh

logger = logging.getLogger(__name__)

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


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise IoError(f"no such file: {path}") from exc


# --------------------------------------------------------------------------- PLY

def _parse_ply_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply"):
        raise ParseError("not a PLY file: missing 'ply' magic", 0)
    if end < 0:
        raise ParseError("truncated PLY header: missing 'end_header'", len(data))
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    fmt = None
    elements: list[dict] = []
    offset = 0
    for raw in data[:end].split(b"\n"):
        line = raw.decode("ascii", errors="replace").strip()
        tok = line.split()
        if tok and tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported PLY format line '{line}'", offset)
            fmt = tok[1]
        elif tok and tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise ParseError(f"malformed element line '{line}'", offset)
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok and tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", offset)
            if tok[1] == "list":
                if len(tok) != 5 or tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise ParseError(f"malformed list property '{line}'", offset)
                elements[-1]["props"].append((tok[4], "list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                    raise ParseError(f"malformed property line '{line}'", offset)
                elements[-1]["props"].append((tok[2], _PLY_TYPES[tok[1]]))
        offset += len(raw) + 1
    if fmt is None:
        raise ParseError("truncated PLY header: missing 'format' line", end)
    return fmt, elements, body_start


def read_ply(path) -> tuple[PointCloud, dict[str, np.ndarray]]:
    """Read the vertex element of a PLY file.

    Returns:
        The cloud (normals attached when nx/ny/nz are present) and a dict of
        any further scalar vertex properties, e.g. a ``distance`` field.
    """
    data = _read_bytes(path)
    fmt, elements, pos = _parse_ply_header(data)
    names = [e["name"] for e in elements]
    if "vertex" not in names:
        raise ParseError("PLY header is missing element 'vertex'", pos)
    vertex = elements[names.index("vertex")]
    props = vertex["props"]
    if any(len(p) != 2 for p in props):
        raise ParseError("list properties on element 'vertex' are not supported", pos)
    for axis in "xyz":
        if axis not in [p[0] for p in props]:
            raise ParseError(f"element 'vertex' is missing property '{axis}'", pos)
    n = vertex["count"]
    if fmt == "ascii":
        table = _read_ply_ascii(data, pos, elements, "vertex")
    else:
        before = elements[: names.index("vertex")]
        for el in before:
            if any(len(p) != 2 for p in el["props"]):
                raise ParseError(f"cannot skip list element '{el['name']}' preceding 'vertex'", pos)
            pos += el["count"] * int(sum(np.dtype(p[1]).itemsize for p in el["props"]))
        dtype = np.dtype([(p[0], "<" + p[1]) for p in props])
        need = n * dtype.itemsize
        if pos + need > len(data):
            raise ParseError(
                f"binary vertex data truncated: need {need} bytes, have {max(len(data) - pos, 0)}",
                len(data),
            )
        rec = np.frombuffer(data, dtype=dtype, count=n, offset=pos)
        table = {p[0]: rec[p[0]].astype(np.float64) for p in props}
    points = np.column_stack([table["x"], table["y"], table["z"]])
    normals = None
    if all(k in table for k in ("nx", "ny", "nz")):
        normals = np.column_stack([table["nx"], table["ny"], table["nz"]])
        norm = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = np.divide(normals, norm, out=np.zeros_like(normals), where=norm > 0)
        if np.any(norm == 0):
            normals = None
    extras = {k: v for k, v in table.items() if k not in ("x", "y", "z", "nx", "ny", "nz")}
    return PointCloud(points, normals), extras


def _read_ply_ascii(data: bytes, pos: int, elements, wanted: str) -> dict[str, np.ndarray]:
    lines = data[pos:].split(b"\n")
    li = 0
    offset = pos
    for el in elements:
        rows = []
        for _ in range(el["count"]):
            while li < len(lines) and not lines[li].strip():
                offset += len(lines[li]) + 1
                li += 1
            if li >= len(lines):
                raise ParseError(f"ascii data truncated in element '{el['name']}'", len(data))
            if el["name"] == wanted:
                try:
                    rows.append([float(v) for v in lines[li].split()])
                except ValueError as exc:
                    raise ParseError(f"non-numeric value in element '{wanted}'", offset) from exc
                if len(rows[-1]) != len(el["props"]):
                    raise ParseError(f"expected {len(el['props'])} values in element '{wanted}'", offset)
            offset += len(lines[li]) + 1
            li += 1
        if el["name"] == wanted:
            arr = np.array(rows, dtype=float).reshape(len(rows), len(el["props"]))
            return {p[0]: arr[:, i] for i, p in enumerate(el["props"])}
    raise ParseError(f"element '{wanted}' not found", pos)


def write_ply(
    path,
    cloud: PointCloud,
    *,
    binary: bool = True,
    dtype: str = "double",
    scalars: Optional[Mapping[str, np.ndarray]] = None,
) -> None:
    """Write a cloud (plus optional per-point scalar fields) as PLY."""
    cols = [("x", cloud.points[:, 0]), ("y", cloud.points[:, 1]), ("z", cloud.points[:, 2])]
    if cloud.normals is not None:
        cols += [("nx", cloud.normals[:, 0]), ("ny", cloud.normals[:, 1]), ("nz", cloud.normals[:, 2])]
    for name, values in (scalars or {}).items():
        values = np.asarray(values, dtype=float)
        if len(values) != len(cloud):
            raise ValueError(f"scalar field '{name}' has wrong length")
        cols.append((name, values))
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property {dtype} {name}" for name, _ in cols]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    np_type = "<f8" if dtype == "double" else "<f4"
    with open(path, "wb") as fh:
        fh.write(head)
        if binary:
            rec = np.empty(len(cloud), dtype=[(name, np_type) for name, _ in cols])
            for name, values in cols:
                rec[name] = values
            fh.write(rec.tobytes())
        else:
            table = np.column_stack([v for _, v in cols]) if cols else np.zeros((0, 0))
            if dtype != "double":
                table = table.astype(np.float32)
            fmt = "%.17g" if dtype == "double" else "%.9g"
            lines = [" ".join(fmt % v for v in row) for row in table]
            fh.write(("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))


# --------------------------------------------------------------------------- OBJ

def read_obj(path) -> TriangleMesh:
    """Read ``v`` and ``f`` records; polygons are fan-triangulated."""
    data = _read_bytes(path)
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    offset = 0
    for raw in data.split(b"\n"):
        line = raw.split(b"#", 1)[0].strip()
        if line.startswith(b"v "):
            parts = line.split()
            try:
                verts.append([float(p) for p in parts[1:4]])
            except ValueError as exc:
                raise ParseError("bad vertex record", offset) from exc
            if len(verts[-1]) != 3:
                raise ParseError("vertex record needs 3 coordinates", offset)
        elif line.startswith(b"f "):
            idx = []
            for token in line.split()[1:]:
                try:
                    i = int(token.split(b"/")[0])
                except ValueError as exc:
                    raise ParseError("bad face record", offset) from exc
                idx.append(i - 1 if i > 0 else len(verts) + i)
            if len(idx) < 3:
                raise ParseError("face needs at least 3 vertices", offset)
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
        offset += len(raw) + 1
    return TriangleMesh(np.array(verts, float).reshape(-1, 3), np.array(faces, np.int64).reshape(-1, 3))


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = ["v %.17g %.17g %.17g" % tuple(v) for v in mesh.vertices]
    lines += ["f %d %d %d" % tuple(t + 1) for t in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------- STL

_STL_RECORD = np.dtype([("normal", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])


def read_stl(path) -> TriangleMesh:
    """Binary STL; shared corners are merged into indexed vertices."""
    data = _read_bytes(path)
    if len(data) < 84:
        raise ParseError("binary STL shorter than its 84-byte header", len(data))
    (count,) = struct.unpack_from("<I", data, 80)
    need = 84 + count * _STL_RECORD.itemsize
    if len(data) < need:
        raise ParseError(f"STL declares {count} triangles but data is truncated", len(data))
    rec = np.frombuffer(data, dtype=_STL_RECORD, count=count, offset=84)
    corners = rec["v"].astype(np.float64).reshape(-1, 3)
    verts, inverse = np.unique(corners, axis=0, return_inverse=True)
    tris = inverse.reshape(-1, 3)
    return TriangleMesh(verts, tris)


def write_stl(path, mesh: TriangleMesh) -> None:
    rec = np.zeros(len(mesh), dtype=_STL_RECORD)
    rec["normal"] = mesh.triangle_normals
    rec["v"] = mesh.corners
    with open(path, "wb") as fh:
        fh.write(b"pcfusion binary STL".ljust(80, b" "))
        fh.write(struct.pack("<I", len(mesh)))
        fh.write(rec.tobytes())


def read_mesh(path) -> TriangleMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".stl":
        return read_stl(path)
    raise ParseError(f"unrecognised mesh extension '{suffix}'")


def write_mesh(path, mesh: TriangleMesh) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        write_obj(path, mesh)
    elif suffix == ".stl":
        write_stl(path, mesh)
    else:
        raise ParseError(f"unrecognised mesh extension '{suffix}'")


# --------------------------------------------------------------------------- poses

def write_poses(path, poses: Sequence[RigidTransform], meta: Optional[dict] = None) -> None:
    """Row-major 4x4 matrices under ``"poses"``, with optional metadata."""
    doc = {"poses": [T.to_list() for T in poses]}
    if meta:
        doc["meta"] = meta
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_poses(path) -> list[RigidTransform]:
    try:
        doc = json.loads(_read_bytes(path).decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.pos) from exc
    items = doc["poses"] if isinstance(doc, dict) else doc
    poses = []
    for i, m in enumerate(items):
        arr = np.asarray(m, dtype=float)
        if arr.shape == (16,):
            arr = arr.reshape(4, 4)
        if arr.shape != (4, 4):
            raise ParseError(f"pose {i} is not a 4x4 matrix")
        poses.append(RigidTransform(arr))
    return poses
