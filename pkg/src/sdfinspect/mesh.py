"""Triangle meshes: OBJ/PLY ingestion, export and normalisation into a world box."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, MeshFormatError


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    bounds: np.ndarray = None
    # original = (normalised - offset) / scale
    scale: float = 1.0
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.vertices) == 0 or len(self.faces) == 0:
            raise InvalidInputError("mesh has no vertices or no faces")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise InvalidInputError("face index out of range")
        vb = np.stack([self.vertices.min(axis=0), self.vertices.max(axis=0)])
        if self.bounds is None:
            self.bounds = vb
        else:
            self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
            self.bounds = np.stack([np.minimum(self.bounds[0], vb[0]),
                                    np.maximum(self.bounds[1], vb[1])])

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        t = self.triangles
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def surface_area(self) -> float:
        return float(self.face_areas().sum())

    def to_original_units(self, length: float) -> float:
        return length / self.scale


def normalize_to_box(mesh: TriangleMesh, box_min, box_max, margin: float = 0.0) -> TriangleMesh:
    """Uniformly scale and translate ``mesh`` so its scene bounds fit the world box.

    The transform is kept on the returned mesh so lengths can be reported in the
    original units again.
    """
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    inner = (box_max - box_min) - 2.0 * margin
    if np.any(inner <= 0):
        raise InvalidInputError("world box too small for the requested margin")
    extent = mesh.bounds[1] - mesh.bounds[0]
    extent = np.where(extent > 0, extent, 1.0)
    scale = float(np.min(inner / extent))
    center_src = 0.5 * (mesh.bounds[0] + mesh.bounds[1])
    center_dst = 0.5 * (box_min + box_max)
    offset = center_dst - scale * center_src
    out = TriangleMesh(mesh.vertices * scale + offset, mesh.faces.copy(),
                       bounds=np.stack([box_min, box_max]))
    out.scale = mesh.scale * scale
    out.offset = mesh.offset * scale + offset
    return out


def load_mesh(path, fmt: str | None = None) -> TriangleMesh:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scene not found: {path}")
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        vertices, faces = _read_obj(path)
    elif fmt == "ply":
        vertices, faces = _read_ply(path)
    else:
        raise MeshFormatError(f"unsupported mesh format {fmt!r}")
    if len(vertices) == 0 or len(faces) == 0:
        raise InvalidInputError(f"{path}: mesh is empty")
    return TriangleMesh(np.asarray(vertices, dtype=np.float64), np.asarray(faces, dtype=np.int64))


def _fan(poly):
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def _read_obj(path: Path):
    vertices, faces = [], []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    vertices.append([float(c) for c in parts[1:4]])
                    if len(vertices[-1]) != 3:
                        raise ValueError("vertex needs 3 coordinates")
                elif parts[0] == "f":
                    poly = []
                    for tok in parts[1:]:
                        idx = int(tok.split("/")[0])
                        idx = idx - 1 if idx > 0 else len(vertices) + idx
                        if idx < 0 or idx >= len(vertices):
                            raise ValueError(f"vertex index {tok} out of range")
                        poly.append(idx)
                    if len(poly) < 3:
                        raise ValueError("face needs at least 3 vertices")
                    faces.extend(_fan(poly))
            except ValueError as exc:
                raise MeshFormatError(f"{path}:{lineno}: {exc}") from None
    return vertices, faces


_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _read_ply(path: Path):
    data = path.read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshFormatError(f"{path}: offset 0: not a PLY file")
    nl = data.find(b"\n", end)
    body_start = nl + 1 if nl >= 0 else len(data)
    header = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []  # [name, count, [(name, type) or (name, ("list", ctype, itype))]]
    for lineno, line in enumerate(header, start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError(f"{path}:{lineno}: property before element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], ("list", parts[2], parts[3])))
            else:
                elements[-1][2].append((parts[2], parts[1]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshFormatError(f"{path}: unsupported PLY format {fmt!r}")
    vertices, faces = [], []
    if fmt == "ascii":
        lines = data[body_start:].decode("ascii", errors="replace").split("\n")
        lineno0 = len(header) + 2
        pos = 0
        for name, count, props in elements:
            for _ in range(count):
                while pos < len(lines) and not lines[pos].strip():
                    pos += 1
                if pos >= len(lines):
                    raise MeshFormatError(f"{path}:{lineno0 + pos}: unexpected end of file")
                toks = lines[pos].split()
                try:
                    rec, k = {}, 0
                    for pname, ptype in props:
                        if isinstance(ptype, tuple):
                            n = int(toks[k])
                            rec[pname] = [int(t) for t in toks[k + 1:k + 1 + n]]
                            if len(rec[pname]) != n:
                                raise ValueError("short list")
                            k += 1 + n
                        else:
                            v = float(toks[k])
                            # honour the declared width so ascii and binary files agree bitwise
                            rec[pname] = float(np.float32(v)) if ptype in ("float", "float32") else v
                            k += 1
                except (ValueError, IndexError) as exc:
                    raise MeshFormatError(f"{path}:{lineno0 + pos}: {exc}") from None
                _collect(name, rec, vertices, faces)
                pos += 1
    else:
        off = body_start
        for name, count, props in elements:
            simple = all(not isinstance(t, tuple) for _, t in props)
            if simple:
                rec_fmt = "<" + "".join(_PLY_TYPES[t] for _, t in props)
                size = struct.calcsize(rec_fmt)
                if off + size * count > len(data):
                    raise MeshFormatError(f"{path}: offset {off}: truncated {name} data")
                arr = np.frombuffer(data, dtype=np.dtype([(p, "<" + _PLY_TYPES[t]) for p, t in props]),
                                    count=count, offset=off)
                off += size * count
                if name == "vertex":
                    vertices = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64).tolist()
                continue
            for _ in range(count):
                rec = {}
                for pname, ptype in props:
                    try:
                        if isinstance(ptype, tuple):
                            cfmt, ifmt = "<" + _PLY_TYPES[ptype[1]], _PLY_TYPES[ptype[2]]
                            (n,) = struct.unpack_from(cfmt, data, off)
                            off += struct.calcsize(cfmt)
                            lfmt = f"<{n}{ifmt}"
                            rec[pname] = list(struct.unpack_from(lfmt, data, off))
                            off += struct.calcsize(lfmt)
                        else:
                            f = "<" + _PLY_TYPES[ptype]
                            (rec[pname],) = struct.unpack_from(f, data, off)
                            off += struct.calcsize(f)
                    except struct.error:
                        raise MeshFormatError(f"{path}: offset {off}: truncated {name} data") from None
                _collect(name, rec, vertices, faces)
    nv = len(vertices)
    for f in faces:
        if min(f) < 0 or max(f) >= nv:
            raise MeshFormatError(f"{path}: face index out of range")
    return vertices, faces


def _collect(name, rec, vertices, faces):
    if name == "vertex":
        vertices.append([rec["x"], rec["y"], rec["z"]])
    elif name == "face":
        poly = rec.get("vertex_indices", rec.get("vertex_index"))
        if poly is not None and len(poly) >= 3:
            faces.extend(_fan(poly))


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def save_ply(path, points, faces=None, binary: bool = True) -> None:
    """Write a point cloud (``faces=None``) or a triangle mesh as PLY."""
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    lines = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
             f"element vertex {len(points)}",
             "property float x", "property float y", "property float z"]
    if faces is not None:
        faces = np.asarray(faces, dtype=np.int32).reshape(-1, 3)
        lines += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        if binary:
            fh.write(points.astype("<f4").tobytes())
            if faces is not None:
                rec = np.zeros(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
                rec["n"] = 3
                rec["idx"] = faces
                fh.write(rec.tobytes())
        else:
            for p in points:
                fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n".encode("ascii"))
            if faces is not None:
                for f in faces:
                    fh.write(f"3 {f[0]} {f[1]} {f[2]}\n".encode("ascii"))
