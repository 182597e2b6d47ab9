"""Triangle mesh container, OBJ/PLY I/O, normals, and manifold repair."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

_FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])


class MeshError(ValueError):
    """Raised for malformed mesh files or invalid mesh data."""


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        if np.any(self.min > self.max):
            raise MeshError("Aabb min must be <= max componentwise")

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.max - self.min))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def half_extents(self) -> np.ndarray:
        return 0.5 * (self.max - self.min)


@dataclass(frozen=True)
class TriMesh:
    """Indexed triangle mesh. Immutable after construction.

    ``canonical_coords`` is an optional per-vertex 3-vector in [0,1]^3,
    present only on body meshes (stored as vertex color in PLY files).
    """

    vertices: np.ndarray
    faces: np.ndarray
    canonical_coords: np.ndarray | None = field(default=None)

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64)).reshape(-1, 3)
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64)).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise MeshError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("degenerate face: repeated vertex index")
        if self.canonical_coords is not None:
            c = np.ascontiguousarray(np.asarray(self.canonical_coords, dtype=np.float64)).reshape(-1, 3)
            if len(c) != len(v):
                raise MeshError("canonical_coords length must match vertex count")
            if c.size and (c.min() < -1e-9 or c.max() > 1 + 1e-9):
                raise MeshError("canonical_coords components must lie in [0,1]")
            object.__setattr__(self, "canonical_coords", np.clip(c, 0.0, 1.0))
        v.setflags(write=False)
        f.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (e, 2) array with e[:,0] < e[:,1]."""
        if not self.faces.size:
            return np.zeros((0, 2), dtype=np.int64)
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        return TriMesh(vertices, self.faces, self.canonical_coords)


def aabb(mesh: TriMesh) -> Aabb:
    if mesh.n_vertices == 0:
        raise MeshError("aabb of empty mesh is undefined")
    return Aabb(mesh.vertices.min(axis=0), mesh.vertices.max(axis=0))


def face_areas(mesh: TriMesh) -> np.ndarray:
    v = mesh.vertices
    f = mesh.faces
    c = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    return 0.5 * np.linalg.norm(c, axis=1)


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted vertex normals, unit length.

    Vertices with a zero accumulated normal (isolated, or cancelling fans)
    fall back to a fixed unit vector and emit a warning.
    """
    if mesh.n_faces == 0:
        raise MeshError("vertex_normals requires at least one face")
    v = mesh.vertices
    f = mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])  # 2*area weighted
    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, f[:, k], fn)
    norms = np.linalg.norm(acc, axis=1)
    bad = norms < 1e-20
    if np.any(bad):
        logger.warning("vertex_normals: %d vertices with degenerate normal, using fallback", int(bad.sum()))
        acc[bad] = _FALLBACK_NORMAL
        norms[bad] = 1.0
    return acc / norms[:, None]


# ---------------------------------------------------------------------------
# manifold repair


def _edge_face_map(faces: np.ndarray) -> dict[tuple[int, int], list[int]]:
    em: dict[tuple[int, int], list[int]] = {}
    for fi, (a, b, c) in enumerate(faces):
        for u, w in ((a, b), (b, c), (c, a)):
            key = (u, w) if u < w else (w, u)
            em.setdefault(key, []).append(fi)
    return em


def _vertex_fan_components(faces: np.ndarray, n_vertices: int):
    """For each vertex, group incident faces into components connected via
    shared edges at that vertex. Returns list of lists of face-index lists."""
    incident: list[list[int]] = [[] for _ in range(n_vertices)]
    for fi, face in enumerate(faces):
        for vi in face:
            incident[vi].append(fi)
    em = _edge_face_map(faces)
    out = []
    for vi in range(n_vertices):
        fs = incident[vi]
        if not fs:
            out.append([])
            continue
        # union faces sharing an edge through vi
        parent = {fi: fi for fi in fs}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for fi in fs:
            a, b, c = faces[fi]
            others = [w for w in (a, b, c) if w != vi]
            for w in others:
                key = (vi, w) if vi < w else (w, vi)
                for fj in em[key]:
                    if fj != fi and fj in parent:
                        ra, rb = find(fi), find(fj)
                        if ra != rb:
                            parent[rb] = ra
        groups: dict[int, list[int]] = {}
        for fi in fs:
            groups.setdefault(find(fi), []).append(fi)
        out.append(list(groups.values()))
    return out


def is_manifold(mesh: TriMesh) -> bool:
    """True iff every edge borders <= 2 faces and every vertex fan is connected."""
    em = _edge_face_map(mesh.faces)
    if any(len(fl) > 2 for fl in em.values()):
        return False
    comps = _vertex_fan_components(mesh.faces, mesh.n_vertices)
    return all(len(c) <= 1 for c in comps)


def prune_unreferenced(mesh: TriMesh) -> TriMesh:
    if not mesh.faces.size:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    used = np.unique(mesh.faces)
    remap = -np.ones(mesh.n_vertices, dtype=np.int64)
    remap[used] = np.arange(len(used))
    cc = mesh.canonical_coords[used] if mesh.canonical_coords is not None else None
    return TriMesh(mesh.vertices[used], remap[mesh.faces], cc)


def remove_nonmanifold(mesh: TriMesh) -> TriMesh:
    """Repair to a manifold mesh.

    Edges bordering more than two faces lose the excess faces (the two
    lowest-index faces are kept). Vertices whose incident-face fan splits
    into several components are duplicated, one copy per component, so no
    further faces are lost. Unreferenced vertices are pruned.
    """
    faces = mesh.faces.copy()
    vertices = mesh.vertices
    cc = mesh.canonical_coords

    # iteratively drop faces on over-shared edges
    while True:
        em = _edge_face_map(faces)
        drop = set()
        for fl in em.values():
            if len(fl) > 2:
                drop.update(fl[2:])
        if not drop:
            break
        keep = np.array([i for i in range(len(faces)) if i not in drop], dtype=np.int64)
        faces = faces[keep]

    # split vertices with disconnected fans (bowties)
    comps = _vertex_fan_components(faces, len(vertices))
    new_verts = [vertices]
    new_cc = [cc] if cc is not None else None
    next_idx = len(vertices)
    faces = faces.copy()
    for vi, groups in enumerate(comps):
        for group in groups[1:]:
            for fi in group:
                faces[fi][faces[fi] == vi] = next_idx
            new_verts.append(vertices[vi : vi + 1])
            if new_cc is not None:
                new_cc.append(cc[vi : vi + 1])
            next_idx += 1
    vertices = np.concatenate(new_verts)
    if new_cc is not None:
        cc = np.concatenate(new_cc)
    return prune_unreferenced(TriMesh(vertices, faces, cc))


# ---------------------------------------------------------------------------
# file I/O


def load_mesh(path) -> TriMesh:
    path = Path(path)
    if not path.exists():
        raise MeshError(f"no such file: {path}")
    ext = path.suffix.lower()
    if ext == ".obj":
        return _load_obj(path)
    if ext == ".ply":
        return _load_ply(path)
    raise MeshError(f"unsupported mesh format: {ext}")


def save_mesh(mesh: TriMesh, path) -> None:
    path = Path(path)
    ext = path.suffix.lower()
    try:
        if ext == ".obj":
            _save_obj(mesh, path)
        elif ext == ".ply":
            _save_ply(mesh, path)
        else:
            raise MeshError(f"unsupported mesh format: {ext}")
    except OSError as exc:
        raise MeshError(f"cannot write {path}: {exc}") from exc


def _load_obj(path: Path) -> TriMesh:
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshError(f"{path}:{lineno}: malformed vertex line")
                verts.append([float(x) for x in parts[1:4]])
            elif tag == "f":
                if len(parts) < 4:
                    raise MeshError(f"{path}:{lineno}: malformed face line")
                idx = []
                for tok in parts[1:]:
                    s = tok.split("/")[0]
                    i = int(s)
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                # fan-triangulate polygons
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
            # vt/vn/usemtl/mtllib deliberately ignored
    fa = np.array(faces, dtype=np.int64).reshape(-1, 3)
    va = np.array(verts, dtype=np.float64).reshape(-1, 3)
    if fa.size and (fa.min() < 0 or fa.max() >= len(va)):
        raise MeshError(f"{path}: face index out of range")
    return TriMesh(va, fa)


def _save_obj(mesh: TriMesh, path: Path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0]+1} {f[1]+1} {f[2]+1}\n")


_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _load_ply(path: Path) -> TriMesh:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[data.find(b"\n", end) + 1 :]

    fmt = None
    elements = []  # (name, count, [(prop_name, type, list_count_type|None)])
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1][2].append((parts[4], parts[3], parts[2]))
            else:
                elements[-1][2].append((parts[2], parts[1], None))
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshError(f"{path}: unsupported PLY format {fmt}")

    verts = faces = None
    colors = None
    if fmt == "ascii":
        tokens = body.decode("ascii", errors="replace").split()
        pos = 0
        for name, count, props in elements:
            if name == "vertex":
                ncols = len(props)
                arr = np.array(tokens[pos : pos + count * ncols], dtype=np.float64).reshape(count, ncols)
                pos += count * ncols
                names = [p[0] for p in props]
                verts = arr[:, [names.index("x"), names.index("y"), names.index("z")]]
                if "red" in names:
                    colors = arr[:, [names.index("red"), names.index("green"), names.index("blue")]]
            elif name == "face":
                rows = []
                for _ in range(count):
                    n = int(tokens[pos]); pos += 1
                    rows.append([int(t) for t in tokens[pos : pos + n]])
                    pos += n
                faces = _triangulate_rows(rows)
            else:
                for _ in range(count):  # skip unknown elements conservatively
                    if any(p[2] for p in props):
                        raise MeshError(f"{path}: cannot skip list element {name}")
                    pos += len(props)
    else:
        off = 0
        for name, count, props in elements:
            if name == "vertex":
                fmtstr = "<" + "".join(_PLY_TYPES[p[1]] for p in props)
                sz = struct.calcsize(fmtstr)
                arr = np.array(
                    [struct.unpack_from(fmtstr, body, off + i * sz) for i in range(count)],
                    dtype=np.float64,
                ).reshape(count, len(props))
                off += count * sz
                names = [p[0] for p in props]
                verts = arr[:, [names.index("x"), names.index("y"), names.index("z")]]
                if "red" in names:
                    colors = arr[:, [names.index("red"), names.index("green"), names.index("blue")]]
            elif name == "face":
                rows = []
                cnt_t = _PLY_TYPES[props[0][2]]
                idx_t = _PLY_TYPES[props[0][1]]
                cnt_sz = struct.calcsize(cnt_t)
                idx_sz = struct.calcsize(idx_t)
                for _ in range(count):
                    (n,) = struct.unpack_from("<" + cnt_t, body, off)
                    off += cnt_sz
                    row = struct.unpack_from("<" + idx_t * n, body, off)
                    off += idx_sz * n
                    rows.append(list(row))
                faces = _triangulate_rows(rows)
            else:
                fmtstr = "<" + "".join(_PLY_TYPES[p[1]] for p in props if p[2] is None)
                off += count * struct.calcsize(fmtstr)

    if verts is None:
        raise MeshError(f"{path}: PLY missing vertex element")
    if faces is None:
        faces = np.zeros((0, 3), dtype=np.int64)
    cc = colors / 255.0 if colors is not None else None
    return TriMesh(verts, faces, cc)


def _triangulate_rows(rows) -> np.ndarray:
    faces = []
    for row in rows:
        for k in range(1, len(row) - 1):
            faces.append([row[0], row[k], row[k + 1]])
    return np.array(faces, dtype=np.int64).reshape(-1, 3)


def _save_ply(mesh: TriMesh, path: Path) -> None:
    has_color = mesh.canonical_coords is not None
    lines = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {mesh.n_vertices}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if has_color:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines += [
        f"element face {mesh.n_faces}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        if has_color:
            col = np.rint(mesh.canonical_coords * 255.0).astype(np.uint8)
            for v, c in zip(mesh.vertices, col):
                fh.write(struct.pack("<dddBBB", v[0], v[1], v[2], c[0], c[1], c[2]))
        else:
            fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
        f32 = mesh.faces.astype("<i4")
        counts = np.full((mesh.n_faces, 1), 3, dtype=np.uint8)
        buf = bytearray()
        for i in range(mesh.n_faces):
            buf += counts[i].tobytes() + f32[i].tobytes()
        fh.write(bytes(buf))
