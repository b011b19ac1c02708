"""Indexed triangle meshes: topology checks, repair, comparison and file IO."""

from __future__ import annotations

import logging
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)


class MeshError(ValueError):
    pass


class TopologyMismatch(MeshError):
    pass


class NonSimpleBoundary(MeshError):
    pass


class NotWatertight(MeshError):
    pass


class ObjFormatError(MeshError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise MeshError(f"face index out of range for {len(v)} vertices")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("degenerate face repeats a vertex")
            canon = _rotate_min_first(f)
            if len(np.unique(canon, axis=0)) != len(f):
                raise MeshError("duplicate face")
        labels = self.labels
        if labels is not None:
            labels = np.array(labels).reshape(-1)
            if len(labels) != len(v):
                raise MeshError("labels must have one entry per vertex")
            labels.setflags(write=False)
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "labels", labels)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "TriangleMesh":
        return TriangleMesh(vertices, self.faces, self.labels)

    def with_labels(self, labels) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.faces, labels)


def _rotate_min_first(f: np.ndarray) -> np.ndarray:
    shift = np.argmin(f, axis=1)
    idx = (shift[:, None] + np.arange(3)) % 3
    return np.take_along_axis(f, idx, axis=1)


def edges_of(faces: np.ndarray) -> np.ndarray:
    """Directed half-edges (F*3, 2) in face order."""
    faces = np.asarray(faces)
    return np.stack([faces, np.roll(faces, -1, axis=1)], axis=2).reshape(-1, 2)


def unique_edges(faces: np.ndarray) -> np.ndarray:
    he = edges_of(faces)
    return np.unique(np.sort(he, axis=1), axis=0)


def euler_characteristic(mesh: TriangleMesh) -> int:
    return mesh.n_vertices - len(unique_edges(mesh.faces)) + mesh.n_faces


def vertex_adjacency(n_vertices: int, faces: np.ndarray) -> list[np.ndarray]:
    nbrs: list[set] = [set() for _ in range(n_vertices)]
    for a, b in edges_of(faces):
        nbrs[a].add(int(b))
        nbrs[b].add(int(a))
    return [np.array(sorted(s), dtype=np.int64) for s in nbrs]


def vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    v, f = mesh.vertices, mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    n = np.zeros_like(v)
    for k in range(3):
        np.add.at(n, f[:, k], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def compact(mesh: TriangleMesh) -> tuple[TriangleMesh, np.ndarray]:
    """Drop unreferenced vertices. Returns the mesh and the kept original indices."""
    used = np.unique(mesh.faces)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    labels = None if mesh.labels is None else mesh.labels[used]
    return TriangleMesh(mesh.vertices[used], remap[mesh.faces], labels), used


@dataclass
class WatertightReport:
    boundary_edges: list[tuple[int, int]] = field(default_factory=list)
    nonmanifold_edges: list[tuple[int, int]] = field(default_factory=list)
    inconsistent_edges: list[tuple[int, int]] = field(default_factory=list)
    empty: bool = False

    @property
    def ok(self) -> bool:
        return not (
            self.empty or self.boundary_edges or self.nonmanifold_edges or self.inconsistent_edges
        )

    def __bool__(self) -> bool:
        return self.ok


def is_watertight(mesh: TriangleMesh) -> tuple[bool, WatertightReport]:
    """Closed, consistently oriented 2-manifold check, edge by edge.

    Several closed components are allowed. A mesh without faces is not watertight.
    """
    report = WatertightReport()
    if mesh.n_faces == 0:
        report.empty = True
        return False, report
    directed: dict[tuple[int, int], int] = defaultdict(int)
    undirected: dict[tuple[int, int], int] = defaultdict(int)
    for a, b in edges_of(mesh.faces).tolist():
        directed[(a, b)] += 1
        undirected[(min(a, b), max(a, b))] += 1
    for (a, b), count in sorted(undirected.items()):
        if count == 1:
            report.boundary_edges.append((a, b))
        elif count > 2:
            report.nonmanifold_edges.append((a, b))
        elif directed.get((a, b), 0) != 1 or directed.get((b, a), 0) != 1:
            report.inconsistent_edges.append((a, b))
    return report.ok, report


def face_components(mesh: TriangleMesh) -> np.ndarray:
    """Connected-component label per face (faces sharing a vertex are connected)."""
    nf, nv = mesh.n_faces, mesh.n_vertices
    rows = np.repeat(np.arange(nf), 3)
    cols = nf + mesh.faces.reshape(-1)
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(nf + nv, nf + nv))
    _, labels = connected_components(graph, directed=False)
    return labels[:nf]


def remove_detached_components(mesh: TriangleMesh) -> TriangleMesh:
    """Keep only the component with the most faces.

    Ties go to the component holding the lowest vertex index.
    """
    if mesh.n_faces == 0:
        raise MeshError("cannot select a component of an empty mesh")
    comp = face_components(mesh)
    best = None
    for c in np.unique(comp):
        sel = comp == c
        key = (-int(sel.sum()), int(mesh.faces[sel].min()))
        if best is None or key < best[0]:
            best = (key, c)
    kept = TriangleMesh(mesh.vertices, mesh.faces[comp == best[1]], mesh.labels)
    return compact(kept)[0]


def boundary_loops(mesh: TriangleMesh) -> list[list[int]]:
    """Boundary loops as vertex lists, ordered along each face's own winding.

    Raises NonSimpleBoundary on edges with more than two faces or on vertices
    where several boundary loops meet.
    """
    undirected: dict[tuple[int, int], int] = defaultdict(int)
    half = edges_of(mesh.faces).tolist()
    for a, b in half:
        undirected[(min(a, b), max(a, b))] += 1
    bad = [e for e, c in undirected.items() if c > 2]
    if bad:
        raise NonSimpleBoundary(f"edges shared by more than two faces: {sorted(bad)[:10]}")
    nxt: dict[int, int] = {}
    for a, b in half:
        if undirected[(min(a, b), max(a, b))] == 1:
            if a in nxt:
                raise NonSimpleBoundary(f"boundary pinches at vertex {a}")
            nxt[a] = b
    loops = []
    seen: set[int] = set()
    for start in sorted(nxt):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        cur = nxt[start]
        while cur != start:
            if cur in seen or cur not in nxt:
                raise NonSimpleBoundary(f"boundary is not a simple loop near vertex {cur}")
            loop.append(cur)
            seen.add(cur)
            cur = nxt[cur]
        loops.append(loop)
    return loops


def fill_holes(mesh: TriangleMesh, label: int | None = None) -> TriangleMesh:
    """Close every boundary loop with a centroid vertex and a triangle fan.

    Existing faces and vertices are kept as they are; new vertices are appended.
    ``label`` tags the new vertices when the mesh carries labels.
    """
    loops = boundary_loops(mesh)
    if not loops:
        return mesh
    verts = [mesh.vertices]
    faces = [mesh.faces]
    n = mesh.n_vertices
    for loop in loops:
        centroid = mesh.vertices[loop].mean(axis=0)
        verts.append(centroid[None, :])
        ring = np.array(loop)
        # boundary runs a->b in the existing face, so the fan must run b->a
        fan = np.column_stack([np.roll(ring, -1), ring, np.full(len(ring), n)])
        faces.append(fan)
        n += 1
    labels = None
    if mesh.labels is not None:
        fill = 0 if label is None else label
        labels = np.concatenate([mesh.labels, np.full(len(loops), fill, dtype=mesh.labels.dtype)])
    return TriangleMesh(np.vstack(verts), np.vstack(faces), labels)


def repair(mesh: TriangleMesh) -> TriangleMesh:
    """Eyeball removal followed by hole filling."""
    return fill_holes(remove_detached_components(mesh))


def _check_same_topology(a: TriangleMesh, b: TriangleMesh) -> None:
    if a.n_vertices != b.n_vertices:
        raise TopologyMismatch(f"vertex counts differ: {a.n_vertices} vs {b.n_vertices}")
    if a.faces.shape != b.faces.shape or not np.array_equal(a.faces, b.faces):
        raise TopologyMismatch("face lists differ")


def per_vertex_deviation(a: TriangleMesh, b: TriangleMesh) -> np.ndarray:
    _check_same_topology(a, b)
    return np.linalg.norm(a.vertices - b.vertices, axis=1)


def mean_geometric_distance(a: TriangleMesh, b: TriangleMesh) -> float:
    """Mean Euclidean distance between corresponding vertices."""
    _check_same_topology(a, b)
    d = a.vertices - b.vertices
    return float(np.mean(np.sqrt(np.sum(d * d, axis=1))))


def dilate(vertex_set: np.ndarray, adjacency: list[np.ndarray], rings: int = 1) -> np.ndarray:
    current = set(int(i) for i in vertex_set)
    frontier = set(current)
    for _ in range(rings):
        grown = set()
        for i in frontier:
            grown.update(adjacency[i].tolist())
        frontier = grown - current
        current |= grown
    return np.array(sorted(current), dtype=np.int64)


@dataclass
class FillingResult:
    filling: TriangleMesh
    labels: np.ndarray  # 1 on wound vertices of the reconstruction
    wound_vertices: np.ndarray
    threshold: float
    status: str  # "ok" or "empty"


def default_threshold(deviation: np.ndarray, scale: float) -> float:
    """Twice the median deviation, floored at a tiny fraction of the mesh size."""
    return max(2.0 * float(np.median(deviation)), 1e-9 * scale)


def extract_filling(
    damaged: TriangleMesh, reconstructed: TriangleMesh, threshold: float | None = None
) -> FillingResult:
    """Cut the wound-covering patch out of the reconstruction and close it.

    Wound vertices are those deviating by more than ``threshold``, grown by one
    ring. The patch is the set of reconstructed faces whose three corners are all
    wound vertices, capped with fan fills.
    """
    dev = per_vertex_deviation(damaged, reconstructed)
    if threshold is None:
        extent = np.ptp(reconstructed.vertices, axis=0)
        threshold = default_threshold(dev, float(np.linalg.norm(extent)))
    elif not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    seeds = np.flatnonzero(dev > threshold)
    labels = np.zeros(reconstructed.n_vertices, dtype=np.int64)
    if len(seeds) == 0:
        log.warning("no vertex deviates by more than %.6f; filling is empty", threshold)
        empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        return FillingResult(empty, labels, seeds, float(threshold), "empty")
    adjacency = vertex_adjacency(reconstructed.n_vertices, reconstructed.faces)
    wound = dilate(seeds, adjacency, 1)
    labels[wound] = 1
    inside = labels[reconstructed.faces].all(axis=1)
    patch = TriangleMesh(reconstructed.vertices, reconstructed.faces[inside])
    patch = compact(patch)[0]
    filling = fill_holes(patch)
    return FillingResult(filling, labels, wound, float(threshold), "ok")


# --- file formats -----------------------------------------------------------


def write_obj(mesh: TriangleMesh, path, colors: np.ndarray | None = None) -> None:
    """ASCII OBJ with 1-based faces. ``colors`` (V, 3) in [0, 1] adds ``v x y z r g b``."""
    lines = []
    if colors is None:
        for x, y, z in mesh.vertices.tolist():
            lines.append(f"v {x!r} {y!r} {z!r}")
    else:
        for (x, y, z), (r, g, b) in zip(mesh.vertices.tolist(), np.asarray(colors).tolist()):
            lines.append(f"v {x!r} {y!r} {z!r} {r:.6f} {g:.6f} {b:.6f}")
    for a, b, c in (mesh.faces + 1).tolist():
        lines.append(f"f {a} {b} {c}")
    Path(path).write_text("\n".join(lines) + "\n")


export_obj = write_obj


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tag, *rest = line.split()
            if tag == "v":
                if len(rest) not in (3, 4, 6, 7):
                    raise ObjFormatError(lineno, f"vertex needs 3 coordinates, got {len(rest)}")
                try:
                    verts.append([float(t) for t in rest[:3]])
                except ValueError:
                    raise ObjFormatError(lineno, "non-numeric vertex coordinate") from None
            elif tag == "f":
                if len(rest) < 3:
                    raise ObjFormatError(lineno, "face needs at least 3 vertices")
                try:
                    idx = [int(t.split("/")[0]) for t in rest]
                except ValueError:
                    raise ObjFormatError(lineno, "non-integer face index") from None
                if any(i == 0 for i in idx):
                    raise ObjFormatError(lineno, "face index 0; OBJ uses 1-based indices")
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                if any(i < 0 or i >= len(verts) for i in idx):
                    raise ObjFormatError(lineno, "face index refers to an undefined vertex")
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
            elif tag in ("vn", "vt", "o", "g", "s", "usemtl", "mtllib", "l"):
                continue
            else:
                raise ObjFormatError(lineno, f"unknown statement {tag!r}")
    try:
        return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces).reshape(-1, 3))
    except MeshError as exc:
        raise ObjFormatError(0, str(exc)) from None


import_obj = read_obj

STL_TRIANGLE = np.dtype(
    [("normal", "<f4", (3,)), ("v", "<f4", (3, 3)), ("attr", "<u2")]
)
assert STL_TRIANGLE.itemsize == 50


def write_stl(mesh: TriangleMesh, path, force: bool = False, header: bytes = b"woundfill") -> None:
    """Binary STL. Refuses non-watertight meshes unless ``force``."""
    if not force:
        ok, report = is_watertight(mesh)
        if not ok:
            raise NotWatertight(
                f"mesh is not watertight ({len(report.boundary_edges)} boundary, "
                f"{len(report.nonmanifold_edges)} non-manifold, "
                f"{len(report.inconsistent_edges)} inconsistent edges); use force to export anyway"
            )
    tri = mesh.vertices[mesh.faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)
    rec = np.zeros(mesh.n_faces, dtype=STL_TRIANGLE)
    rec["normal"] = n
    rec["v"] = tri
    with open(path, "wb") as fh:
        fh.write(header[:80].ljust(80, b"\0"))
        fh.write(struct.pack("<I", mesh.n_faces))
        fh.write(rec.tobytes())


export_stl = write_stl


def read_stl(path) -> TriangleMesh:
    """Binary STL reader; coincident corners are merged into shared vertices."""
    data = Path(path).read_bytes()
    (count,) = struct.unpack_from("<I", data, 80)
    if len(data) != 84 + 50 * count:
        raise MeshError(f"STL size {len(data)} does not match {count} triangles")
    rec = np.frombuffer(data, STL_TRIANGLE, count, 84)
    corners = rec["v"].reshape(-1, 3).astype(np.float64)
    verts, inv = np.unique(corners, axis=0, return_inverse=True)
    return TriangleMesh(verts, inv.reshape(-1, 3))


def heat_colors(values: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Black-red-yellow-white ramp; brighter means larger."""
    values = np.asarray(values, dtype=np.float64)
    top = float(values.max()) if vmax is None else vmax
    t = np.clip(values / top, 0.0, 1.0) if top > 0 else np.zeros_like(values)
    r = np.clip(3 * t, 0, 1)
    g = np.clip(3 * t - 1, 0, 1)
    b = np.clip(3 * t - 2, 0, 1)
    return np.column_stack([r, g, b])


LABEL_COLORS = np.array([[0.8, 0.8, 0.8], [0.9, 0.2, 0.1]])


def write_deviation_csv(deviation: np.ndarray, path) -> None:
    rows = ["vertex_index,deviation"]
    rows += [f"{i},{d:.6f}" for i, d in enumerate(np.asarray(deviation).tolist())]
    Path(path).write_text("\n".join(rows) + "\n")
