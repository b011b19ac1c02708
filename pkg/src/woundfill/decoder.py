"""Linear morphable-model geometry decoder.

Vertices are produced as ``basis @ code + mean_shape`` reshaped to ``(N, 3)``.
The basis is synthetic: a deformed sphere as the average head and smooth
polynomial displacement fields, concentrated on the face side (+z), as the
principal components.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations_with_replacement
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull

MBAS_MAGIC = b"MBAS"
MBAS_VERSION = 1

# vertex counts of icosphere subdivisions 0..5
ICOSPHERE_COUNTS = {10 * 4**k + 2: k for k in range(6)}


class DimensionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MorphableBasis:
    mean_shape: np.ndarray  # (3N,)
    basis: np.ndarray  # (3N, d)
    faces: np.ndarray = field(default=None, repr=False)  # (F, 3), template topology

    def __post_init__(self):
        mean = np.asarray(self.mean_shape, dtype=np.float64).reshape(-1)
        basis = np.asarray(self.basis, dtype=np.float64)
        if basis.ndim != 2:
            raise DimensionError(f"basis must be 2-D, got shape {basis.shape}")
        if mean.size % 3:
            raise DimensionError("mean_shape length must be a multiple of 3")
        if basis.shape[0] != mean.size:
            raise DimensionError(
                f"basis has {basis.shape[0]} rows but mean_shape has {mean.size} entries"
            )
        n = mean.size // 3
        if n < 4:
            raise DimensionError(f"need at least 4 vertices, got {n}")
        if basis.shape[1] < 1:
            raise DimensionError("latent_dim must be >= 1")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(basis))):
            raise ValueError("basis contains non-finite entries")
        faces = self.faces
        if faces is None:
            faces = sphere_template(n)[1]
        mean.setflags(write=False)
        basis.setflags(write=False)
        object.__setattr__(self, "mean_shape", mean)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "faces", np.asarray(faces, dtype=np.int64))

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.size // 3

    @property
    def latent_dim(self) -> int:
        return self.basis.shape[1]

    def to_bytes(self) -> bytes:
        header = MBAS_MAGIC + struct.pack("<III", MBAS_VERSION, self.n_vertices, self.latent_dim)
        return (
            header
            + self.mean_shape.astype("<f8").tobytes()
            + np.ascontiguousarray(self.basis).astype("<f8").tobytes()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "MorphableBasis":
        if data[:4] != MBAS_MAGIC:
            raise ValueError("not a basis file (bad magic)")
        version, n, d = struct.unpack_from("<III", data, 4)
        if version != MBAS_VERSION:
            raise ValueError(f"unsupported basis file version {version}")
        off = 16
        expected = off + 8 * (3 * n + 3 * n * d)
        if len(data) != expected:
            raise ValueError(f"basis file has {len(data)} bytes, expected {expected}")
        mean = np.frombuffer(data, "<f8", 3 * n, off)
        basis = np.frombuffer(data, "<f8", 3 * n * d, off + 24 * n).reshape(3 * n, d)
        return cls(mean.astype(np.float64), basis.astype(np.float64))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "MorphableBasis":
        return cls.from_bytes(Path(path).read_bytes())


def as_code(code, latent_dim: int | None = None) -> np.ndarray:
    z = np.asarray(code, dtype=np.float64).reshape(-1)
    if latent_dim is not None and z.size != latent_dim:
        raise DimensionError(f"code has length {z.size}, basis expects {latent_dim}")
    if not np.all(np.isfinite(z)):
        raise ValueError("code contains non-finite entries")
    return z


def decode(basis: MorphableBasis, code) -> np.ndarray:
    """Map a latent code to an ``(N, 3)`` vertex array.

    A batch of codes ``(M, d)`` maps to ``(M, N, 3)``.
    """
    z = np.asarray(code, dtype=np.float64)
    if z.ndim == 2:
        if z.shape[1] != basis.latent_dim:
            raise DimensionError(
                f"codes have length {z.shape[1]}, basis expects {basis.latent_dim}"
            )
        flat = z @ basis.basis.T + basis.mean_shape
        return flat.reshape(z.shape[0], basis.n_vertices, 3)
    z = as_code(z, basis.latent_dim)
    return (basis.basis @ z + basis.mean_shape).reshape(basis.n_vertices, 3)


def _icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    t = (1.0 + 5.0**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts), np.array(faces, dtype=np.int64)


def _fibonacci_sphere(n: int) -> tuple[np.ndarray, np.ndarray]:
    i = np.arange(n, dtype=np.float64) + 0.5
    y = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - y * y)
    phi = np.pi * (3.0 - 5.0**0.5) * i
    pts = np.column_stack([r * np.cos(phi), y, r * np.sin(phi)])
    faces = ConvexHull(pts).simplices.astype(np.int64)
    # orient outward
    a, b, c = pts[faces[:, 0]], pts[faces[:, 1]], pts[faces[:, 2]]
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return pts, faces


@lru_cache(maxsize=16)
def _sphere_template_cached(n: int) -> tuple[np.ndarray, np.ndarray]:
    if n in ICOSPHERE_COUNTS:
        pts, faces = _icosphere(ICOSPHERE_COUNTS[n])
    else:
        pts, faces = _fibonacci_sphere(n)
    pts.setflags(write=False)
    faces.setflags(write=False)
    return pts, faces


def sphere_template(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit-sphere directions and an outward-oriented closed triangulation with n vertices.

    Icosphere counts (12, 42, 162, 642, ...) use subdivision; anything else a
    Fibonacci lattice triangulated by its convex hull.
    """
    if n < 4:
        raise DimensionError(f"need at least 4 vertices, got {n}")
    return _sphere_template_cached(int(n))


def base_head(directions: np.ndarray) -> np.ndarray:
    """Average head: an ellipsoid with a nose ridge and brow on the +z side."""
    x, y, z = directions.T
    nose = 0.22 * np.exp(-((x / 0.18) ** 2 + ((y + 0.05) / 0.35) ** 2)) * np.clip(z, 0, None) ** 4
    brow = 0.06 * np.exp(-(((y - 0.3) / 0.12) ** 2)) * np.clip(z, 0, None) ** 2
    radius = 1.0 + nose + brow
    return directions * radius[:, None] * np.array([0.82, 1.0, 0.9])


def _poly_degree_for(latent_dim: int) -> int:
    # polynomials of degree <= D restricted to the sphere span (D + 1)**2 functions
    degree = 2
    while 3 * ((degree + 1) ** 2 - 1) < latent_dim:
        degree += 1
    return degree


def synth_basis(
    seed: int,
    n_vertices: int = 642,
    latent_dim: int = 16,
    amplitude: float = 4.0,
    decay: float = 1.0,
) -> MorphableBasis:
    """Seeded stand-in for a learned face model.

    Column ``j`` is a smooth displacement field with norm
    ``amplitude / (1 + j) ** decay``, so leading components dominate like a
    PCA spectrum. Columns are mutually orthogonal.
    """
    if n_vertices < 4:
        raise DimensionError(f"need at least 4 vertices, got {n_vertices}")
    if latent_dim < 1:
        raise DimensionError("latent_dim must be >= 1")
    if not amplitude > 0:
        raise ValueError(f"amplitude must be positive, got {amplitude}")
    dirs, faces = sphere_template(n_vertices)
    mean = base_head(dirs)

    degree = _poly_degree_for(latent_dim)
    monos = [
        np.prod(dirs[:, list(idx)], axis=1) if idx else np.ones(len(dirs))
        for k in range(1, degree + 1)
        for idx in combinations_with_replacement(range(3), k)
    ]
    monos = np.column_stack(monos)  # (N, M)
    front = (0.5 * (1.0 + dirs[:, 2])) ** 2
    rng = np.random.default_rng(seed)
    n_feat = monos.shape[1]
    # each column: per-axis random polynomial, weighted toward the face side
    fields = np.empty((3 * n_vertices, latent_dim))
    for j in range(latent_dim):
        coef = rng.standard_normal((n_feat, 3)) / np.sqrt(np.arange(1, n_feat + 1))[:, None]
        disp = (monos @ coef) * front[:, None]
        disp[:, 2] *= 1.5
        fields[:, j] = disp.reshape(-1)
    q, r = np.linalg.qr(fields)
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    if np.linalg.matrix_rank(fields) < latent_dim:
        raise DimensionError("could not generate enough independent displacement fields")
    scale = amplitude / (1.0 + np.arange(latent_dim)) ** decay
    return MorphableBasis(mean.reshape(-1), q * scale, faces)
