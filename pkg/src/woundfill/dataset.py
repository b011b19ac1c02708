"""Synthetic wounded-face corpus: identities, crater wounds and shaded renders."""

from __future__ import annotations

import json
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .decoder import MorphableBasis, decode
from .mesh import TriangleMesh, read_obj, vertex_adjacency, vertex_normals, write_obj
from .training import split_dataset


@dataclass(frozen=True)
class CorpusConfig:
    n_identities: int = 200
    lights_per_sample: int = 3
    resolution: int = 64
    wound_depth: float = 0.18
    wound_rings: tuple[int, int] = (2, 5)
    light_cone_deg: float = 40.0
    view_extent: float = 1.25  # half-width of the orthographic window, model units

    def __post_init__(self):
        if self.n_identities < 5:
            raise ValueError("need at least 5 identities for a 6:2:2 split")
        if self.lights_per_sample < 1:
            raise ValueError("lights_per_sample must be >= 1")
        if self.resolution < 8:
            raise ValueError("resolution must be >= 8")
        lo, hi = self.wound_rings
        if not 0 <= lo <= hi:
            raise ValueError("wound_rings must satisfy 0 <= lo <= hi")


@dataclass
class SyntheticSample:
    identity_id: int
    hidden_code: np.ndarray
    gt_mesh: TriangleMesh
    damaged_mesh: TriangleMesh
    wound_vertex_set: np.ndarray
    lights: np.ndarray  # (L, 3)
    renders: list[np.ndarray] = field(default_factory=list)


@dataclass
class Corpus:
    samples: list[SyntheticSample]
    split: dict[int, str]
    config: CorpusConfig
    seed: int

    def subset(self, part: str) -> list[SyntheticSample]:
        return [s for s in self.samples if self.split[s.identity_id] == part]

    def pairs(self, part: str | None = None) -> list[tuple[np.ndarray, SyntheticSample]]:
        """(image, sample) training pairs, one per render."""
        chosen = self.samples if part is None else self.subset(part)
        return [(img, s) for s in chosen for img in s.renders]


def identity_rng(seed: int, identity: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(identity, stream)))


def synth_identity(basis: MorphableBasis, seed) -> tuple[np.ndarray, TriangleMesh]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    code = rng.uniform(-1.0, 1.0, basis.latent_dim)
    return code, TriangleMesh(decode(basis, code), basis.faces)


def vertex_rings(adjacency: list[np.ndarray], center: int, radius: int) -> dict[int, int]:
    """Breadth-first ring index of every vertex within ``radius`` hops of ``center``."""
    ring = {center: 0}
    queue = deque([center])
    while queue:
        v = queue.popleft()
        if ring[v] == radius:
            continue
        for w in adjacency[v].tolist():
            if w not in ring:
                ring[w] = ring[v] + 1
                queue.append(w)
    return ring


def apply_wound(
    gt_mesh: TriangleMesh,
    seed,
    depth: float = 0.18,
    rings: tuple[int, int] = (2, 5),
    min_facing: float = 0.4,
) -> tuple[TriangleMesh, np.ndarray]:
    """Push a crater into the surface around a random face-side vertex.

    Ring ``r`` of a radius-``R`` crater moves inward by
    ``depth * (1 - (r / (R + 1))**2)**2``; the center moves by exactly ``depth``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    normals = vertex_normals(gt_mesh)
    candidates = np.flatnonzero(normals[:, 2] > min_facing)
    if len(candidates) == 0:
        candidates = np.arange(gt_mesh.n_vertices)
    center = int(rng.choice(candidates))
    radius = int(rng.integers(rings[0], rings[1] + 1))
    adjacency = vertex_adjacency(gt_mesh.n_vertices, gt_mesh.faces)
    ring = vertex_rings(adjacency, center, radius)
    wound = np.array(sorted(ring), dtype=np.int64)
    r = np.array([ring[i] for i in wound], dtype=np.float64)
    profile = depth * (1.0 - (r / (radius + 1)) ** 2) ** 2
    verts = gt_mesh.vertices.copy()
    verts[wound] -= profile[:, None] * normals[wound]
    return TriangleMesh(verts, gt_mesh.faces), wound


def light_directions(rng: np.random.Generator, count: int, cone_deg: float) -> np.ndarray:
    """Unit light directions inside a cone around the viewing axis (+z)."""
    cos_max = np.cos(np.radians(cone_deg))
    cz = rng.uniform(cos_max, 1.0, count)
    phi = rng.uniform(0.0, 2 * np.pi, count)
    s = np.sqrt(1.0 - cz**2)
    return np.column_stack([s * np.cos(phi), s * np.sin(phi), cz])


def render(
    mesh: TriangleMesh, light_dir, resolution: int = 64, extent: float = 1.25
) -> np.ndarray:
    """Orthographic frontal render (camera on +z) with flat Lambertian shading.

    Pixel (row, col) covers x from -extent..extent left to right and y from
    extent..-extent top to bottom. Background is 0.
    """
    light = np.asarray(light_dir, dtype=np.float64)
    if abs(np.linalg.norm(light) - 1.0) > 1e-9:
        raise ValueError("light direction must be a unit vector")
    v, f = mesh.vertices, mesh.faces
    tri = v[f]
    e1, e2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    fn = np.cross(e1, e2)
    area2 = fn[:, 2]  # twice the signed projected area
    if not np.any(np.abs(area2) > 1e-15):
        raise ValueError("degenerate projection: every face has zero projected area")
    norm = np.linalg.norm(fn, axis=1)
    shade = np.clip((fn @ light) / np.where(norm > 0, norm, 1.0), 0.0, 1.0)

    res = resolution
    scale = res / (2.0 * extent)
    px = (tri[:, :, 0] + extent) * scale - 0.5  # column coordinate of each corner
    py = (extent - tri[:, :, 1]) * scale - 0.5  # row coordinate
    image = np.zeros((res, res))
    depth = np.full((res, res), -np.inf)
    for k in np.flatnonzero(area2 > 1e-15):
        x0, x1 = int(np.ceil(px[k].min())), int(np.floor(px[k].max()))
        y0, y1 = int(np.ceil(py[k].min())), int(np.floor(py[k].max()))
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, res - 1), min(y1, res - 1)
        if x0 > x1 or y0 > y1:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        (ax, bx, cx), (ay, by, cy) = px[k], py[k]
        den = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
        w0 = ((by - cy) * (gx - cx) + (cx - bx) * (gy - cy)) / den
        w1 = ((cy - ay) * (gx - cx) + (ax - cx) * (gy - cy)) / den
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        z = w0 * tri[k, 0, 2] + w1 * tri[k, 1, 2] + w2 * tri[k, 2, 2]
        rows, cols = gy[inside], gx[inside]
        zi = z[inside]
        closer = zi > depth[rows, cols]
        rows, cols = rows[closer], cols[closer]
        depth[rows, cols] = zi[closer]
        image[rows, cols] = shade[k]
    return image


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def make_sample(
    basis: MorphableBasis, identity: int, seed: int, config: CorpusConfig, wounded: bool = True
) -> SyntheticSample:
    code, gt = synth_identity(basis, identity_rng(seed, identity, 0))
    if wounded:
        damaged, wound = apply_wound(
            gt, identity_rng(seed, identity, 1), config.wound_depth, config.wound_rings
        )
    else:
        damaged, wound = gt, np.zeros(0, dtype=np.int64)
    lights = light_directions(
        identity_rng(seed, identity, 2), config.lights_per_sample, config.light_cone_deg
    )
    # stored at 8 bits so an in-memory corpus equals one read back from disk
    renders = [
        quantize(render(damaged, l, config.resolution, config.view_extent)) for l in lights
    ]
    return SyntheticSample(identity, code, gt, damaged, wound, lights, renders)


def _make_sample_star(args):
    return make_sample(*args)


def build_corpus(
    basis: MorphableBasis,
    n_identities: int | None = None,
    lights_per_sample: int | None = None,
    seed: int = 0,
    config: CorpusConfig | None = None,
    wounded: bool = True,
    jobs: int = 1,
) -> Corpus:
    """Generate identities, wounds and renders, then split 6:2:2 by identity.

    Each identity draws from its own seed stream, so results do not depend on
    ``jobs``.
    """
    config = config or CorpusConfig()
    overrides = {}
    if n_identities is not None:
        overrides["n_identities"] = n_identities
    if lights_per_sample is not None:
        overrides["lights_per_sample"] = lights_per_sample
    if overrides:
        config = CorpusConfig(**{**asdict(config), **overrides})
    args = [(basis, i, seed, config, wounded) for i in range(config.n_identities)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            samples = list(pool.map(_make_sample_star, args))
    else:
        samples = [make_sample(*a) for a in args]
    split = split_dataset(list(range(config.n_identities)), seed)
    return Corpus(samples, split, config, seed)


# --- on-disk layout ---------------------------------------------------------


def write_pgm(image: np.ndarray, path) -> None:
    h, w = image.shape
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pixels = np.frombuffer(raw, np.uint8, w * h, pos + 1).reshape(h, w)
    return pixels.astype(np.float64) / maxval


def _config_json(config: CorpusConfig) -> dict:
    d = asdict(config)
    d["wound_rings"] = list(d["wound_rings"])
    return d


def manifest_dict(corpus: Corpus) -> dict:
    return {
        "seed": corpus.seed,
        "config": _config_json(corpus.config),
        "split": {str(k): v for k, v in sorted(corpus.split.items())},
        "identities": [
            {
                "id": s.identity_id,
                "dir": f"id_{s.identity_id:04d}",
                "hidden_code": s.hidden_code.tolist(),
                "lights": s.lights.tolist(),
            }
            for s in corpus.samples
        ],
    }


def save_corpus(corpus: Corpus, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in corpus.samples:
        d = root / f"id_{s.identity_id:04d}"
        d.mkdir(exist_ok=True)
        write_obj(s.gt_mesh, d / "gt.obj")
        write_obj(s.damaged_mesh, d / "damaged.obj")
        (d / "wound.csv").write_text(
            "vertex_index\n" + "".join(f"{i}\n" for i in s.wound_vertex_set.tolist())
        )
        for k, img in enumerate(s.renders):
            write_pgm(img, d / f"render_{k}.pgm")
    text = json.dumps(manifest_dict(corpus), indent=1, sort_keys=True)
    (root / "manifest.json").write_text(text + "\n")


def load_corpus(root, basis: MorphableBasis | None = None) -> Corpus:
    """Read a corpus directory. With ``basis`` given, ground truth is re-checked against decode."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    cfg = dict(manifest["config"])
    cfg["wound_rings"] = tuple(cfg["wound_rings"])
    config = CorpusConfig(**cfg)
    samples = []
    for entry in manifest["identities"]:
        d = root / entry["dir"]
        gt = read_obj(d / "gt.obj")
        damaged = read_obj(d / "damaged.obj")
        wound = np.loadtxt(d / "wound.csv", dtype=np.int64, skiprows=1, ndmin=1)
        code = np.array(entry["hidden_code"])
        if basis is not None and not np.array_equal(decode(basis, code), gt.vertices):
            raise ValueError(f"identity {entry['id']}: gt mesh does not match decode(basis, code)")
        renders = [read_pgm(d / f"render_{k}.pgm") for k in range(config.lights_per_sample)]
        samples.append(
            SyntheticSample(entry["id"], code, gt, damaged, wound, np.array(entry["lights"]), renders)
        )
    split = {int(k): v for k, v in manifest["split"].items()}
    return Corpus(samples, split, config, manifest["seed"])
