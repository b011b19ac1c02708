import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from woundfill.mesh import TriangleMesh

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tetra(offset=0.0) -> TriangleMesh:
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float) + offset
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TriangleMesh(v, f)


def merge(*meshes: TriangleMesh) -> TriangleMesh:
    verts, faces, n = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + n)
        n += m.n_vertices
    return TriangleMesh(np.vstack(verts), np.vstack(faces))


def central_diff(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def icosphere(n=162, center=(0.0, 0.0, 0.0), radius=1.0) -> TriangleMesh:
    from woundfill.decoder import sphere_template

    dirs, faces = sphere_template(n)
    return TriangleMesh(dirs * radius + np.asarray(center), faces)


def punched_sphere(seed: int, n_holes: int | None = None, n_floating: int | None = None):
    """Sphere with 1-3 vertex stars removed (simple holes) plus 0-2 small closed blobs.

    Returns (mesh, n_holes, n_floating). Hole centers are at least 3 edges apart,
    so every hole boundary is a simple loop.
    """
    from woundfill.mesh import vertex_adjacency

    r = np.random.default_rng(seed)
    n_holes = int(r.integers(1, 4)) if n_holes is None else n_holes
    n_floating = int(r.integers(0, 3)) if n_floating is None else n_floating
    base = icosphere(642 if r.uniform() < 0.5 else 162)
    adj = vertex_adjacency(base.n_vertices, base.faces)
    centers: list[int] = []
    blocked: set[int] = set()
    for v in r.permutation(base.n_vertices).tolist():
        if v in blocked:
            continue
        centers.append(v)
        ring1 = set(adj[v].tolist())
        ring2 = set().union(*(adj[w].tolist() for w in ring1))
        ring3 = set().union(*(adj[w].tolist() for w in ring2))
        blocked |= {v} | ring1 | ring2 | ring3
        if len(centers) == n_holes:
            break
    keep = ~np.isin(base.faces, centers).any(axis=1)
    parts = [TriangleMesh(base.vertices, base.faces[keep])]
    for k in range(n_floating):
        c = r.uniform(-0.3, 0.3, 3)
        parts.append(icosphere(42, center=c, radius=0.1 + 0.02 * k))
    return merge(*parts), n_holes, n_floating


# --- acceptance reporting -----------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def report_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[number] = (passed, line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number][1])
