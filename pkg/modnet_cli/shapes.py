"""MODNet CLI — Procedural meshes, area-uniform surface sampling and noise models."""

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from modnet_cli.error_reporter import MeshError
from modnet_cli.geom import PointCloud

SHAPE_KINDS = ("cube", "sphere", "cylinder", "torus", "icosahedron")
NOISE_MODELS = ("gaussian", "laplace", "uniform", "discrete")

DEFAULT_DIMENSIONS = {
    "cube": {"edge": 1.0},
    "sphere": {"radius": 0.5},
    "cylinder": {"radius": 0.4, "height": 1.0},
    "torus": {"R": 0.5, "r": 0.2},
    "icosahedron": {"radius": 0.6},
}

NOISE_PRESETS = {
    "train": (0.0, 0.0025, 0.005, 0.01, 0.015),
    "test": (0.005, 0.01, 0.015),
    "high": (0.03,),
}

AREA_EPS = 1e-14


@dataclass
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise MeshError("triangle index out of range")
        if len(self.triangles) and np.any(self.areas <= AREA_EPS):
            raise MeshError("mesh contains zero-area triangles")

    @property
    def corners(self) -> np.ndarray:
        return self.vertices[self.triangles]

    @cached_property
    def _cross(self) -> np.ndarray:
        c = self.corners
        return np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])

    @cached_property
    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross, axis=1)

    @cached_property
    def face_normals(self) -> np.ndarray:
        return self._cross / np.linalg.norm(self._cross, axis=1, keepdims=True)

    @property
    def area(self) -> float:
        return float(self.areas.sum())

    def euler_characteristic(self) -> int:
        edges = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        return len(self.vertices) - n_edges + len(self.triangles)


# ── Shape generators ─────────────────────────────────────

def _grid_quads(rows, cols, wrap_cols=False, wrap_rows=False):
    """Triangles over a (rows x cols) vertex grid indexed r * cols + c."""
    tris = []
    row_range = rows if wrap_rows else rows - 1
    col_range = cols if wrap_cols else cols - 1
    for r in range(row_range):
        for c in range(col_range):
            a = r * cols + c
            b = r * cols + (c + 1) % cols
            d = ((r + 1) % rows) * cols + c
            e = ((r + 1) % rows) * cols + (c + 1) % cols
            tris.append((a, b, e))
            tris.append((a, e, d))
    return tris


def _weld(vertices, triangles, decimals=12):
    """Merge coincident vertices so shared edges share indices."""
    keys = np.round(vertices, decimals) + 0.0
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    return vertices[first], inverse.reshape(-1)[np.asarray(triangles)]


def _orient(vertices, triangles, anchors):
    """Flip triangles whose normal points toward their anchor point."""
    triangles = np.array(triangles, dtype=np.int64)
    c = vertices[triangles]
    normals = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    outward = c.mean(axis=1) - anchors
    flip = np.einsum("ij,ij->i", normals, outward) < 0
    triangles[flip] = triangles[flip][:, ::-1]
    return triangles


def _subdivided_faces(faces, resolution):
    """Split each planar triangle into resolution^2 coplanar triangles."""
    verts, tris = [], []
    n = resolution
    for a, b, c in faces:
        index = {}
        for i in range(n + 1):
            for j in range(n + 1 - i):
                index[(i, j)] = len(verts)
                verts.append(a + (b - a) * (i / n) + (c - a) * (j / n))
        for i in range(n):
            for j in range(n - i):
                tris.append((index[(i, j)], index[(i + 1, j)], index[(i, j + 1)]))
                if j + i + 1 < n:
                    tris.append((index[(i + 1, j)], index[(i + 1, j + 1)], index[(i, j + 1)]))
    return np.array(verts), tris


def _cube(edge, resolution):
    h = edge / 2.0
    verts, tris = [], []
    n = resolution
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u_axis, v_axis = [a for a in range(3) if a != axis]
            base = len(verts)
            for i in range(n + 1):
                for j in range(n + 1):
                    p = np.zeros(3)
                    p[axis] = sign * h
                    p[u_axis] = -h + edge * i / n
                    p[v_axis] = -h + edge * j / n
                    verts.append(p)
            tris.extend(tuple(base + t for t in tri) for tri in _grid_quads(n + 1, n + 1))
    verts = np.array(verts)
    verts, tris = _weld(verts, tris)
    return verts, _orient(verts, tris, np.zeros(3))


def _sphere(radius, resolution):
    stacks = max(2, 4 * resolution)
    slices = 2 * stacks
    verts = [np.array([0.0, 0.0, radius])]
    for s in range(1, stacks):
        phi = np.pi * s / stacks
        for t in range(slices):
            theta = 2 * np.pi * t / slices
            verts.append(radius * np.array([np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)]))
    verts.append(np.array([0.0, 0.0, -radius]))
    verts = np.array(verts)
    bottom = len(verts) - 1
    tris = []
    for t in range(slices):
        tris.append((0, 1 + t, 1 + (t + 1) % slices))
    ring = [tuple(1 + tri_i for tri_i in tri) for tri in _grid_quads(stacks - 1, slices, wrap_cols=True)]
    tris.extend(ring)
    last = 1 + (stacks - 2) * slices
    for t in range(slices):
        tris.append((bottom, last + (t + 1) % slices, last + t))
    return verts, _orient(verts, tris, np.zeros(3))


def _cylinder(radius, height, resolution):
    slices = max(3, 8 * resolution)
    rings = resolution + 1
    verts = []
    for r in range(rings):
        z = -height / 2 + height * r / resolution
        for t in range(slices):
            theta = 2 * np.pi * t / slices
            verts.append([radius * np.cos(theta), radius * np.sin(theta), z])
    bottom_c = len(verts)
    verts.append([0.0, 0.0, -height / 2])
    top_c = len(verts)
    verts.append([0.0, 0.0, height / 2])
    verts = np.array(verts)
    tris = _grid_quads(rings, slices, wrap_cols=True)
    top_ring = (rings - 1) * slices
    for t in range(slices):
        tris.append((bottom_c, (t + 1) % slices, t))
        tris.append((top_c, top_ring + t, top_ring + (t + 1) % slices))
    return verts, _orient(verts, tris, np.zeros(3))


def _torus(R, r, resolution):
    major = max(3, 12 * resolution)
    minor = max(3, 6 * resolution)
    verts = []
    for i in range(major):
        u = 2 * np.pi * i / major
        for j in range(minor):
            v = 2 * np.pi * j / minor
            verts.append([(R + r * np.cos(v)) * np.cos(u), (R + r * np.cos(v)) * np.sin(u), r * np.sin(v)])
    verts = np.array(verts)
    tris = np.array(_grid_quads(major, minor, wrap_cols=True, wrap_rows=True))
    centroids = verts[tris].mean(axis=1)
    ring_dir = centroids[:, :2] / np.linalg.norm(centroids[:, :2], axis=1, keepdims=True)
    anchors = np.hstack([R * ring_dir, np.zeros((len(tris), 1))])
    return verts, _orient(verts, tris, anchors)


def _icosahedron(radius, resolution):
    g = (1.0 + np.sqrt(5.0)) / 2.0
    base = np.array([
        [-1, g, 0], [1, g, 0], [-1, -g, 0], [1, -g, 0],
        [0, -1, g], [0, 1, g], [0, -1, -g], [0, 1, -g],
        [g, 0, -1], [g, 0, 1], [-g, 0, -1], [-g, 0, 1],
    ], dtype=np.float64)
    base *= radius / np.linalg.norm(base[0])
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts, tris = _subdivided_faces([base[list(f)] for f in faces], resolution)
    verts, tris = _weld(verts, tris)
    return verts, _orient(verts, tris, np.zeros(3))


def gen_shape(kind: str, params: Optional[Dict[str, float]] = None, resolution: int = 8) -> TriMesh:
    if kind not in SHAPE_KINDS:
        raise MeshError(f"unknown shape '{kind}' (choose from {', '.join(SHAPE_KINDS)})")
    if resolution < 1:
        raise MeshError("resolution must be at least 1")
    dims = dict(DEFAULT_DIMENSIONS[kind])
    dims.update(params or {})
    for name, value in dims.items():
        if not value > 0:
            raise MeshError(f"{kind}: dimension '{name}' must be positive, got {value}")

    if kind == "cube":
        verts, tris = _cube(dims["edge"], resolution)
    elif kind == "sphere":
        verts, tris = _sphere(dims["radius"], resolution)
    elif kind == "cylinder":
        verts, tris = _cylinder(dims["radius"], dims["height"], resolution)
    elif kind == "torus":
        if dims["r"] >= dims["R"]:
            raise MeshError("torus: tube radius r must be smaller than R")
        verts, tris = _torus(dims["R"], dims["r"], resolution)
    else:
        verts, tris = _icosahedron(dims["radius"], resolution)
    return TriMesh(verts, tris)


def sample_surface(mesh: TriMesh, n: int, rng: np.random.Generator) -> PointCloud:
    """Area-uniform samples; each sample carries its triangle's face normal."""
    if len(mesh.triangles) == 0:
        raise MeshError("empty mesh")
    if n < 1:
        raise MeshError("sample count must be at least 1")
    area_cum = np.cumsum(mesh.areas)
    face_index = np.searchsorted(area_cum, rng.random(n) * area_cum[-1], side="right")
    face_index = np.minimum(face_index, len(area_cum) - 1)
    corners = mesh.corners[face_index]
    r1 = np.sqrt(rng.random(n))[:, None]
    r2 = rng.random(n)[:, None]
    points = (1 - r1) * corners[:, 0] + r1 * (1 - r2) * corners[:, 1] + r1 * r2 * corners[:, 2]
    return PointCloud(points, mesh.face_normals[face_index])


# ── Noise ────────────────────────────────────────────────

@dataclass(frozen=True)
class NoiseSpec:
    model: str = "gaussian"
    sigma_frac: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.model not in NOISE_MODELS:
            raise MeshError(f"unknown noise model '{self.model}'")
        if self.sigma_frac < 0:
            raise MeshError("sigma_frac must be nonnegative")

    @property
    def tag(self) -> str:
        return f"{self.model}_{self.sigma_frac:g}"


def add_noise(cloud: PointCloud, spec: NoiseSpec) -> PointCloud:
    """P̂ = P + N with per-coordinate standard deviation sigma_frac * bbox_diag."""
    if spec.sigma_frac == 0:
        return PointCloud(cloud.points.copy())
    sigma = spec.sigma_frac * cloud.bbox_diag
    rng = np.random.default_rng(spec.seed)
    shape = cloud.points.shape
    if spec.model == "gaussian":
        noise = rng.normal(0.0, sigma, shape)
    elif spec.model == "laplace":
        noise = rng.laplace(0.0, sigma / np.sqrt(2.0), shape)
    elif spec.model == "uniform":
        half = np.sqrt(3.0) * sigma
        noise = rng.uniform(-half, half, shape)
    else:
        # lattice step sqrt(3/2)·sigma gives variance sigma^2
        noise = rng.integers(-1, 2, shape) * (np.sqrt(1.5) * sigma)
    return PointCloud(cloud.points + noise)


def parse_noise_grid(text: str, seed: int = 0) -> List[NoiseSpec]:
    """'gaussian:0.005,0.01' or a preset name ('train', 'test', 'high')."""
    text = text.strip()
    if text in NOISE_PRESETS:
        return [NoiseSpec("gaussian", s, seed) for s in NOISE_PRESETS[text]]
    model, _, levels = text.partition(":")
    if not levels:
        raise MeshError(f"noise spec '{text}' must look like model:sigma[,sigma...]")
    try:
        sigmas = [float(s) for s in levels.split(",") if s.strip()]
    except ValueError as e:
        raise MeshError(f"bad noise level in '{text}': {e}") from e
    return [NoiseSpec(model.strip(), s, seed) for s in sigmas]


# ── OFF files ────────────────────────────────────────────

def write_off(path, mesh: TriMesh):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write("OFF\n")
        f.write(f"{len(mesh.vertices)} {len(mesh.triangles)} 0\n")
        for v in mesh.vertices:
            f.write(" ".join(f"{x:.17g}" for x in v) + "\n")
        for t in mesh.triangles:
            f.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def read_off(path) -> TriMesh:
    path = Path(path)
    try:
        tokens = [
            line.split("#", 1)[0].split()
            for line in path.read_text().splitlines()
        ]
    except OSError as e:
        raise MeshError(f"cannot read {path}: {e}") from e
    lines = [t for t in tokens if t]
    if not lines or lines[0][0] != "OFF":
        raise MeshError(f"{path}: missing OFF header")
    try:
        n_vertices, n_faces = int(lines[1][0]), int(lines[1][1])
        vertices = [[float(x) for x in line[:3]] for line in lines[2:2 + n_vertices]]
        faces = []
        for line in lines[2 + n_vertices:2 + n_vertices + n_faces]:
            if int(line[0]) != 3:
                raise MeshError(f"{path}: only triangular faces are supported")
            faces.append([int(x) for x in line[1:4]])
    except (IndexError, ValueError) as e:
        raise MeshError(f"{path}: malformed OFF file ({e})") from e
    if len(vertices) != n_vertices or len(faces) != n_faces:
        raise MeshError(f"{path}: truncated OFF file")
    return TriMesh(np.array(vertices), np.array(faces))
