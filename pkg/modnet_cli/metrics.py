"""MODNet CLI — Chamfer distance, k-NN mean-square error and point-to-mesh distance."""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from modnet_cli.error_reporter import MetricError
from modnet_cli.geom import PointCloud, build_index
from modnet_cli.shapes import TriMesh

DEFAULT_MSE_NEIGHBORS = 10
# Display factors for --paper-scale: CD x1e4, MSE x1e2, P2M x1e4
DISPLAY_SCALE = {"cd": 1e4, "mse": 1e2, "p2m": 1e4}


def _require(cloud: PointCloud, what: str):
    if len(cloud) == 0:
        raise MetricError(f"empty {what} point cloud")


def _sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return np.einsum("...i,...i->...", d, d)


def chamfer_distance(filtered: PointCloud, gt: PointCloud) -> float:
    _require(filtered, "filtered")
    _require(gt, "ground-truth")
    to_filtered = build_index(filtered).nearest(gt.points)[:, 0]
    to_gt = build_index(gt).nearest(filtered.points)[:, 0]
    forward = _sq_dist(gt.points, filtered.points[to_filtered]).mean()
    backward = _sq_dist(filtered.points, gt.points[to_gt]).mean()
    return float(forward + backward)


def mse_metric(filtered: PointCloud, gt: PointCloud, n_neighbors: int = DEFAULT_MSE_NEIGHBORS) -> float:
    """Mean over gt points of the mean squared distance to their N nearest filtered points."""
    _require(gt, "ground-truth")
    if len(filtered) < n_neighbors:
        raise MetricError(f"filtered cloud has {len(filtered)} points, fewer than N={n_neighbors}")
    idx = build_index(filtered).nearest(gt.points, n_neighbors)
    sq = _sq_dist(gt.points[:, None, :], filtered.points[idx])
    return float(sq.mean(axis=1).mean())


def _closest_points(p, a, b, c):
    """Closest points on triangles (a, b, c) to p; all arrays [n, 3]."""
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    dot = lambda x, y: np.einsum("ij,ij->i", x, y)
    d1, d2 = dot(ab, ap), dot(ac, ap)
    d3, d4 = dot(ab, bp), dot(ac, bp)
    d5, d6 = dot(ab, cp), dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    def ratio(num, den):
        return np.divide(num, den, out=np.zeros_like(num), where=den != 0)[:, None]

    total = va + vb + vc
    conditions = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
    ]
    choices = [
        a,
        b,
        a + ratio(d1, d1 - d3) * ab,
        c,
        a + ratio(d2, d2 - d6) * ac,
        b + ratio(d4 - d3, (d4 - d3) + (d5 - d6)) * (c - b),
    ]
    interior = a + ratio(vb, total) * ab + ratio(vc, total) * ac
    select = np.select([m[:, None] for m in conditions], choices, default=interior)
    return select


def _check_triangle(tri):
    if np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0])) <= 1e-300:
        raise MetricError("degenerate triangle")


def point_triangle_distance(p, tri) -> float:
    """Exact distance from p to the closed triangle."""
    p = np.asarray(p, dtype=np.float64).reshape(1, 3)
    tri = np.asarray(tri, dtype=np.float64).reshape(3, 3)
    _check_triangle(tri)
    q = _closest_points(p, tri[0:1], tri[1:2], tri[2:3])
    return float(np.sqrt(_sq_dist(p, q)[0]))


def point_mesh_sq_distances(points: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Squared distance from each point to its nearest triangle.

    Candidates come from a kd-tree over triangle centroids: once one triangle
    is at distance d0, only triangles whose centroid lies within d0 plus the
    largest centroid-to-vertex radius can be closer.
    """
    corners = mesh.corners
    centroids = corners.mean(axis=1)
    radius = float(np.sqrt(_sq_dist(corners, centroids[:, None, :]).max()))
    tree = cKDTree(centroids)
    _, first = tree.query(points, k=1)
    first = np.atleast_1d(first)
    d0 = np.sqrt(_sq_dist(points, _closest_points(points, *(corners[first, i] for i in range(3)))))
    candidates = tree.query_ball_point(points, (d0 + radius) * (1.0 + 1e-9) + 1e-12)

    counts = np.array([len(c) for c in candidates])
    owner = np.repeat(np.arange(len(points)), counts)
    tris = np.concatenate([np.asarray(c, dtype=np.int64) for c in candidates])
    q = _closest_points(points[owner], corners[tris, 0], corners[tris, 1], corners[tris, 2])
    sq = _sq_dist(points[owner], q)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return np.minimum.reduceat(sq, starts)


def p2m_metric(filtered: PointCloud, mesh: TriMesh) -> float:
    """Mean squared distance from filtered points to the mesh (point -> mesh only)."""
    _require(filtered, "filtered")
    if len(mesh.triangles) == 0:
        raise MetricError("empty mesh")
    return float(point_mesh_sq_distances(filtered.points, mesh).mean())


@dataclass
class MetricReport:
    cd: float
    mse: float
    p2m: Optional[float]
    n_filtered: int
    n_gt: int

    def scaled(self) -> "MetricReport":
        return MetricReport(
            self.cd * DISPLAY_SCALE["cd"],
            self.mse * DISPLAY_SCALE["mse"],
            None if self.p2m is None else self.p2m * DISPLAY_SCALE["p2m"],
            self.n_filtered,
            self.n_gt,
        )

    def csv_row(self, name: str):
        fmt = lambda v: "" if v is None else f"{v:.12g}"
        return [name, str(self.n_filtered), str(self.n_gt), fmt(self.cd), fmt(self.mse), fmt(self.p2m)]


CSV_HEADER = ["name", "n_filtered", "n_gt", "cd", "mse", "p2m"]


def evaluate(filtered: PointCloud, gt: PointCloud, mesh: Optional[TriMesh] = None,
             n_neighbors: int = DEFAULT_MSE_NEIGHBORS) -> MetricReport:
    return MetricReport(
        cd=chamfer_distance(filtered, gt),
        mse=mse_metric(filtered, gt, n_neighbors),
        p2m=None if mesh is None else p2m_metric(filtered, mesh),
        n_filtered=len(filtered),
        n_gt=len(gt),
    )


def handle_eval(args):
    import csv
    from pathlib import Path

    from modnet_cli.config_manager import resolve_config
    from modnet_cli.error_reporter import UsageError
    from modnet_cli.geom import read_xyz
    from modnet_cli.shapes import read_off

    resolve_config(args)
    n = len(args.filtered)
    if len(args.gt) != n:
        raise UsageError(f"--gt lists {len(args.gt)} files for {n} filtered files")
    if args.mesh and len(args.mesh) != n:
        raise UsageError(f"--mesh lists {len(args.mesh)} files for {n} filtered files")
    if args.names and len(args.names) != n:
        raise UsageError(f"--names lists {len(args.names)} names for {n} filtered files")
    names = args.names or [Path(f).stem for f in args.filtered]

    rows = []
    for i in range(n):
        mesh = read_off(args.mesh[i]) if args.mesh else None
        report = evaluate(read_xyz(args.filtered[i]), read_xyz(args.gt[i]), mesh, args.neighbors)
        rows.append((names[i], report))

    out = Path(args.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "metrics.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for name, report in rows:
            writer.writerow(report.csv_row(name))

    unit = "  (CD, P2M x1e-4; MSE x1e-2)" if args.display_scale else ""
    print(f"\n📊 Metrics{unit}")
    print(f"   {'name':<24}{'CD':>14}{'MSE':>14}{'P2M':>14}")
    for name, report in rows:
        shown = report.scaled() if args.display_scale else report
        p2m = "-" if shown.p2m is None else f"{shown.p2m:.6g}"
        print(f"   {name:<24}{shown.cd:>14.6g}{shown.mse:>14.6g}{p2m:>14}")
    print(f"📦 Wrote {path}")
