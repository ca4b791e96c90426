import numpy as np
import pytest
from scipy import stats

from modnet_cli.error_reporter import MeshError
from modnet_cli.geom import PointCloud
from modnet_cli.shapes import (
    NoiseSpec,
    TriMesh,
    add_noise,
    gen_shape,
    parse_noise_grid,
    read_off,
    sample_surface,
    write_off,
)


def _signed_volume(mesh):
    c = mesh.corners
    return float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)


def _edge_use_counts(mesh):
    edges = np.sort(mesh.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return counts


@pytest.mark.parametrize("kind", ["cube", "sphere", "cylinder", "torus"])
def test_generated_meshes_are_closed_and_outward(kind):
    mesh = gen_shape(kind, resolution=2)
    assert np.all(_edge_use_counts(mesh) == 2)
    assert _signed_volume(mesh) > 0
    assert mesh.euler_characteristic() == (0 if kind == "torus" else 2)


def test_cube_resolution_one():
    mesh = gen_shape("cube", resolution=1)
    assert len(mesh.triangles) == 12
    assert len(mesh.vertices) == 8
    assert _signed_volume(mesh) == pytest.approx(1.0, abs=1e-12)
    assert mesh.area == pytest.approx(6.0, abs=1e-12)


def test_icosahedron_area():
    radius = 0.6
    mesh = gen_shape("icosahedron", resolution=3)
    edge = radius / np.sin(2 * np.pi / 5)
    assert mesh.area == pytest.approx(5 * np.sqrt(3) * edge ** 2, rel=1e-9)
    assert _signed_volume(mesh) > 0


def test_gen_shape_rejects_bad_input():
    with pytest.raises(MeshError, match="unknown shape"):
        gen_shape("teapot")
    with pytest.raises(MeshError):
        gen_shape("cube", resolution=0)
    with pytest.raises(MeshError):
        gen_shape("sphere", {"radius": -1.0})
    with pytest.raises(MeshError):
        gen_shape("torus", {"R": 0.2, "r": 0.3})


def test_zero_area_triangle_rejected():
    with pytest.raises(MeshError, match="zero-area"):
        TriMesh(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]]), [[0, 1, 2]])


def test_samples_lie_on_cube_surface(cube_mesh):
    cloud = sample_surface(cube_mesh, 2000, np.random.default_rng(3))
    assert len(cloud) == 2000
    assert np.allclose(np.max(np.abs(cloud.points), axis=1), 0.5, atol=1e-12)
    assert np.allclose(np.linalg.norm(cloud.normals, axis=1), 1.0)
    # outward face normals point along the axis the point sits on
    axis = np.argmax(np.abs(cloud.points), axis=1)
    rows = np.arange(len(cloud))
    assert np.all(cloud.normals[rows, axis] * cloud.points[rows, axis] > 0)


def test_sampling_is_area_uniform():
    mesh = gen_shape("cylinder", {"radius": 0.4, "height": 1.0}, resolution=4)
    cloud = sample_surface(mesh, 40000, np.random.default_rng(0))
    on_caps = np.isclose(np.abs(cloud.points[:, 2]), 0.5)
    cap_area = mesh.areas[np.isclose(np.abs(mesh.corners[:, :, 2]), 0.5).all(axis=1)].sum()
    assert on_caps.mean() == pytest.approx(cap_area / mesh.area, abs=0.01)


def test_cube_samples_pass_chi_square():
    # 6 faces x 3x3 cells of equal area
    n = 27000
    cloud = sample_surface(gen_shape("cube", resolution=3), n, np.random.default_rng(8))
    p = cloud.points
    axis = np.argmax(np.abs(p), axis=1)
    side = (p[np.arange(n), axis] > 0).astype(int)
    u = p[np.arange(n), (axis + 1) % 3]
    v = p[np.arange(n), (axis + 2) % 3]
    cu = np.clip(np.floor((u + 0.5) * 3), 0, 2).astype(int)
    cv = np.clip(np.floor((v + 0.5) * 3), 0, 2).astype(int)
    cell = ((axis * 2 + side) * 3 + cu) * 3 + cv
    counts = np.bincount(cell, minlength=54)
    assert counts.min() > 0
    assert stats.chisquare(counts).pvalue > 1e-3


def test_cylinder_samples_pass_chi_square():
    mesh = gen_shape("cylinder", {"radius": 0.4, "height": 1.0}, resolution=4)
    n = 30000
    z = sample_surface(mesh, n, np.random.default_rng(9)).points[:, 2]
    top = np.isclose(z, 0.5)
    bottom = np.isclose(z, -0.5)
    counts = np.array([top.sum(), bottom.sum(), n - top.sum() - bottom.sum()])
    on_top = np.isclose(mesh.corners[:, :, 2], 0.5).all(axis=1)
    on_bottom = np.isclose(mesh.corners[:, :, 2], -0.5).all(axis=1)
    areas = np.array([mesh.areas[on_top].sum(), mesh.areas[on_bottom].sum(), 0.0])
    areas[2] = mesh.area - areas[0] - areas[1]
    expected = n * areas / areas.sum()
    assert stats.chisquare(counts, expected).pvalue > 1e-3


def test_sphere_area_converges_to_four_pi():
    radius = 0.5
    exact = 4 * np.pi * radius ** 2
    errors = [exact - gen_shape("sphere", resolution=res).area for res in (2, 4, 8, 16)]
    # inscribed polyhedra stay below the sphere and close in as resolution grows
    assert all(e > 0 for e in errors)
    assert all(b < a for a, b in zip(errors, errors[1:]))
    assert errors[-1] / exact < 2e-3


def test_sampling_is_deterministic(cube_mesh):
    a = sample_surface(cube_mesh, 100, np.random.default_rng(11))
    b = sample_surface(cube_mesh, 100, np.random.default_rng(11))
    assert np.array_equal(a.points, b.points)


def test_zero_noise_copies_points(cube_mesh):
    clean = sample_surface(cube_mesh, 200, np.random.default_rng(0))
    noisy = add_noise(clean, NoiseSpec("gaussian", 0.0, 5))
    assert np.array_equal(noisy.points, clean.points)
    assert noisy.normals is None


def test_gaussian_noise_level(cube_mesh):
    clean = sample_surface(cube_mesh, 20000, np.random.default_rng(0))
    before = clean.points.copy()
    noisy = add_noise(clean, NoiseSpec("gaussian", 0.01, 5))
    assert np.array_equal(clean.points, before)
    sigma = 0.01 * clean.bbox_diag
    assert np.std(noisy.points - clean.points) == pytest.approx(sigma, rel=0.03)


@pytest.mark.parametrize("model", ["laplace", "uniform"])
def test_other_noise_models_match_sigma(cube_mesh, model):
    clean = sample_surface(cube_mesh, 20000, np.random.default_rng(0))
    noisy = add_noise(clean, NoiseSpec(model, 0.01, 2))
    sigma = 0.01 * clean.bbox_diag
    assert np.std(noisy.points - clean.points) == pytest.approx(sigma, rel=0.05)


def test_discrete_noise_values(cube_mesh):
    clean = sample_surface(cube_mesh, 500, np.random.default_rng(0))
    noisy = add_noise(clean, NoiseSpec("discrete", 0.01, 2))
    step = np.sqrt(1.5) * 0.01 * clean.bbox_diag
    steps = np.round((noisy.points - clean.points) / step)
    assert set(np.unique(steps)) <= {-1.0, 0.0, 1.0}
    assert np.allclose(noisy.points - clean.points, steps * step, atol=1e-15)


def test_discrete_noise_matches_sigma(cube_mesh):
    clean = sample_surface(cube_mesh, 20000, np.random.default_rng(0))
    noisy = add_noise(clean, NoiseSpec("discrete", 0.01, 4))
    sigma = 0.01 * clean.bbox_diag
    delta = (noisy.points - clean.points).ravel()
    assert delta.size >= 50000
    assert np.var(delta) == pytest.approx(sigma ** 2, rel=0.1)
    _, counts = np.unique(np.rint(delta / (np.sqrt(1.5) * sigma)), return_counts=True)
    assert len(counts) == 3
    assert stats.chisquare(counts).pvalue > 1e-3


def test_noise_spec_validation():
    with pytest.raises(MeshError):
        NoiseSpec("pink", 0.01)
    with pytest.raises(MeshError):
        NoiseSpec("gaussian", -0.1)


def test_parse_noise_grid():
    grid = parse_noise_grid("gaussian:0.005,0.01,0.015", seed=3)
    assert [g.sigma_frac for g in grid] == [0.005, 0.01, 0.015]
    assert all(g.model == "gaussian" and g.seed == 3 for g in grid)
    assert [g.sigma_frac for g in parse_noise_grid("test")] == [0.005, 0.01, 0.015]
    assert [g.sigma_frac for g in parse_noise_grid("train")][0] == 0.0
    with pytest.raises(MeshError):
        parse_noise_grid("gaussian")


def test_off_files(tmp_path):
    mesh = gen_shape("torus", resolution=1)
    write_off(tmp_path / "torus.off", mesh)
    back = read_off(tmp_path / "torus.off")
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.triangles, mesh.triangles)

    (tmp_path / "bad.off").write_text("PLY\n")
    with pytest.raises(MeshError):
        read_off(tmp_path / "bad.off")


def test_noisy_cloud_keeps_ordering(cube_mesh):
    clean = sample_surface(cube_mesh, 300, np.random.default_rng(0))
    noisy = add_noise(clean, NoiseSpec("gaussian", 0.001, 9))
    assert isinstance(noisy, PointCloud) and len(noisy) == len(clean)
    assert np.max(np.linalg.norm(noisy.points - clean.points, axis=1)) < 0.02
