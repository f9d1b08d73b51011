import itertools

import numpy as np
import pytest

from rimap._mc_tables import CORNERS, EDGES, TRI_TABLE
from rimap.config import GridConfig, MapperConfig
from rimap.data_io import PoseRecord
from rimap.mesher import marching_cubes, mesh_from_sdf
from rimap.trainer import Mapper


def sphere(p):
    return np.linalg.norm(p, axis=1) - 1.0


def test_sphere_oracle():
    mesh = mesh_from_sdf(sphere, (-1.3,) * 3, (1.3,) * 3, 0.05)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert len(mesh) > 1000
    assert np.abs(r - 1).max() <= 0.05
    assert mesh.euler_characteristic() == 2
    assert mesh.boundary_edge_count() == 0
    assert mesh.triangle_areas().min() > 0


def test_sphere_normals_point_outward():
    mesh = mesh_from_sdf(sphere, (-1.3,) * 3, (1.3,) * 3, 0.1)
    a, b, c = (mesh.vertices[mesh.triangles[:, k]] for k in range(3))
    n = np.cross(b - a, c - a)
    assert np.all(np.sum(n * (a + b + c), axis=1) > 0)


@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_uniform_cube_has_no_triangles(sign):
    verts, tris, _ = marching_cubes(np.full((2, 2, 2), sign))
    assert len(tris) == 0 and len(verts) == 0


def test_single_negative_corner():
    v = np.ones((2, 2, 2))
    v[0, 0, 0] = -1
    verts, tris, keys = marching_cubes(v)
    assert tris.shape == (1, 3)
    # vertices at the midpoints of the three edges leaving the negative corner
    assert sorted(map(tuple, np.round(verts[tris[0]], 12))) == [
        (0.0, 0.0, 0.5), (0.0, 0.5, 0.0), (0.5, 0.0, 0.0)]
    assert sorted(keys[:, 3].tolist()) == [0, 1, 2]
    assert np.all(keys[:, :3] == 0)


def test_case_table_uses_exactly_the_sign_change_edges():
    for case in range(256):
        neg = [(case >> k) & 1 for k in range(8)]
        crossing = {e for e, (a, b) in enumerate(EDGES) if neg[a] != neg[b]}
        tri = TRI_TABLE[case]
        assert len(tri) % 3 == 0
        assert set(tri) == crossing, case


def test_case_table_by_corner_values():
    # every one of the 256 cases yields a closed-up patch of the unit cube
    for case in range(256):
        v = np.ones((2, 2, 2))
        for k, (dx, dy, dz) in enumerate(CORNERS):
            if (case >> k) & 1:
                v[dx, dy, dz] = -1
        verts, tris, _ = marching_cubes(v)
        assert len(tris) == len(TRI_TABLE[case]) // 3
        assert np.all((verts >= 0) & (verts <= 1))


def test_validity_mask_gates_cubes():
    lo, hi = (-1.3,) * 3, (1.3,) * 3
    full = mesh_from_sdf(sphere, lo, hi, 0.1)
    half = mesh_from_sdf(sphere, lo, hi, 0.1, valid_fn=lambda p: p[:, 0] < 0.0)
    assert 0 < len(half) < len(full)
    # cubes need all corners at x < 0, so no vertex reaches x >= 0
    assert half.vertices[:, 0].max() < 0


def test_tiled_sdf_extraction_matches_whole():
    whole = mesh_from_sdf(sphere, (-1.3,) * 3, (1.3,) * 3, 0.1)
    parts = [mesh_from_sdf(sphere, (-1.3, -1.3, -1.3), (0.1, 1.3, 1.3), 0.1),
             mesh_from_sdf(sphere, (0.1, -1.3, -1.3), (1.3, 1.3, 1.3), 0.1)]
    union = np.unique(np.round(np.vstack([p.vertices for p in parts]), 6), axis=0)
    assert np.array_equal(union, np.unique(np.round(whole.vertices, 6), axis=0))
    assert sum(len(p) for p in parts) == len(whole)


# meshing the learned map --------------------------------------------------------

@pytest.fixture(scope="module")
def trained():
    cfg = MapperConfig(grid=GridConfig(0.1, 2, 4, 1.6))
    cfg.trainer.sigma = 0.05
    cfg.trainer.batch_points = 1024
    cfg.trainer.iterations_per_frame = 30
    cfg.global_map.archive = "memory"
    m = Mapper(cfg)
    rng = np.random.default_rng(0)
    for i in range(12):
        pose = PoseRecord.identity(frame_id=i, translation=(0, 0.25 * i, 0))
        pts = np.column_stack([np.full(800, 0.45), rng.uniform(-0.7, 0.7, (800, 2))])
        m.integrate_frame(pose, pts, i)
    return m


def test_virgin_query_is_decoder_of_zero():
    m = Mapper(MapperConfig(grid=GridConfig(0.1, 2, 4, 1.6)))
    m.slide(np.zeros(3))
    q = np.random.default_rng(0).uniform(-0.5, 0.5, (20, 3))
    assert np.all(m.sdf_query(q) == m.decoder(np.zeros((1, 8)))[0])
    assert np.all(np.isnan(m.sdf_query([[50.0, 0, 0]])))


def test_batched_query_equals_pointwise(trained):
    q = np.column_stack([np.full(5, 0.3), np.linspace(2.5, 3.0, 5), np.zeros(5)])
    batch = trained.sdf_query(q)
    assert not np.isnan(batch).any()
    # float32 BLAS may round a 1-row product differently from a 5-row one
    single = np.concatenate([trained.sdf_query(p[None]) for p in q])
    assert np.allclose(batch, single, rtol=0, atol=1e-6)


def test_learned_wall_mesh(trained):
    mesh = trained.extract_mesh()
    assert len(mesh) > 100
    # away from the border of the observed patch, where training is thinnest
    v = mesh.vertices
    inner = (v[:, 1] > 0.0) & (v[:, 1] < 2.5) & (np.abs(v[:, 2]) < 0.5)
    assert inner.sum() > 300
    assert np.abs(v[inner, 0] - 0.45).max() < 0.05
    assert np.allclose(np.linalg.norm(mesh.normals, axis=1), 1)
    # the wall faces the sensor (-x side)
    assert np.mean(mesh.normals[:, 0] < 0) > 0.95
    assert mesh.triangle_areas().min() > 0
    # several sub-maps contribute (key side 1.6 m, wall spans ~4 m in y)
    ys = mesh.vertices[:, 1]
    assert ys.max() - ys.min() > 2.0


def test_no_duplicate_vertices_across_submaps(trained):
    mesh = trained.extract_mesh()
    q = np.round(mesh.vertices, 6)
    assert len(np.unique(q, axis=0)) == len(q)
    # interior edges of the stitched wall are shared by two triangles
    assert mesh.boundary_edge_count() < 0.2 * len(mesh)


def test_region_tiling_invariance(trained):
    lo, hi = np.array([-1.0, -1.0, -1.0]), np.array([1.0, 4.0, 1.0])
    whole = trained.extract_mesh((lo, hi))
    cut = 1.63
    parts = [trained.extract_mesh((lo, np.array([hi[0], cut, hi[2]]))),
             trained.extract_mesh((np.array([lo[0], cut, lo[2]]), hi))]
    union = np.unique(np.round(np.vstack([p.vertices for p in parts]), 6), axis=0)
    assert np.array_equal(union, np.unique(np.round(whole.vertices, 6), axis=0))
    assert sum(len(p) for p in parts) == len(whole)


def test_unobserved_cubes_are_not_meshed(trained):
    mesh = trained.extract_mesh()
    gm = trained.global_map
    s = gm.config.leaf_voxel_size
    E0 = gm.config.extent(0)
    a, b, c = (mesh.vertices[mesh.triangles[:, k]] for k in range(3))
    cube = np.floor(np.minimum(np.minimum(a, b), c) / s - 0.5 + 1e-9).astype(np.int64)
    for off in itertools.product((0, 1), repeat=3):
        g = cube + np.array(off)
        for i in range(0, len(g), 997):
            key = tuple(int(x) for x in np.floor_divide(g[i], E0))
            sm = gm.activate(key)
            assert sm.observed[tuple(g[i] - np.array(key) * E0)]


def test_empty_region(trained):
    assert len(trained.extract_mesh((np.array([30.0, 30, 30]), np.array([31.0, 31, 31])))) == 0
    assert len(trained.extract_mesh((np.array([1.0, 1, 1]), np.array([0.0, 0, 0])))) == 0
