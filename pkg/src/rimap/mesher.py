"""Surface extraction from the implicit map by marching cubes.

Cube corners are leaf voxel centres. A cube is meshed only when all 8 of its
corners are observed. Vertices are keyed by the global index of the cube edge
they lie on, which makes tiles stitch without duplicates.
"""
from __future__ import annotations

import numpy as np

from ._mc_tables import CORNERS, EDGES, TRI_TABLE
from .config import GridConfig
from .feature_grid import LocalFeatureGrid, split_by_tiles, VoxelRegion
from .mesh import TriangleMesh

_CORNERS = np.array(CORNERS, dtype=np.int64)
_EDGE_A = np.array([a for a, _ in EDGES])
_EDGE_B = np.array([b for _, b in EDGES])
_EDGE_LOWER = np.minimum(_CORNERS[_EDGE_A], _CORNERS[_EDGE_B])
_EDGE_AXIS = np.argmax(_CORNERS[_EDGE_A] != _CORNERS[_EDGE_B], axis=1)
_NTRI = np.array([len(t) // 3 for t in TRI_TABLE])
_TRI = np.full((256, 15), -1, dtype=np.int64)
for _c, _t in enumerate(TRI_TABLE):
    _TRI[_c, :len(_t)] = _t


def marching_cubes(values, valid=None, origin=(0.0, 0.0, 0.0), spacing=1.0, index_offset=(0, 0, 0)):
    """Triangulate the zero level set of a sampled scalar field.

    ``values[i, j, k]`` is the field at ``origin + (i, j, k) * spacing``;
    ``valid`` optionally masks cubes (shape one smaller per axis). Returns
    ``(vertices, triangles, edge_keys)`` where each vertex's key is the global
    index of its edge's lower corner plus the edge axis.
    """
    v = np.asarray(values, dtype=np.float64)
    nx, ny, nz = v.shape
    if min(nx, ny, nz) < 2:
        return np.zeros((0, 3)), np.zeros((0, 3), np.int64), np.zeros((0, 4), np.int64)
    below = v < 0
    case = np.zeros((nx - 1, ny - 1, nz - 1), np.int64)
    for k, (dx, dy, dz) in enumerate(CORNERS):
        case |= below[dx:dx + nx - 1, dy:dy + ny - 1, dz:dz + nz - 1].astype(np.int64) << k
    active = (case != 0) & (case != 255)
    if valid is not None:
        active &= valid
    cubes = np.argwhere(active)
    cases = case[active]
    ntri = _NTRI[cases]
    total = int(ntri.sum())
    if total == 0:
        return np.zeros((0, 3)), np.zeros((0, 3), np.int64), np.zeros((0, 4), np.int64)
    owner = np.repeat(np.arange(len(cases)), ntri)
    j = np.arange(total) - np.repeat(np.cumsum(ntri) - ntri, ntri)
    tri_edges = _TRI[cases[owner][:, None], 3 * j[:, None] + np.arange(3)[None, :]]  # (T, 3)

    lower = cubes[owner][:, None, :] + _EDGE_LOWER[tri_edges]  # local corner index (T, 3, 3)
    axis = _EDGE_AXIS[tri_edges]
    keys = np.concatenate([lower.reshape(-1, 3), axis.reshape(-1, 1)], axis=1)
    ukeys, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    c0 = ukeys[:, :3]
    step = np.eye(3, dtype=np.int64)[ukeys[:, 3]]
    c1 = c0 + step
    va = v[c0[:, 0], c0[:, 1], c0[:, 2]]
    vb = v[c1[:, 0], c1[:, 1], c1[:, 2]]
    t = va / (va - vb)
    verts = np.asarray(origin, dtype=np.float64) + (c0 + t[:, None] * step) * spacing
    tris = inverse.reshape(-1, 3)
    # the table winds triangles with normals toward the negative side
    tris = tris[:, ::-1].copy()
    ukeys[:, :3] += np.asarray(index_offset, dtype=np.int64)
    return verts, tris, ukeys


def _clean(verts, tris, normals=None):
    """Weld coincident vertices and drop degenerate triangles."""
    if len(tris) == 0:
        return verts[:0], tris, None if normals is None else normals[:0]
    uniq, first, inverse = np.unique(verts, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(first, kind="stable")
    # keep the original vertex order (first occurrence)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    verts = uniq[order]
    if normals is not None:
        normals = normals[first[order]]
    tris = rank[inverse][tris]
    ok = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    tris = tris[ok]
    a, b, c = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
    tris = tris[area2 > 1e-14]
    used = np.unique(tris)
    remap = np.full(len(verts), -1, np.int64)
    remap[used] = np.arange(len(used))
    verts = verts[used]
    if normals is not None:
        normals = normals[used]
    return verts, remap[tris], normals


def mesh_from_sdf(fn, lo, hi, spacing, valid_fn=None) -> TriangleMesh:
    """Marching cubes over an arbitrary vectorised SDF ``fn(points) -> values``."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    n = np.floor((hi - lo) / spacing + 1e-9).astype(int) + 1
    axes = [lo[k] + np.arange(n[k]) * spacing for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1)
    values = np.asarray(fn(grid.reshape(-1, 3)), dtype=np.float64).reshape(tuple(n))
    valid = None
    if valid_fn is not None:
        ok = np.asarray(valid_fn(grid.reshape(-1, 3)), bool).reshape(tuple(n))
        valid = _all_corners(ok)
    verts, tris, _ = marching_cubes(values, valid, lo, spacing)
    verts, tris, _ = _clean(verts, tris)
    return TriangleMesh(verts, tris)


def _all_corners(mask):
    nx, ny, nz = mask.shape
    out = np.ones((nx - 1, ny - 1, nz - 1), bool)
    for dx, dy, dz in CORNERS:
        out &= mask[dx:dx + nx - 1, dy:dy + ny - 1, dz:dz + nz - 1]
    return out


def _any_cube(cubes):
    """Corner mask of every corner touched by a True cube."""
    nx, ny, nz = cubes.shape
    out = np.zeros((nx + 1, ny + 1, nz + 1), bool)
    for dx, dy, dz in CORNERS:
        out[dx:dx + nx, dy:dy + ny, dz:dz + nz] |= cubes
    return out


def _gather_observed(global_map, lo, hi):
    """Leaf observation bits for the global voxel box [lo, hi)."""
    E0 = global_map.config.extent(0)
    out = np.zeros(tuple(int(h - l) for l, h in zip(lo, hi)), bool)
    for key, tlo, thi in split_by_tiles(lo, hi, E0):
        if not global_map.is_allocated(key):
            continue
        region = VoxelRegion(0, key, tuple(int(x) for x in tlo), tuple(int(x) - 1 for x in thi))
        block = global_map.fetch_blocks([region])[0]
        sl = tuple(slice(int(a - l), int(b - l)) for a, b, l in zip(tlo, thi, lo))
        out[sl] = block.observed
    return out


def query_grid_for_submap(global_map, key) -> LocalFeatureGrid:
    """Read-only feature grid covering one sub-map plus a two-coarse-voxel ring."""
    cfg = global_map.config
    hc = cfg.coarsest_voxel_size
    per_side = cfg.extent(cfg.levels - 1)
    qcfg = GridConfig(cfg.leaf_voxel_size, cfg.levels, cfg.feature_dim, cfg.local_map_side + 4 * hc)
    origin_index = np.asarray(key, dtype=np.int64) * per_side - 2
    grid = LocalFeatureGrid(qcfg, origin_index, dtype=global_map.dtype, with_optimizer=False,
                            tile_extents=[cfg.extent(l) for l in range(cfg.levels)])
    for block in global_map.fetch_blocks(grid.full_regions()):
        grid.pad_block(block)
    return grid


def _sdf(grid, decoder, points):
    out = np.empty(len(points))
    for s in range(0, len(points), 1 << 16):
        out[s:s + (1 << 16)] = decoder(grid.interpolate_values(points[s:s + (1 << 16)]))
    return out


def extract_mesh(global_map, decoder, region=None, normals=True) -> TriangleMesh:
    """Mesh the observed part of ``region`` (a ``(lo, hi)`` box in metres), sub-map by sub-map."""
    cfg = global_map.config
    s = cfg.leaf_voxel_size
    E0 = cfg.extent(0)
    keys = global_map.keys()
    if not keys:
        return TriangleMesh.empty()
    if region is None:
        karr = np.asarray(keys)
        lo = karr.min(axis=0) * cfg.local_map_side
        hi = (karr.max(axis=0) + 1) * cfg.local_map_side
    else:
        lo, hi = (np.asarray(x, dtype=np.float64).reshape(3) for x in region)
    # cubes are owned by their minimum corner, a leaf voxel centre inside [lo, hi)
    c_lo = np.ceil(lo / s - 0.5 - 1e-9).astype(np.int64)
    c_hi = np.ceil(hi / s - 0.5 - 1e-9).astype(np.int64)
    if np.any(c_hi <= c_lo):
        return TriangleMesh.empty()

    all_v, all_t, all_k, all_n = [], [], [], []
    n_verts = 0
    for key in keys:
        k = np.asarray(key, dtype=np.int64)
        a = np.maximum(k * E0, c_lo)
        b = np.minimum((k + 1) * E0, c_hi)
        if np.any(b <= a):
            continue
        observed = _gather_observed(global_map, a, b + 1)
        valid = _all_corners(observed)
        if not valid.any():
            continue
        need = _any_cube(valid)
        grid = query_grid_for_submap(global_map, key)
        idx = np.argwhere(need)
        values = np.full(need.shape, np.nan)
        values[need] = _sdf(grid, decoder, (idx + a + 0.5) * s)
        verts, tris, vkeys = marching_cubes(values, valid, (a + 0.5) * s, s, a)
        if len(tris) == 0:
            continue
        if normals:
            h = 0.5 * s
            grad = np.zeros_like(verts)
            for ax in range(3):
                e = np.zeros(3)
                e[ax] = h
                grad[:, ax] = _sdf(grid, decoder, verts + e) - _sdf(grid, decoder, verts - e)
            norm = np.linalg.norm(grad, axis=1, keepdims=True)
            all_n.append(grad / np.where(norm > 0, norm, 1.0))
        all_v.append(verts)
        all_k.append(vkeys)
        all_t.append(tris + n_verts)
        n_verts += len(verts)
        del grid

    if not all_t:
        return TriangleMesh.empty()
    verts = np.concatenate(all_v)
    vkeys = np.concatenate(all_k)
    tris = np.concatenate(all_t)
    nrm = np.concatenate(all_n) if normals else None
    _, first, inverse = np.unique(vkeys, axis=0, return_index=True, return_inverse=True)
    verts = verts[first]
    nrm = nrm[first] if nrm is not None else None
    tris = inverse.reshape(-1)[tris]
    verts, tris, nrm = _clean(verts, tris, nrm)
    return TriangleMesh(verts, tris, nrm)
