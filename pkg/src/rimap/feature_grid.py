"""Robot-centric multi-resolution feature volume with toroidal storage.

Every level stores a dense ``(E, E, E, D)`` array. A voxel with global index
``g`` lives in storage slot ``g mod E``, so moving the map origin never moves
data: the slots vacated by voxels leaving the map are exactly the slots of the
voxels entering it.

Features are cell-centred: the feature of voxel ``i`` sits at
``origin + (i + 0.5) * h``, and a query is blended from the 8 surrounding
voxel centres.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .config import GridConfig
from .errors import OutOfBoundsError, ShapeError, StaleCacheError
from .optim import adam_step

Key = tuple[int, int, int]

# corner k of a cell is offset (k >> 2 & 1, k >> 1 & 1, k & 1)
_CORNER_OFFSETS = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)


@dataclass
class VoxelBlock:
    """A box of voxels copied out of (or destined for) the local map.

    ``lo``/``hi`` are inclusive global voxel indices at ``level``.
    """

    level: int
    submap_key: Key
    lo: tuple[int, int, int]
    hi: tuple[int, int, int]
    features: np.ndarray
    observed: np.ndarray | None = None
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    adam_t: np.ndarray | None = None

    def __post_init__(self):
        shape = tuple(h - l + 1 for l, h in zip(self.lo, self.hi))
        if self.features.shape[:3] != shape:
            raise ShapeError(f"block payload {self.features.shape} does not match range {shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.features.shape[:3]

    def has_content(self) -> bool:
        if self.features.any():
            return True
        if self.observed is not None and self.observed.any():
            return True
        return self.adam_t is not None and bool(self.adam_t.any())


@dataclass(frozen=True)
class VoxelRegion:
    level: int
    submap_key: Key
    lo: tuple[int, int, int]
    hi: tuple[int, int, int]


@dataclass
class SlideReport:
    outgoing: list[VoxelBlock] = field(default_factory=list)
    incoming_regions: list[VoxelRegion] = field(default_factory=list)
    moved: bool = False


@dataclass
class InterpCache:
    epoch: int
    slots: list[np.ndarray]
    weights: list[np.ndarray]


def box_difference(a_lo, a_hi, b_lo, b_hi):
    """Decompose half-open box ``a`` minus box ``b`` into disjoint half-open boxes."""
    lo, hi = list(a_lo), list(a_hi)
    out = []
    for ax in range(3):
        if lo[ax] < min(b_lo[ax], hi[ax]):
            piece_lo, piece_hi = list(lo), list(hi)
            piece_hi[ax] = min(b_lo[ax], hi[ax])
            out.append((tuple(piece_lo), tuple(piece_hi)))
        if max(b_hi[ax], lo[ax]) < hi[ax]:
            piece_lo, piece_hi = list(lo), list(hi)
            piece_lo[ax] = max(b_hi[ax], lo[ax])
            out.append((tuple(piece_lo), tuple(piece_hi)))
        lo[ax] = max(lo[ax], b_lo[ax])
        hi[ax] = min(hi[ax], b_hi[ax])
        if lo[ax] >= hi[ax]:
            break
    return out


def split_by_tiles(lo, hi, tile: int):
    """Split half-open box [lo, hi) along a tiling of period ``tile``; yields (key, lo, hi)."""
    per_axis = []
    for l, h in zip(lo, hi):
        segs = []
        for k in range(l // tile, (h - 1) // tile + 1):
            segs.append((k, max(l, k * tile), min(h, (k + 1) * tile)))
        per_axis.append(segs)
    for sx, sy, sz in itertools.product(*per_axis):
        yield (sx[0], sy[0], sz[0]), (sx[1], sy[1], sz[1]), (sx[2], sy[2], sz[2])


_BIAS_TABLES: dict = {}


def _bias_table(beta: float, n: int) -> np.ndarray:
    """``1 - beta**t`` for t < n (at least), computed exactly as ``adam_step`` does."""
    tab = _BIAS_TABLES.get(beta)
    if tab is None or tab.size < n:
        size = max(n, 2 * (0 if tab is None else tab.size), 1024)
        tab = 1.0 - beta ** np.arange(size, dtype=np.int32)
        _BIAS_TABLES[beta] = tab
    return tab


class LocalFeatureGrid:
    """Sliding multi-resolution feature volume centred on the robot."""

    def __init__(self, config: GridConfig, origin_index, dtype=np.float32, with_optimizer=True,
                 tile_extents=None):
        self.config = config
        self.dtype = np.dtype(dtype)
        # origin in units of the coarsest voxel size
        self.origin_index = np.asarray(origin_index, dtype=np.int64).reshape(3)
        self.extents = [config.extent(l) for l in range(config.levels)]
        # sub-map period per level used to key blocks; differs from the extent
        # only for query grids that are larger than one sub-map
        self.tile_extents = list(tile_extents) if tile_extents is not None else list(self.extents)
        D = config.feature_dim
        self.features = [np.zeros((E, E, E, D), self.dtype) for E in self.extents]
        self.with_optimizer = with_optimizer
        if with_optimizer:
            self.adam_m = [np.zeros_like(f) for f in self.features]
            self.adam_v = [np.zeros_like(f) for f in self.features]
            self.adam_t = [np.zeros((E, E, E), np.int32) for E in self.extents]
        E0 = self.extents[0]
        self.observed = np.zeros((E0, E0, E0), bool)
        self.epoch = 0
        self._pending = [[] for _ in self.extents]
        self.exposed = [
            (l, tuple(self.level_base(l)), tuple(self.level_base(l) + E))
            for l, E in enumerate(self.extents)
        ]

    # geometry ---------------------------------------------------------------

    @property
    def origin(self) -> np.ndarray:
        return self.origin_index * self.config.coarsest_voxel_size

    @property
    def side(self) -> float:
        return self.config.local_map_side

    def level_base(self, level: int) -> np.ndarray:
        """Global voxel index of the local map's minimum corner at ``level``."""
        return self.origin_index * (1 << (self.config.levels - 1 - level))

    def interior_bounds(self):
        half = 0.5 * self.config.coarsest_voxel_size
        origin = self.origin
        return origin + half, origin + self.side - half

    def aabb(self):
        origin = self.origin
        return origin, origin + self.side

    def contains(self, points) -> np.ndarray:
        """Strict test against the interpolable interior (all 8 neighbours exist at every level)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lo, hi = self.interior_bounds()
        return np.all((pts > lo) & (pts < hi), axis=1)

    def local_to_global_voxel(self, v_local, level: int) -> np.ndarray:
        return np.asarray(v_local, dtype=np.int64) + self.level_base(level)

    def global_to_local_voxel(self, v_global, level: int) -> np.ndarray:
        return np.asarray(v_global, dtype=np.int64) - self.level_base(level)

    def _slots(self, g, level):
        """Flat storage slot for global voxel indices ``g`` (..., 3)."""
        E = self.extents[level]
        s = np.mod(g, E)
        return (s[..., 0] * E + s[..., 1]) * E + s[..., 2]

    def _box_index(self, lo, hi, level):
        E = self.extents[level]
        starts = [int(l) % E for l in lo]
        if all(a + (int(h) - int(l)) <= E for a, l, h in zip(starts, lo, hi)):
            # no wrap: plain slices avoid a fancy-index copy
            return tuple(slice(a, a + int(h) - int(l)) for a, l, h in zip(starts, lo, hi))
        return np.ix_(*(np.arange(l, h) % E for l, h in zip(lo, hi)))

    def _check_in_extent(self, lo, hi, level):
        base = self.level_base(level)
        E = self.extents[level]
        if np.any(np.asarray(lo) < base) or np.any(np.asarray(hi) > base + E):
            raise OutOfBoundsError(
                f"voxel range {tuple(lo)}..{tuple(hi)} outside local map at level {level}"
            )

    # interpolation ----------------------------------------------------------

    def interpolate(self, points):
        """Concatenated per-level trilinear features for ``points`` (N, 3).

        Returns ``(features (N, L*D), cache)``; the cache is needed by
        :meth:`accumulate_feature_grads`.
        """
        from ._kernels import interp_level_cached

        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        if pts.shape[0] and not self.contains(pts).all():
            raise OutOfBoundsError("interpolate: point outside the interpolable interior")
        D = self.config.feature_dim
        n = pts.shape[0]
        out = np.empty((n, self.config.levels * D), self.dtype)
        slots_all, weights_all = [], []
        origin = self.origin
        for level in range(self.config.levels):
            slots = np.empty((n, 8), np.int64)
            w = np.empty((n, 8), self.dtype)
            interp_level_cached(pts, origin, self.config.voxel_size(level), self.level_base(level),
                                self.features[level], out, level * D, slots, w)
            slots_all.append(slots)
            weights_all.append(w)
        return out, InterpCache(self.epoch, slots_all, weights_all)

    def _interpolate_numpy(self, points):
        """Pure numpy :meth:`interpolate`; reference for the compiled kernels."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] and not self.contains(pts).all():
            raise OutOfBoundsError("interpolate: point outside the interpolable interior")
        D = self.config.feature_dim
        n = pts.shape[0]
        out = np.empty((n, self.config.levels * D), self.dtype)
        slots_all, weights_all = [], []
        origin = self.origin
        for level, E in enumerate(self.extents):
            h = self.config.voxel_size(level)
            u = (pts - origin) / h - 0.5
            i0 = np.clip(np.floor(u).astype(np.int64), 0, E - 2)
            f = np.clip(u - i0, 0.0, 1.0)
            g0 = i0 + self.level_base(level)
            corners = g0[:, None, :] + _CORNER_OFFSETS[None, :, :]
            slots = self._slots(corners, level)
            fsel = np.where(_CORNER_OFFSETS[None, :, :] == 1, f[:, None, :], 1.0 - f[:, None, :])
            w = fsel.prod(axis=2).astype(self.dtype)
            flat = self.features[level].reshape(-1, D)
            acc = np.zeros((n, D), self.dtype)
            for k in range(8):
                acc += w[:, k, None] * flat[slots[:, k]]
            out[:, level * D:(level + 1) * D] = acc
            slots_all.append(slots)
            weights_all.append(w)
        return out, InterpCache(self.epoch, slots_all, weights_all)

    def interpolate_values(self, points) -> np.ndarray:
        """Inference-only :meth:`interpolate` (no cache), compiled inner loop."""
        from ._kernels import interp_level

        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        if pts.shape[0] and not self.contains(pts).all():
            raise OutOfBoundsError("interpolate: point outside the interpolable interior")
        D = self.config.feature_dim
        out = np.empty((pts.shape[0], self.config.levels * D), self.dtype)
        origin = self.origin
        for level in range(self.config.levels):
            interp_level(pts, origin, self.config.voxel_size(level), self.level_base(level),
                         self.features[level], out, level * D)
        return out

    def accumulate_feature_grads(self, cache: InterpCache, upstream) -> None:
        """Route d(loss)/d(interpolated feature) back onto the voxel features."""
        if cache.epoch != self.epoch:
            raise StaleCacheError(
                f"interpolation cache from epoch {cache.epoch}, grid is at epoch {self.epoch}"
            )
        up = np.asarray(upstream, dtype=self.dtype)
        D = self.config.feature_dim
        for level, (slots, w) in enumerate(zip(cache.slots, cache.weights)):
            g = up[:, level * D:(level + 1) * D]
            contrib = w[:, :, None] * g[:, None, :]
            self._pending[level].append((slots.reshape(-1), contrib.reshape(-1, D)))

    def reduced_grads(self, level: int):
        """Summed pending gradient per touched slot: ``(slots, grads)`` sorted by slot."""
        D = self.config.feature_dim
        pending = self._pending[level]
        if not pending:
            return np.zeros(0, np.int64), np.zeros((0, D), self.dtype)
        slots = np.concatenate([p[0] for p in pending])
        contrib = np.concatenate([p[1] for p in pending])
        uniq, inv = np.unique(slots, return_inverse=True)
        # add.at sums each slot's contributions in arrival order
        out = np.zeros((uniq.size, D), self.dtype)
        np.add.at(out, inv, contrib)
        return uniq, out

    def feature_grad(self, level: int) -> np.ndarray:
        """Dense gradient accumulator for ``level`` in storage layout."""
        E, D = self.extents[level], self.config.feature_dim
        dense = np.zeros((E * E * E, D), self.dtype)
        slots, g = self.reduced_grads(level)
        dense[slots] = g
        return dense.reshape(E, E, E, D)

    def zero_grad(self) -> None:
        self._pending = [[] for _ in self.extents]

    def adam_update(self, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> int:
        """Adam step on every voxel touched since the last zero_grad; returns voxel count."""
        if not self.with_optimizer:
            raise RuntimeError("grid was created without optimizer state")
        from ._kernels import sparse_adam

        touched = 0
        D = self.config.feature_dim
        c = self.dtype.type
        for level in range(self.config.levels):
            pending = self._pending[level]
            if not pending:
                continue
            slots = np.concatenate([p[0] for p in pending])
            contrib = np.concatenate([p[1] for p in pending])
            order = np.argsort(slots, kind="stable")
            t_all = self.adam_t[level].reshape(-1)
            n_t = int(t_all[slots].max()) + 2
            touched += sparse_adam(slots, order, contrib, self.features[level].reshape(-1, D),
                                   self.adam_m[level].reshape(-1, D),
                                   self.adam_v[level].reshape(-1, D), t_all, c(lr),
                                   _bias_table(beta1, n_t), _bias_table(beta2, n_t),
                                   c(beta1), c(1.0 - beta1), c(beta2), c(1.0 - beta2), c(eps))
        self.zero_grad()
        return touched

    def _adam_update_numpy(self, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> int:
        """Reference for :meth:`adam_update` built on ``reduced_grads`` and ``adam_step``."""
        touched = 0
        D = self.config.feature_dim
        for level in range(self.config.levels):
            slots, g = self.reduced_grads(level)
            if slots.size == 0:
                continue
            feat = self.features[level].reshape(-1, D)
            m_all = self.adam_m[level].reshape(-1, D)
            v_all = self.adam_v[level].reshape(-1, D)
            t_all = self.adam_t[level].reshape(-1)
            p, m, v = feat[slots], m_all[slots], v_all[slots]
            t = t_all[slots] + 1
            adam_step(p, g, m, v, t[:, None], lr, beta1, beta2, eps)
            feat[slots], m_all[slots], v_all[slots], t_all[slots] = p, m, v, t
            touched += slots.size
        self.zero_grad()
        return touched

    # observation mask -------------------------------------------------------

    def leaf_index(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        s = self.config.leaf_voxel_size
        return np.floor((pts - self.origin) / s).astype(np.int64) + self.level_base(0)

    def mark_observed(self, points) -> None:
        self.mark_observed_voxels(self.leaf_index(points))

    def mark_observed_voxels(self, g) -> None:
        """Set observation bits for global leaf indices (ignores those outside the map)."""
        g = np.asarray(g, dtype=np.int64).reshape(-1, 3)
        base = self.level_base(0)
        inside = np.all((g >= base) & (g < base + self.extents[0]), axis=1)
        self.observed.reshape(-1)[self._slots(g[inside], 0)] = True

    def mark_observed_dilated(self, points, r: int) -> None:
        """Mark the (2r+1)^3 leaf neighbourhood of every point."""
        from ._kernels import mark_dilated

        g = np.ascontiguousarray(self.leaf_index(points))
        mark_dilated(g, self.level_base(0), self.extents[0], int(r), self.observed)

    def is_observed(self, v_global) -> np.ndarray:
        """Observation bit for global leaf voxel indices; False outside the map."""
        g = np.asarray(v_global, dtype=np.int64)
        single = g.ndim == 1
        g = g.reshape(-1, 3)
        base = self.level_base(0)
        inside = np.all((g >= base) & (g < base + self.extents[0]), axis=1)
        out = np.zeros(g.shape[0], bool)
        out[inside] = self.observed.reshape(-1)[self._slots(g[inside], 0)]
        return bool(out[0]) if single else out

    # sliding ----------------------------------------------------------------

    def target_origin_index(self, robot_position) -> np.ndarray:
        hc = self.config.coarsest_voxel_size
        corner = np.asarray(robot_position, dtype=np.float64).reshape(3) - 0.5 * self.side
        return np.floor(corner / hc + 0.5).astype(np.int64)

    def _copy_block(self, level, key, lo, hi) -> VoxelBlock:
        idx = self._box_index(lo, hi, level)
        block = VoxelBlock(
            level=level,
            submap_key=tuple(int(k) for k in key),
            lo=tuple(int(x) for x in lo),
            hi=tuple(int(x) - 1 for x in hi),
            features=self.features[level][idx].copy(),
        )
        if level == 0:
            block.observed = self.observed[idx].copy()
        if self.with_optimizer:
            block.adam_m = self.adam_m[level][idx].copy()
            block.adam_v = self.adam_v[level][idx].copy()
            block.adam_t = self.adam_t[level][idx].copy()
        return block

    def _clear_box(self, level, lo, hi) -> None:
        idx = self._box_index(lo, hi, level)
        self.features[level][idx] = 0
        if level == 0:
            self.observed[idx] = False
        if self.with_optimizer:
            self.adam_m[level][idx] = 0
            self.adam_v[level][idx] = 0
            self.adam_t[level][idx] = 0

    def slide(self, robot_position) -> SlideReport:
        """Re-centre the map on ``robot_position``.

        Voxels leaving the map are returned as blocks keyed by destination
        sub-map; their slots are zeroed and listed as incoming regions to be
        padded from the global map.
        """
        new_index = self.target_origin_index(robot_position)
        if np.array_equal(new_index, self.origin_index):
            return SlideReport()
        report = SlideReport(moved=True)
        exposed = []
        shift = 1 << (self.config.levels - 1)
        for level, E in enumerate(self.extents):
            factor = shift >> level
            a = self.origin_index * factor
            b = new_index * factor
            tile = self.tile_extents[level]
            for lo, hi in box_difference(a, a + E, b, b + E):
                for key, tlo, thi in split_by_tiles(lo, hi, tile):
                    report.outgoing.append(self._copy_block(level, key, tlo, thi))
            for lo, hi in box_difference(b, b + E, a, a + E):
                for key, tlo, thi in split_by_tiles(lo, hi, tile):
                    self._clear_box(level, tlo, thi)
                    report.incoming_regions.append(
                        VoxelRegion(level, key, tuple(int(x) for x in tlo),
                                    tuple(int(x) - 1 for x in thi))
                    )
                    exposed.append((level, tuple(tlo), tuple(thi)))
        self.origin_index = new_index
        self.epoch += 1
        self.zero_grad()
        self.exposed = exposed
        return report

    def pad_block(self, block: VoxelBlock) -> None:
        """Write a fetched block into the freshly exposed part of the map."""
        lo = np.asarray(block.lo)
        hi = np.asarray(block.hi) + 1
        level = block.level
        self._check_in_extent(lo, hi, level)
        if not any(
            l == level and np.all(lo >= elo) and np.all(hi <= ehi)
            for l, elo, ehi in self.exposed
        ):
            raise OutOfBoundsError("pad_block: block overlaps the retained region of the local map")
        idx = self._box_index(lo, hi, level)
        self.features[level][idx] = block.features
        if level == 0 and block.observed is not None:
            self.observed[idx] = block.observed
        if self.with_optimizer and block.adam_t is not None:
            self.adam_m[level][idx] = block.adam_m
            self.adam_v[level][idx] = block.adam_v
            self.adam_t[level][idx] = block.adam_t

    def snapshot_blocks(self):
        """Yield copies of the whole local map, one block per sub-map and level."""
        for level, E in enumerate(self.extents):
            base = self.level_base(level)
            for key, lo, hi in split_by_tiles(base, base + E, self.tile_extents[level]):
                yield self._copy_block(level, key, lo, hi)

    def full_regions(self) -> list[VoxelRegion]:
        regions = []
        for level, E in enumerate(self.extents):
            base = self.level_base(level)
            for key, lo, hi in split_by_tiles(base, base + E, self.tile_extents[level]):
                regions.append(VoxelRegion(level, key, tuple(int(x) for x in lo),
                                           tuple(int(x) - 1 for x in hi)))
        return regions

    @property
    def nbytes(self) -> int:
        total = sum(f.nbytes for f in self.features) + self.observed.nbytes
        if self.with_optimizer:
            total += sum(a.nbytes for a in self.adam_m + self.adam_v + self.adam_t)
        return total


def create_grid(config: GridConfig, initial_robot_position, dtype=np.float32,
                with_optimizer=True) -> LocalFeatureGrid:
    """Zero-initialised local map centred (to the coarsest voxel) on the robot."""
    hc = config.coarsest_voxel_size
    corner = np.asarray(initial_robot_position, dtype=np.float64).reshape(3) - 0.5 * config.local_map_side
    origin_index = np.floor(corner / hc + 0.5).astype(np.int64)
    return LocalFeatureGrid(config, origin_index, dtype=dtype, with_optimizer=with_optimizer)
