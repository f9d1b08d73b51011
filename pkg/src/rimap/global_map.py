"""Hash-indexed archive of sub-maps with an active (fast) and frozen (archive) tier."""
from __future__ import annotations

import hashlib
import logging
import math
import struct
import zlib
from pathlib import Path

import numpy as np

from .config import GridConfig
from .errors import ArchiveError, DataFormatError
from .feature_grid import Key, VoxelBlock, VoxelRegion

log = logging.getLogger(__name__)

MAGIC = b"RIMS"
VERSION = 1
_HEADER = struct.Struct("<4sHBdIId3q")


def checksum64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def submap_key_for(position, side: float) -> Key:
    p = np.asarray(position, dtype=np.float64).reshape(3)
    k = np.floor(p / side)
    # the division can round across a boundary (e.g. tiny negatives to -0.0)
    k = np.where(k * side > p, k - 1, np.where((k + 1) * side <= p, k + 1, k)).astype(np.int64)
    return tuple(int(x) for x in k)


class TileOptState:
    """Adam moments for one sub-map level, stored densely (flat voxel index rows).

    Arrays are allocated on the first write that carries a touched voxel, so a
    level that never trained costs nothing; once allocated the footprint is
    fixed, which keeps the active tier a constant-size tile per sub-map.
    Entries with t == 0 always hold zero moments.
    """

    def __init__(self, extent: int, dim: int, dtype):
        self.extent = extent
        self.dim = dim
        self.dtype = np.dtype(dtype)
        self.m = self.v = self.t = None

    def _alloc(self):
        n = self.extent ** 3
        self.m = np.zeros((n, self.dim), self.dtype)
        self.v = np.zeros((n, self.dim), self.dtype)
        self.t = np.zeros(n, np.int32)

    def write(self, flat, m, v, t):
        touched = t > 0
        if self.t is None:
            if not touched.any():
                return
            self._alloc()
        keep = touched[:, None]
        self.m[flat] = np.where(keep, m, 0)
        self.v[flat] = np.where(keep, v, 0)
        self.t[flat] = np.where(touched, t, 0)

    def write_box(self, sl, m, v, t):
        """``write`` for a box of slices; ``m, v`` are (x, y, z, D), ``t`` is (x, y, z)."""
        touched = t > 0
        if self.t is None:
            if not touched.any():
                return
            self._alloc()
        E, D = self.extent, self.dim
        keep = touched[..., None]
        self.m.reshape(E, E, E, D)[sl] = np.where(keep, m, 0)
        self.v.reshape(E, E, E, D)[sl] = np.where(keep, v, 0)
        self.t.reshape(E, E, E)[sl] = np.where(touched, t, 0)

    def read_box(self, sl, shape):
        if self.t is None:
            return (np.zeros(shape + (self.dim,), self.dtype), np.zeros(shape + (self.dim,), self.dtype),
                    np.zeros(shape, np.int32))
        E, D = self.extent, self.dim
        return (self.m.reshape(E, E, E, D)[sl].copy(), self.v.reshape(E, E, E, D)[sl].copy(),
                self.t.reshape(E, E, E)[sl].copy())

    def read(self, flat):
        if self.t is None:
            n = flat.shape[0]
            return (np.zeros((n, self.dim), self.dtype), np.zeros((n, self.dim), self.dtype),
                    np.zeros(n, np.int32))
        return self.m[flat], self.v[flat], self.t[flat]

    def entries(self):
        """Live entries as (flat index, m, v, t) sorted by flat index."""
        if self.t is None:
            return (np.zeros(0, np.int64), np.zeros((0, self.dim), self.dtype),
                    np.zeros((0, self.dim), self.dtype), np.zeros(0, np.int32))
        flat = np.flatnonzero(self.t > 0)
        return flat, self.m[flat], self.v[flat], self.t[flat]

    @property
    def nbytes(self) -> int:
        if self.t is None:
            return 0
        return self.m.nbytes + self.v.nbytes + self.t.nbytes


class SubMap:
    def __init__(self, key: Key, config: GridConfig, dtype=np.float32):
        self.key = key
        self.config = config
        self.dtype = np.dtype(dtype)
        self.extents = [config.extent(l) for l in range(config.levels)]
        D = config.feature_dim
        self.features = [np.zeros((E, E, E, D), self.dtype) for E in self.extents]
        E0 = self.extents[0]
        self.observed = np.zeros((E0, E0, E0), bool)
        self.opt = [TileOptState(E, D, self.dtype) for E in self.extents]

    def base(self, level: int) -> np.ndarray:
        return np.asarray(self.key, dtype=np.int64) * self.extents[level]

    def _local_box(self, level, lo, hi_incl):
        b = self.base(level)
        llo = np.asarray(lo) - b
        lhi = np.asarray(hi_incl) - b + 1
        E = self.extents[level]
        if np.any(llo < 0) or np.any(lhi > E):
            raise DataFormatError(f"voxel range {lo}..{hi_incl} is not inside sub-map {self.key}")
        return tuple(slice(int(a), int(c)) for a, c in zip(llo, lhi)), llo, lhi

    def write_block(self, block: VoxelBlock) -> None:
        sl, llo, lhi = self._local_box(block.level, block.lo, block.hi)
        self.features[block.level][sl] = block.features
        if block.level == 0 and block.observed is not None:
            self.observed[sl] = block.observed
        if block.adam_t is not None:
            self.opt[block.level].write_box(sl, block.adam_m, block.adam_v, block.adam_t)

    def read_block(self, region: VoxelRegion) -> VoxelBlock:
        sl, llo, lhi = self._local_box(region.level, region.lo, region.hi)
        shape = tuple(int(c - a) for a, c in zip(llo, lhi))
        m, v, t = self.opt[region.level].read_box(sl, shape)
        return VoxelBlock(
            level=region.level, submap_key=region.submap_key, lo=region.lo, hi=region.hi,
            features=self.features[region.level][sl].copy(),
            observed=self.observed[sl].copy() if region.level == 0 else None,
            adam_m=m, adam_v=v, adam_t=t,
        )

    @property
    def nbytes(self) -> int:
        return (sum(f.nbytes for f in self.features) + self.observed.nbytes
                + sum(o.nbytes for o in self.opt))

    # serialization ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        cfg = self.config
        real = self.dtype.itemsize
        rt = np.dtype(f"<f{real}")
        parts = [_HEADER.pack(MAGIC, VERSION, real, cfg.leaf_voxel_size, cfg.levels,
                              cfg.feature_dim, cfg.local_map_side, *self.key)]
        for f in self.features:
            # x-fastest ordering
            parts.append(np.ascontiguousarray(f.transpose(2, 1, 0, 3), dtype=rt).tobytes())
        parts.append(np.packbits(self.observed.transpose(2, 1, 0).reshape(-1), bitorder="little").tobytes())
        for level, opt in enumerate(self.opt):
            E = self.extents[level]
            flat, m, v, t = opt.entries()
            x, y, z = np.unravel_index(flat, (E, E, E))
            xfast = x + E * (y + E * z)
            order = np.argsort(xfast, kind="stable")
            parts.append(struct.pack("<Q", flat.shape[0]))
            parts.append(xfast[order].astype("<u8").tobytes())
            parts.append(t[order].astype("<i4").tobytes())
            parts.append(m[order].astype(rt).tobytes())
            parts.append(v[order].astype(rt).tobytes())
        body = b"".join(parts)
        return body + struct.pack("<Q", checksum64(body))

    @classmethod
    def from_bytes(cls, data: bytes, config: GridConfig | None = None) -> "SubMap":
        if len(data) < _HEADER.size + 8:
            raise DataFormatError("sub-map blob truncated")
        body, tail = data[:-8], data[-8:]
        magic, version, real, s, levels, D, side, kx, ky, kz = _HEADER.unpack_from(body)
        if magic != MAGIC:
            raise DataFormatError(f"bad sub-map magic {magic!r}")
        if version != VERSION:
            raise DataFormatError(f"unsupported sub-map version {version}")
        if struct.unpack("<Q", tail)[0] != checksum64(body):
            raise DataFormatError("sub-map checksum mismatch")
        if real not in (4, 8):
            raise DataFormatError(f"bad real size {real}")
        blob_cfg = GridConfig(leaf_voxel_size=s, levels=levels, feature_dim=D, local_map_side=side)
        if config is not None and blob_cfg != config:
            raise DataFormatError(f"sub-map grid config {blob_cfg} does not match map config {config}")
        rt = np.dtype(f"<f{real}")
        dtype = np.float32 if real == 4 else np.float64
        sm = cls((kx, ky, kz), blob_cfg, dtype)
        off = _HEADER.size

        def take(count, dt):
            nonlocal off
            nbytes = count * np.dtype(dt).itemsize
            if off + nbytes > len(body):
                raise DataFormatError("sub-map blob truncated")
            arr = np.frombuffer(body, dtype=dt, count=count, offset=off)
            off += nbytes
            return arr

        for level, E in enumerate(sm.extents):
            arr = take(E ** 3 * D, rt).reshape(E, E, E, D).transpose(2, 1, 0, 3)
            sm.features[level] = np.ascontiguousarray(arr, dtype=dtype)
        E0 = sm.extents[0]
        bits = take((E0 ** 3 + 7) // 8, np.uint8)
        obs = np.unpackbits(bits, count=E0 ** 3, bitorder="little").astype(bool)
        sm.observed = np.ascontiguousarray(obs.reshape(E0, E0, E0).transpose(2, 1, 0))
        for level, E in enumerate(sm.extents):
            (count,) = struct.unpack("<Q", take(8, np.uint8).tobytes())
            xfast = take(count, "<u8").astype(np.int64)
            t = take(count, "<i4").astype(np.int32)
            m = take(count * D, rt).reshape(count, D).astype(dtype)
            v = take(count * D, rt).reshape(count, D).astype(dtype)
            x = xfast % E
            y = (xfast // E) % E
            z = xfast // (E * E)
            flat = (x * E + y) * E + z
            sm.opt[level].write(flat, m, v, t)
        if off != len(body):
            raise DataFormatError("trailing bytes in sub-map blob")
        return sm


class MemoryArchive:
    """Frozen sub-maps as zlib-compressed blobs in process memory."""

    def __init__(self):
        self._blobs: dict[Key, bytes] = {}

    def put(self, key: Key, blob: bytes) -> None:
        self._blobs[key] = zlib.compress(blob, 1)

    def get(self, key: Key) -> bytes:
        return zlib.decompress(self._blobs[key])

    def remove(self, key: Key) -> None:
        del self._blobs[key]

    def __contains__(self, key) -> bool:
        return key in self._blobs

    def keys(self):
        return list(self._blobs)

    @property
    def nbytes(self) -> int:
        return sum(len(b) for b in self._blobs.values())


class DiskArchive:
    """Frozen sub-maps as blob files in a directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._sizes: dict[Key, int] = {}

    def _path(self, key: Key) -> Path:
        return self.root / ("%d_%d_%d.rims" % key)

    def put(self, key: Key, blob: bytes) -> None:
        path = self._path(key)
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(blob)
        tmp.replace(path)
        self._sizes[key] = len(blob)

    def get(self, key: Key) -> bytes:
        return self._path(key).read_bytes()

    def remove(self, key: Key) -> None:
        self._path(key).unlink(missing_ok=True)
        del self._sizes[key]

    def __contains__(self, key) -> bool:
        return key in self._sizes

    def keys(self):
        return list(self._sizes)

    @property
    def nbytes(self) -> int:
        return sum(self._sizes.values())


class GlobalMap:
    """Unbounded tiling of local-map-sized sub-maps.

    Active sub-maps live in ``self.active``; frozen ones are serialized into
    ``self.archive``. ``save_blocks`` and ``fetch_blocks`` transparently
    reactivate frozen sub-maps they touch.
    """

    def __init__(self, config: GridConfig, freeze_radius: float = math.inf, archive=None,
                 dtype=np.float32):
        self.config = config
        self.side = config.local_map_side
        self.freeze_radius = freeze_radius
        self.archive = archive if archive is not None else MemoryArchive()
        self.dtype = np.dtype(dtype)
        self.active: dict[Key, SubMap] = {}

    def submap_key_for(self, position) -> Key:
        return submap_key_for(position, self.side)

    def keys(self) -> list[Key]:
        return sorted(set(self.active) | set(self.archive.keys()))

    def is_allocated(self, key: Key) -> bool:
        return key in self.active or key in self.archive

    def state(self, key: Key) -> str:
        if key in self.active:
            return "active"
        if key in self.archive:
            return "frozen"
        raise KeyError(key)

    @property
    def active_bytes(self) -> int:
        return sum(sm.nbytes for sm in self.active.values())

    @property
    def archive_bytes(self) -> int:
        return self.archive.nbytes

    # tier transitions -------------------------------------------------------

    def activate(self, key: Key) -> SubMap:
        sm = self.active.get(key)
        if sm is not None:
            return sm
        sm = SubMap.from_bytes(self.archive.get(key), self.config)
        if sm.dtype != self.dtype:
            raise DataFormatError(f"archived sub-map {key} has dtype {sm.dtype}, map uses {self.dtype}")
        self.active[key] = sm
        self.archive.remove(key)
        return sm

    def freeze(self, key: Key) -> bool:
        sm = self.active[key]
        try:
            self.archive.put(key, sm.to_bytes())
        except OSError as exc:
            log.warning("could not freeze sub-map %s, keeping it active: %s", key, exc)
            return False
        del self.active[key]
        return True

    def _get_or_create(self, key: Key) -> SubMap:
        if key in self.active:
            return self.active[key]
        if key in self.archive:
            return self.activate(key)
        sm = SubMap(key, self.config, self.dtype)
        self.active[key] = sm
        return sm

    # block transfer ---------------------------------------------------------

    def save_blocks(self, blocks) -> None:
        for block in blocks:
            key = tuple(block.submap_key)
            if not self.is_allocated(key) and not block.has_content():
                # fetches from unallocated space return zeros anyway
                continue
            self._get_or_create(key).write_block(block)

    def fetch_blocks(self, regions) -> list[VoxelBlock]:
        D = self.config.feature_dim
        out = []
        for region in regions:
            key = tuple(region.submap_key)
            if self.is_allocated(key):
                out.append(self.activate(key).read_block(region))
                continue
            shape = tuple(h - l + 1 for l, h in zip(region.lo, region.hi))
            out.append(VoxelBlock(
                level=region.level, submap_key=key, lo=region.lo, hi=region.hi,
                features=np.zeros(shape + (D,), self.dtype),
                observed=np.zeros(shape, bool) if region.level == 0 else None,
                adam_m=np.zeros(shape + (D,), self.dtype),
                adam_v=np.zeros(shape + (D,), self.dtype),
                adam_t=np.zeros(shape, np.int32),
            ))
        return out

    def submap_center(self, key: Key) -> np.ndarray:
        return (np.asarray(key, dtype=np.float64) + 0.5) * self.side

    def enforce_budget(self, robot_position, local_origin=None) -> list[tuple[Key, str]]:
        """Freeze far sub-maps and reactivate the ones around the local map.

        Sub-maps overlapped by the local map (plus one sub-map of margin) are
        kept active; any other active sub-map whose centre is farther than
        ``freeze_radius`` from the robot is frozen.
        """
        robot = np.asarray(robot_position, dtype=np.float64).reshape(3)
        if local_origin is None:
            local_origin = robot - 0.5 * self.side
        lo = np.floor(np.asarray(local_origin) / self.side).astype(np.int64) - 1
        hi = np.ceil((np.asarray(local_origin) + self.side) / self.side).astype(np.int64)
        # hi is one past the last overlapped key, so it is already the +1 margin

        def kept(key):
            k = np.asarray(key)
            return bool(np.all(k >= lo) and np.all(k <= hi))

        transitions = []
        for key in sorted(self.active):
            if kept(key):
                continue
            if np.linalg.norm(self.submap_center(key) - robot) > self.freeze_radius:
                if self.freeze(key):
                    transitions.append((key, "frozen"))
        for key in sorted(self.archive.keys()):
            if kept(key):
                self.activate(key)
                transitions.append((key, "active"))
        return transitions

    def load_submap(self, blob: bytes, state: str = "active") -> Key:
        sm = SubMap.from_bytes(blob, self.config)
        if state == "active":
            self.active[sm.key] = sm
        elif state == "frozen":
            self.archive.put(sm.key, blob)
        else:
            raise DataFormatError(f"unknown sub-map state {state!r}")
        return sm.key

    def submap_bytes(self, key: Key) -> bytes:
        if key in self.active:
            return self.active[key].to_bytes()
        if key in self.archive:
            return self.archive.get(key)
        raise KeyError(key)


def make_archive(kind: str, root=None):
    if kind == "memory":
        return MemoryArchive()
    if root is None:
        raise ArchiveError("disk archive requires a directory")
    return DiskArchive(root)
